//! Binary function-set containers and synthetic mesh datasets.
//!
//! Layout: a `u32` little-endian header length `H`, `H` bytes of UTF-8 TOML
//! header, positions as `f64` little-endian `[N, P_dim]`, then values as
//! `f32` little-endian `[S, f_dim, N]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::FunctionBatch;
use crate::error::{MinoError, Result};
use crate::gaussian_field::{GpSampler, GpSpec};
use crate::geometry::{Domain, PointSet};
use crate::scalar::Scalar;

pub const CONTAINER_MAGIC: &str = "MINOFS";
pub const CONTAINER_VERSION: u32 = 1;
const MAX_HEADER: u32 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub magic: String,
    pub format_version: u32,
    pub byte_order: String,
    pub p_dim: usize,
    pub f_dim: usize,
    pub n_points: usize,
    pub n_samples: usize,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
    #[serde(default)]
    pub notes: String,
    /// SHA-256 hex of this header serialized with an empty checksum.
    #[serde(default)]
    pub checksum: String,
}

impl ContainerHeader {
    fn for_batch<T: Scalar>(batch: &FunctionBatch<T>, notes: &str) -> Self {
        let pts = batch.points();
        let mut h = Self {
            magic: CONTAINER_MAGIC.into(),
            format_version: CONTAINER_VERSION,
            byte_order: "little".into(),
            p_dim: pts.dim(),
            f_dim: batch.f_dim(),
            n_points: pts.len(),
            n_samples: batch.len(),
            domain: pts.domain().clone(),
            grid: pts.grid_shape(),
            notes: notes.into(),
            checksum: String::new(),
        };
        h.checksum = h.digest();
        h
    }

    fn digest(&self) -> String {
        let mut blank = self.clone();
        blank.checksum.clear();
        let text = toml::to_string(&blank).expect("header fields are plain data");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn positions_bytes(&self) -> usize {
        8 * self.n_points * self.p_dim
    }

    pub fn values_bytes(&self) -> usize {
        4 * self.n_samples * self.f_dim * self.n_points
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> MinoError {
    MinoError::format(path, reason)
}

pub fn write_container_to<T: Scalar, W: Write>(batch: &FunctionBatch<T>, notes: &str, mut w: W) -> std::io::Result<()> {
    let header = ContainerHeader::for_batch(batch, notes);
    let text = toml::to_string(&header).map_err(std::io::Error::other)?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for x in batch.points().positions() {
        w.write_all(&x.to_le_bytes())?;
    }
    for v in batch.values() {
        w.write_all(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
    }
    w.flush()
}

pub fn write_container<T: Scalar>(path: impl AsRef<Path>, batch: &FunctionBatch<T>, notes: &str) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| MinoError::io(path, e))?;
    write_container_to(batch, notes, BufWriter::new(f)).map_err(|e| MinoError::io(path, e))
}

fn read_header_from<R: Read>(r: &mut R, path: &Path) -> Result<(ContainerHeader, usize)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| MinoError::io(path, e))?;
    let le = u32::from_le_bytes(len);
    if le == 0 || le > MAX_HEADER {
        let be = u32::from_be_bytes(len);
        if be > 0 && be <= MAX_HEADER {
            return Err(format_err(path, "byte order mismatch: header length is big-endian"));
        }
        return Err(format_err(path, format!("implausible header length {le}")));
    }
    let mut text = vec![0u8; le as usize];
    r.read_exact(&mut text).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(path, "truncated header"),
        _ => MinoError::io(path, e),
    })?;
    let text = String::from_utf8(text).map_err(|_| format_err(path, "header is not UTF-8"))?;
    let header: ContainerHeader = toml::from_str(&text).map_err(|e| format_err(path, format!("bad header: {e}")))?;
    if header.magic != CONTAINER_MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", header.magic)));
    }
    if header.byte_order != "little" {
        return Err(format_err(path, format!("byte order mismatch: blobs are {}-endian", header.byte_order)));
    }
    if header.format_version != CONTAINER_VERSION {
        return Err(format_err(path, format!("unsupported format version {}", header.format_version)));
    }
    if header.checksum != header.digest() {
        return Err(format_err(path, "header checksum mismatch"));
    }
    Ok((header, 4 + le as usize))
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<ContainerHeader> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| MinoError::io(path, e))?;
    Ok(read_header_from(&mut f, path)?.0)
}

pub fn read_container_from<T: Scalar, R: Read>(mut r: R, path: &Path) -> Result<FunctionBatch<T>> {
    let (h, _) = read_header_from(&mut r, path)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| MinoError::io(path, e))?;
    let need = h.positions_bytes() + h.values_bytes();
    if body.len() < need {
        return Err(format_err(path, format!("truncated: missing {} bytes", need - body.len())));
    }
    if body.len() > need {
        return Err(format_err(path, format!("{} unexpected trailing bytes", body.len() - need)));
    }
    let (pos, vals) = body.split_at(h.positions_bytes());
    let positions: Vec<f64> = pos.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let values: Vec<T> = vals
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    let points = PointSet::new(positions, h.p_dim, h.domain)
        .and_then(|p| p.with_grid_shape(h.grid))
        .map_err(|e| format_err(path, format!("invalid positions: {e}")))?;
    FunctionBatch::new(Arc::new(points), h.f_dim, values)
}

pub fn read_container<T: Scalar>(path: impl AsRef<Path>) -> Result<FunctionBatch<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| MinoError::io(path, e))?;
    read_container_from(BufReader::new(f), path)
}

/// Shuffled, disjoint `(train, test)` index sets over `0..n_train + n_test`.
pub fn split_indices(n_train: usize, n_test: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n_train + n_test).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED));
    let test = idx.split_off(n_train);
    (idx, test)
}

const GEN_CHUNK: usize = 1000;

/// Matern(0.4, 3/2) samples on `points`, split into train and test sets.
pub fn gen_mesh_gp<T: Scalar>(
    points: Arc<PointSet>,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(FunctionBatch<T>, FunctionBatch<T>)> {
    gen_gp_split(&GpSpec::mesh_gp(), points, n_train, n_test, seed)
}

/// Samples `n_train + n_test` functions from `spec` and splits them by [`split_indices`].
pub fn gen_gp_split<T: Scalar>(
    spec: &GpSpec,
    points: Arc<PointSet>,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(FunctionBatch<T>, FunctionBatch<T>)> {
    let sampler = GpSampler::<f64>::new(spec.clone(), points.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_train + n_test;
    let mut values = Vec::with_capacity(total * points.len());
    let mut done = 0;
    while done < total {
        let n = GEN_CHUNK.min(total - done);
        values.extend(sampler.sample(n, 1, &mut rng).values().iter().map(|&v| T::from_f64_lossy(v)));
        done += n;
    }
    let all = FunctionBatch::new(points, 1, values)?;
    let (train, test) = split_indices(n_train, n_test, seed);
    Ok((all.select(&train), all.select(&test)))
}
