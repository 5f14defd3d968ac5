use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, VelocityModel};
use crate::error::{MinoError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "MINOCK";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    format_version: u32,
    n_params: usize,
    model: ModelConfig,
}

/// Header length (u32 LE), TOML header, then every parameter as f32 LE.
pub fn write_checkpoint<T: Scalar, W: Write>(model: &VelocityModel<T>, mut w: W) -> std::io::Result<()> {
    let header = Header {
        magic: MAGIC.into(),
        format_version: CHECKPOINT_VERSION,
        n_params: model.num_params(),
        model: model.config().clone(),
    };
    let text = toml::to_string(&header).map_err(std::io::Error::other)?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for v in model.params().values() {
        w.write_all(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
    }
    w.flush()
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R, path: &Path) -> Result<VelocityModel<T>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| MinoError::io(path, e))?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(MinoError::format(path, format!("implausible header length {len}")));
    }
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(|e| MinoError::io(path, e))?;
    let text = String::from_utf8(text).map_err(|_| MinoError::format(path, "header is not UTF-8"))?;
    let header: Header = toml::from_str(&text).map_err(|e| MinoError::format(path, format!("bad header: {e}")))?;
    if header.magic != MAGIC {
        return Err(MinoError::format(path, "not a model checkpoint"));
    }
    if header.format_version != CHECKPOINT_VERSION {
        return Err(MinoError::format(path, format!("unsupported checkpoint version {}", header.format_version)));
    }
    let mut model = VelocityModel::<T>::new(header.model, 0)?;
    if model.num_params() != header.n_params {
        return Err(MinoError::format(
            path,
            format!("header declares {} parameters, config implies {}", header.n_params, model.num_params()),
        ));
    }
    let mut bytes = vec![0u8; 4 * header.n_params];
    r.read_exact(&mut bytes).map_err(|e| MinoError::io(path, e))?;
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    model.params_mut().load_values(&values)?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &VelocityModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| MinoError::io(path, e))?;
    write_checkpoint(model, BufWriter::new(f)).map_err(|e| MinoError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<VelocityModel<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| MinoError::io(path, e))?;
    read_checkpoint(BufReader::new(f), path)
}
