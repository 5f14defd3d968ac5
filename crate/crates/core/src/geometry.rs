//! Point sets, latent query grids, radius neighborhoods and sinusoidal embeddings.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{MinoError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Domain the observation points live in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Sphere { radius: f64 },
}

impl Domain {
    pub fn unit_box(dim: usize) -> Self {
        Domain::Box {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn unit_sphere() -> Self {
        Domain::Sphere { radius: 1.0 }
    }
}

/// Row-major positions `[N, P_dim]` (always 64-bit) plus their domain.
///
/// A point set built by [`PointSet::regular_grid`] remembers its grid shape
/// so grid-only metrics can be computed on it.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    positions: Vec<f64>,
    dim: usize,
    domain: Domain,
    grid: Option<(usize, usize)>,
}

impl PointSet {
    pub fn new(positions: Vec<f64>, dim: usize, domain: Domain) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(MinoError::invalid(format!("point dimension {dim} not in 1..=3")));
        }
        if positions.len() % dim != 0 {
            return Err(MinoError::shape(
                "PointSet::new",
                format!("multiple of {dim}"),
                positions.len(),
            ));
        }
        if let Some(bad) = positions.iter().position(|x| !x.is_finite()) {
            return Err(MinoError::invalid(format!("non-finite coordinate at flat index {bad}")));
        }
        match &domain {
            Domain::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return Err(MinoError::shape("PointSet::new", format!("box of dimension {dim}"), lower.len()));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
                    return Err(MinoError::invalid("box lower bound must be below upper bound"));
                }
                for (i, p) in positions.chunks(dim).enumerate() {
                    if p.iter().zip(lower.iter().zip(upper)).any(|(x, (l, u))| x < l || x > u) {
                        return Err(MinoError::invalid(format!("point {i} lies outside the box")));
                    }
                }
            }
            Domain::Sphere { radius } => {
                if dim != 3 {
                    return Err(MinoError::invalid("sphere domains need 3D embedded positions"));
                }
                if !(*radius > 0.0) {
                    return Err(MinoError::invalid("sphere radius must be positive"));
                }
                for (i, p) in positions.chunks(3).enumerate() {
                    let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if (norm - radius).abs() > 1e-9 * radius {
                        return Err(MinoError::invalid(format!("point {i} is off the sphere (norm {norm})")));
                    }
                }
            }
        }
        Ok(Self {
            positions,
            dim,
            domain,
            grid: None,
        })
    }

    /// Cell-centered `nx x ny` grid over a 2D box (or `nx` points on a 1D box with `ny == 1`).
    pub fn regular_grid(nx: usize, ny: usize, domain: Domain) -> Result<Self> {
        let grid = make_regular_grid(nx, ny, &domain)?;
        let mut set = Self::new(grid.positions, grid.dim, domain)?;
        set.grid = Some((nx, ny));
        Ok(set)
    }

    /// `n` independent uniform points in the box.
    pub fn uniform_random<R: rand::Rng + ?Sized>(n: usize, domain: Domain, rng: &mut R) -> Result<Self> {
        let Domain::Box { lower, upper } = &domain else {
            return Err(MinoError::invalid("uniform_random needs a box domain"));
        };
        let dim = lower.len();
        let mut positions = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for d in 0..dim {
                positions.push(lower[d] + (upper[d] - lower[d]) * rng.random::<f64>());
            }
        }
        Self::new(positions, dim, domain)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Grid shape when this point set is a declared regular grid.
    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn with_grid_shape(mut self, grid: Option<(usize, usize)>) -> Result<Self> {
        if let Some((nx, ny)) = grid {
            if nx * ny != self.len() {
                return Err(MinoError::shape("PointSet::with_grid_shape", nx * ny, self.len()));
            }
        }
        self.grid = grid;
        Ok(self)
    }

    /// Points at `indices`, in that order. The grid declaration is dropped.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut positions = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(MinoError::invalid(format!("subset index {i} out of range")));
            }
            positions.extend_from_slice(self.point(i));
        }
        Ok(Self {
            positions,
            dim: self.dim,
            domain: self.domain.clone(),
            grid: None,
        })
    }

    /// Hash of the exact coordinate bits; keys neighborhood caches.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.dim.hash(&mut h);
        for x in &self.positions {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentGridSpec {
    Regular {
        nx: usize,
        ny: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    SphericalLatLon { n_lon: usize, n_lat: usize },
}

impl LatentGridSpec {
    pub fn build(&self) -> Result<LatentGrid> {
        match self {
            LatentGridSpec::Regular { nx, ny, lower, upper } => make_regular_grid(
                *nx,
                *ny,
                &Domain::Box {
                    lower: lower.clone(),
                    upper: upper.clone(),
                },
            ),
            LatentGridSpec::SphericalLatLon { n_lon, n_lat } => make_spherical_grid(*n_lon, *n_lat),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            LatentGridSpec::Regular { nx, ny, .. } => nx * ny,
            LatentGridSpec::SphericalLatLon { n_lon, n_lat } => n_lon * n_lat,
        }
    }
}

/// Fixed latent query positions `[N_node, P_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    positions: Vec<f64>,
    dim: usize,
    pub spec: LatentGridSpec,
}

impl LatentGrid {
    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }
}

/// Cell-centered grid; points sit at `lower + (i + 1/2) * width / n`.
///
/// A 1D box takes `ny == 1`. Points are ordered x-major (`x` outer, `y` inner).
pub fn make_regular_grid(nx: usize, ny: usize, domain: &Domain) -> Result<LatentGrid> {
    if nx == 0 || ny == 0 {
        return Err(MinoError::invalid("grid sizes must be at least 1"));
    }
    let Domain::Box { lower, upper } = domain else {
        return Err(MinoError::invalid("regular grids need a box domain"));
    };
    let center = |d: usize, i: usize, n: usize| lower[d] + (i as f64 + 0.5) * (upper[d] - lower[d]) / n as f64;
    let positions = match lower.len() {
        1 => {
            if ny != 1 {
                return Err(MinoError::invalid("a 1D grid takes ny = 1"));
            }
            (0..nx).map(|i| center(0, i, nx)).collect()
        }
        2 => {
            let mut p = Vec::with_capacity(2 * nx * ny);
            for i in 0..nx {
                for j in 0..ny {
                    p.push(center(0, i, nx));
                    p.push(center(1, j, ny));
                }
            }
            p
        }
        d => return Err(MinoError::invalid(format!("regular grids support 1D and 2D boxes, not {d}D"))),
    };
    Ok(LatentGrid {
        positions,
        dim: lower.len(),
        spec: LatentGridSpec::Regular {
            nx,
            ny,
            lower: lower.clone(),
            upper: upper.clone(),
        },
    })
}

/// Unit-sphere points on an evenly spaced longitude/latitude grid.
///
/// Longitudes are `2*pi*i/n_lon`; latitudes sit at the centers of `n_lat`
/// equal bands so no point lands on a pole. Latitude is the outer loop.
pub fn make_spherical_grid(n_lon: usize, n_lat: usize) -> Result<LatentGrid> {
    if n_lon == 0 || n_lat == 0 {
        return Err(MinoError::invalid("grid sizes must be at least 1"));
    }
    let mut positions = Vec::with_capacity(3 * n_lon * n_lat);
    for j in 0..n_lat {
        let lat = -PI / 2.0 + PI * (j as f64 + 0.5) / n_lat as f64;
        for i in 0..n_lon {
            let lon = 2.0 * PI * i as f64 / n_lon as f64;
            positions.push(lat.cos() * lon.cos());
            positions.push(lat.cos() * lon.sin());
            positions.push(lat.sin());
        }
    }
    Ok(LatentGrid {
        positions,
        dim: 3,
        spec: LatentGridSpec::SphericalLatLon { n_lon, n_lat },
    })
}

/// Query-to-input pairs within a fixed radius, sorted by `(query, input)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub pairs: Vec<(usize, usize)>,
    pub degree: Vec<usize>,
    /// Set when the graph has no edges at all.
    pub empty_warning: bool,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// CSR offsets into `pairs`, one range per query.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.degree.len() + 1);
        off.push(0);
        for d in &self.degree {
            off.push(off.last().unwrap() + d);
        }
        off
    }

    pub fn empty_queries(&self) -> usize {
        self.degree.iter().filter(|&&d| d == 0).count()
    }
}

#[inline]
pub(crate) fn within_radius(a: &[f64], b: &[f64], radius: f64) -> bool {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d2 <= radius * radius
}

fn cell_of(p: &[f64], radius: f64) -> [i64; 3] {
    let mut c = [0i64; 3];
    for (k, x) in p.iter().enumerate() {
        c[k] = (x / radius).floor() as i64;
    }
    c
}

/// Radius graph from latent queries to input points via uniform spatial hashing.
///
/// Cells have side `radius`, so every neighbor of a query lies in the 3^P
/// block of cells around it.
pub fn build_radius_graph(input: &PointSet, query: &LatentGrid, radius: f64) -> Result<EdgeList> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(MinoError::invalid("radius must be positive and finite"));
    }
    if input.dim() != query.dim() {
        return Err(MinoError::shape("build_radius_graph", input.dim(), query.dim()));
    }
    let dim = input.dim();
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for i in 0..input.len() {
        cells.entry(cell_of(input.point(i), radius)).or_default().push(i);
    }

    let span: &[i64] = &[-1, 0, 1];
    let zero: &[i64] = &[0];
    let mut pairs = Vec::new();
    let mut degree = vec![0usize; query.len()];
    let mut found = Vec::new();
    for (q, deg) in degree.iter_mut().enumerate() {
        let pq = query.point(q);
        let base = cell_of(pq, radius);
        found.clear();
        let ys = if dim >= 2 { span } else { zero };
        let zs = if dim >= 3 { span } else { zero };
        for &dx in span {
            for &dy in ys {
                for &dz in zs {
                    let key = [base[0] + dx, base[1] + dy, base[2] + dz];
                    if let Some(bucket) = cells.get(&key) {
                        found.extend(bucket.iter().copied().filter(|&i| within_radius(pq, input.point(i), radius)));
                    }
                }
            }
        }
        found.sort_unstable();
        *deg = found.len();
        pairs.extend(found.iter().map(|&i| (q, i)));
    }
    let empty_warning = pairs.is_empty();
    if empty_warning {
        log::warn!("radius graph with r = {radius} has no edges; the encoder will see no signal");
    }
    Ok(EdgeList {
        pairs,
        degree,
        empty_warning,
    })
}

/// Frequency ladder for sinusoidal embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingScale {
    pub base: f64,
    /// Multiplier applied to the raw input before the ladder.
    pub input_scale: f64,
}

impl Default for EmbeddingScale {
    fn default() -> Self {
        Self {
            base: 10_000.0,
            input_scale: 1_000.0,
        }
    }
}

impl EmbeddingScale {
    /// `input_scale * base^(-2k / embed_dim)` for `k = 0 .. embed_dim/2`.
    pub fn frequencies(&self, embed_dim: usize) -> Vec<f64> {
        (0..embed_dim / 2)
            .map(|k| self.input_scale * self.base.powf(-2.0 * k as f64 / embed_dim as f64))
            .collect()
    }
}

/// Sinusoidal features of `values` laid out as `[n, dim]`.
///
/// Each coordinate becomes `[sin(w_1 v) .. sin(w_h v), cos(w_1 v) .. cos(w_h v)]`
/// and coordinate blocks are concatenated, giving `[n, dim * embed_dim]`.
pub fn sinusoidal_embed<T: Scalar>(
    values: &[f64],
    dim: usize,
    embed_dim: usize,
    scale: EmbeddingScale,
) -> Result<Matrix<T>> {
    if embed_dim < 2 || embed_dim % 2 != 0 {
        return Err(MinoError::invalid(format!("embedding width {embed_dim} must be even and at least 2")));
    }
    if dim == 0 || values.len() % dim != 0 {
        return Err(MinoError::shape("sinusoidal_embed", format!("multiple of {dim}"), values.len()));
    }
    let freqs = scale.frequencies(embed_dim);
    let half = embed_dim / 2;
    let n = values.len() / dim;
    let mut out = Matrix::zeros(n, dim * embed_dim);
    for i in 0..n {
        let row = out.row_mut(i);
        for d in 0..dim {
            let v = values[i * dim + d];
            let block = &mut row[d * embed_dim..(d + 1) * embed_dim];
            for (k, w) in freqs.iter().enumerate() {
                let (s, c) = (w * v).sin_cos();
                block[k] = T::from_f64_lossy(s);
                block[half + k] = T::from_f64_lossy(c);
            }
        }
    }
    Ok(out)
}
