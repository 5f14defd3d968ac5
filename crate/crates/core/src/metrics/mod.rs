//! Distances between sample sets of functions: sliced Wasserstein, unbiased
//! MMD and grid-based spectral statistics.

mod grid;
mod report;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use grid::{autocovariance, grid_metrics, power_spectrum, radial_spectrum, GridMetrics};
pub use report::{evaluate, EvalConfig, MetricReport};

use crate::batch::FunctionBatch;
use crate::error::{MinoError, Result};
use crate::scalar::Scalar;

/// `((1/N) sum |a_(i) - b_(i)|^p)^(1/p)` over sorted samples.
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: u32) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MinoError::shape("wasserstein_1d", a.len(), b.len()));
    }
    check_order(p)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    Ok(wasserstein_pp_sorting(&mut a, &mut b, p).powf(1.0 / p as f64))
}

fn check_order(p: u32) -> Result<()> {
    if p == 1 || p == 2 {
        Ok(())
    } else {
        Err(MinoError::invalid(format!("Wasserstein order must be 1 or 2, got {p}")))
    }
}

/// `W_p^p`, sorting both buffers in place.
fn wasserstein_pp_sorting(a: &mut [f64], b: &mut [f64], p: u32) -> f64 {
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let s: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = (x - y).abs();
            if p == 1 {
                d
            } else {
                d * d
            }
        })
        .sum();
    s / a.len() as f64
}

/// Seed of run `r` derived from a base seed; kept below `2^63` so it survives text formats.
pub fn run_seed(seed: u64, r: usize) -> u64 {
    let mut z = seed.wrapping_add((r as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

fn check_pair<T: Scalar>(x: &FunctionBatch<T>, y: &FunctionBatch<T>, op: &'static str) -> Result<()> {
    if !x.shares_discretization(y) {
        return Err(MinoError::invalid(format!("{op}: sample sets live on different discretizations")));
    }
    Ok(())
}

/// `L` unit directions in `R^d` as a row-major `[L, d]` matrix.
fn directions<T: Scalar>(l: usize, d: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![T::zero(); l * d];
    for row in theta.chunks_mut(d) {
        let draws: Vec<f64> = (0..d).map(|_| f64::sample_standard_normal(&mut rng)).collect();
        let norm = draws.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (t, v) in row.iter_mut().zip(draws) {
            *t = T::from_f64_lossy(v / norm);
        }
    }
    theta
}

/// `[S, L]` projections of flattened samples onto the rows of `theta`.
fn project<T: Scalar>(x: &FunctionBatch<T>, theta: &[T], l: usize) -> Vec<T> {
    let (s, d) = (x.len(), x.sample_len());
    let mut out = vec![T::zero(); s * l];
    T::gemm(s, d, l, T::one(), x.values(), (d as isize, 1), theta, (1, d as isize), T::zero(), &mut out, (l as isize, 1));
    out
}

/// Sliced `p`-Wasserstein distance with `l` random directions.
pub fn sliced_wasserstein<T: Scalar>(x: &FunctionBatch<T>, y: &FunctionBatch<T>, l: usize, p: u32, seed: u64) -> Result<f64> {
    check_pair(x, y, "sliced_wasserstein")?;
    check_order(p)?;
    if x.len() != y.len() {
        return Err(MinoError::shape("sliced_wasserstein", x.len(), y.len()));
    }
    if l == 0 {
        return Err(MinoError::invalid("need at least one projection"));
    }
    let s = x.len();
    if s == 0 {
        return Ok(0.0);
    }
    let theta = directions::<T>(l, x.sample_len(), seed);
    let px = project(x, &theta, l);
    let py = project(y, &theta, l);
    let mut a = vec![0.0; s];
    let mut b = vec![0.0; s];
    let mut total = 0.0;
    for j in 0..l {
        for i in 0..s {
            a[i] = px[i * l + j].to_f64().unwrap();
            b[i] = py[i * l + j].to_f64().unwrap();
        }
        total += wasserstein_pp_sorting(&mut a, &mut b, p);
    }
    Ok((total / l as f64).powf(1.0 / p as f64))
}

/// Mean of `n_run` sliced Wasserstein estimates with seeds `run_seed(seed, r)`.
pub fn averaged_swd<T: Scalar>(
    x: &FunctionBatch<T>,
    y: &FunctionBatch<T>,
    l: usize,
    n_run: usize,
    p: u32,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if n_run == 0 {
        return Err(MinoError::invalid("n_run must be at least 1"));
    }
    let runs = (0..n_run)
        .map(|r| sliced_wasserstein(x, y, l, p, run_seed(seed, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok((runs.iter().sum::<f64>() / n_run as f64, runs))
}

/// Flattened samples as f64 rows with their squared norms.
fn rows_f64<T: Scalar>(x: &FunctionBatch<T>) -> (Vec<f64>, Vec<f64>) {
    let rows = x.to_f64_rows();
    let d = x.sample_len();
    let norms = if d == 0 {
        vec![0.0; x.len()]
    } else {
        rows.chunks(d).map(|r| r.iter().map(|v| v * v).sum()).collect()
    };
    (rows, norms)
}

const BLOCK: usize = 512;

/// Sum of `exp(-|a_i - b_j|^2 / (2 h^2))` over all pairs, skipping `i == j` when `same`.
fn kernel_sum(a: &[f64], na: &[f64], b: &[f64], nb: &[f64], d: usize, bandwidth: f64, same: bool) -> f64 {
    let (m, n) = (na.len(), nb.len());
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut total = 0.0;
    let mut gram = vec![0.0; BLOCK * BLOCK];
    for i0 in (0..m).step_by(BLOCK) {
        let bi = BLOCK.min(m - i0);
        for j0 in (0..n).step_by(BLOCK) {
            let bj = BLOCK.min(n - j0);
            let g = &mut gram[..bi * bj];
            f64::gemm(bi, d, bj, 1.0, &a[i0 * d..], (d as isize, 1), &b[j0 * d..], (1, d as isize), 0.0, g, (bj as isize, 1));
            for i in 0..bi {
                for j in 0..bj {
                    if same && i0 + i == j0 + j {
                        continue;
                    }
                    let sq = (na[i0 + i] + nb[j0 + j] - 2.0 * g[i * bj + j]).max(0.0);
                    total += (-gamma * sq).exp();
                }
            }
        }
    }
    total
}

/// Unbiased estimate of the squared MMD under a Gaussian RBF kernel; may be slightly negative.
pub fn mmd_unbiased<T: Scalar>(x: &FunctionBatch<T>, y: &FunctionBatch<T>, bandwidth: f64) -> Result<f64> {
    check_pair(x, y, "mmd_unbiased")?;
    let (n, m) = (x.len(), y.len());
    if n < 2 || m < 2 {
        return Err(MinoError::invalid(format!("MMD needs at least two samples per set, got {n} and {m}")));
    }
    if !(bandwidth > 0.0) {
        return Err(MinoError::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let d = x.sample_len();
    let (xa, xn) = rows_f64(x);
    let (ya, yn) = rows_f64(y);
    let kxx = kernel_sum(&xa, &xn, &xa, &xn, d, bandwidth, true);
    let kyy = kernel_sum(&ya, &yn, &ya, &yn, d, bandwidth, true);
    let kxy = kernel_sum(&xa, &xn, &ya, &yn, d, bandwidth, false);
    let (nf, mf) = (n as f64, m as f64);
    Ok(kxx / (nf * (nf - 1.0)) + kyy / (mf * (mf - 1.0)) - 2.0 * kxy / (nf * mf))
}

/// Cap on pooled points used by [`median_bandwidth`].
pub const BANDWIDTH_SUBSAMPLE: usize = 2000;

/// Median pairwise distance of the pooled samples divided by `sqrt(2)`.
///
/// Pools above [`BANDWIDTH_SUBSAMPLE`] points are thinned to evenly spaced indices.
/// Returns `(bandwidth, fallback)`; a zero median falls back to `1.0`.
pub fn median_bandwidth<T: Scalar>(x: &FunctionBatch<T>, y: &FunctionBatch<T>) -> Result<(f64, bool)> {
    check_pair(x, y, "median_bandwidth")?;
    let total = x.len() + y.len();
    if total < 2 {
        return Err(MinoError::invalid("median bandwidth needs at least two samples"));
    }
    let keep = total.min(BANDWIDTH_SUBSAMPLE);
    let d = x.sample_len();
    let mut pooled = Vec::with_capacity(keep * d);
    for k in 0..keep {
        let idx = k * total / keep;
        let row = if idx < x.len() { x.sample(idx) } else { y.sample(idx - x.len()) };
        pooled.extend(row.iter().map(|v| v.to_f64().unwrap()));
    }
    let norms: Vec<f64> = pooled.chunks(d.max(1)).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut gram = vec![0.0; keep * keep];
    f64::gemm(keep, d, keep, 1.0, &pooled, (d as isize, 1), &pooled, (1, d as isize), 0.0, &mut gram, (keep as isize, 1));
    let mut dists = Vec::with_capacity(keep * (keep - 1) / 2);
    for i in 0..keep {
        for j in i + 1..keep {
            dists.push((norms[i] + norms[j] - 2.0 * gram[i * keep + j]).max(0.0).sqrt());
        }
    }
    let median = median_in_place(&mut dists);
    if median <= 0.0 || !median.is_finite() {
        log::warn!("pooled samples coincide; falling back to bandwidth 1.0");
        return Ok((1.0, true));
    }
    Ok((median / std::f64::consts::SQRT_2, false))
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}
