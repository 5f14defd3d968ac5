use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::batch::FunctionBatch;
use crate::error::{MinoError, Result};
use crate::scalar::Scalar;

/// Regular-grid statistics; all three are mean squared differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMetrics {
    pub spectra_mse: f64,
    pub autocov_mse: f64,
    pub density_mse: f64,
}

pub const DENSITY_BINS: usize = 100;

fn grid_of<T: Scalar>(x: &FunctionBatch<T>) -> Result<(usize, usize)> {
    x.points()
        .grid_shape()
        .ok_or_else(|| MinoError::invalid("grid metrics need samples on a declared regular grid"))
}

/// In-place 2D transform of an `nx * ny` x-major field.
fn fft2(buf: &mut [Complex<f64>], nx: usize, ny: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(ny), planner.plan_fft_inverse(nx))
    } else {
        (planner.plan_fft_forward(ny), planner.plan_fft_forward(nx))
    };
    row.process(buf);
    let mut column = vec![Complex::new(0.0, 0.0); nx];
    for j in 0..ny {
        for i in 0..nx {
            column[i] = buf[i * ny + j];
        }
        col.process(&mut column);
        for i in 0..nx {
            buf[i * ny + j] = column[i];
        }
    }
}

/// Mean of `|F|^2 / n` over samples and channels, laid out like the grid.
pub fn power_spectrum<T: Scalar>(x: &FunctionBatch<T>) -> Result<Vec<f64>> {
    let (nx, ny) = grid_of(x)?;
    let n = nx * ny;
    let mut planner = FftPlanner::new();
    let mut acc = vec![0.0; n];
    let fields = x.len() * x.f_dim();
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for field in x.values().chunks(n) {
        for (b, v) in buf.iter_mut().zip(field) {
            *b = Complex::new(v.to_f64().unwrap(), 0.0);
        }
        fft2(&mut buf, nx, ny, &mut planner, false);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr() / n as f64;
        }
    }
    if fields > 0 {
        acc.iter_mut().for_each(|a| *a /= fields as f64);
    }
    Ok(acc)
}

fn signed_frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Mean power per integer radial wavenumber `round(|k|)`.
pub fn radial_spectrum(power: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let kmax = ((nx / 2).pow(2) as f64 + (ny / 2).pow(2) as f64).sqrt().round() as usize;
    let mut sums = vec![0.0; kmax + 1];
    let mut counts = vec![0usize; kmax + 1];
    for i in 0..nx {
        for j in 0..ny {
            let k = signed_frequency(i, nx).hypot(signed_frequency(j, ny)).round() as usize;
            sums[k] += power[i * ny + j];
            counts[k] += 1;
        }
    }
    sums.iter().zip(&counts).filter(|(_, &c)| c > 0).map(|(s, &c)| s / c as f64).collect()
}

/// Circular, non-centered autocovariance `(1/n) sum_x f(x) f(x + lag)` from a mean power spectrum.
pub fn autocovariance(power: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let n = nx * ny;
    let mut buf: Vec<Complex<f64>> = power.iter().map(|&p| Complex::new(p, 0.0)).collect();
    fft2(&mut buf, nx, ny, &mut FftPlanner::new(), true);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn histogram<T: Scalar>(x: &FunctionBatch<T>, lo: f64, hi: f64) -> Vec<f64> {
    let mut h = vec![0.0; DENSITY_BINS];
    let width = (hi - lo) / DENSITY_BINS as f64;
    for v in x.values() {
        let v = v.to_f64().unwrap();
        let b = if width > 0.0 { (((v - lo) / width) as usize).min(DENSITY_BINS - 1) } else { 0 };
        h[b] += 1.0;
    }
    let total = x.values().len().max(1) as f64;
    h.iter_mut().for_each(|c| *c /= total);
    h
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Spectrum, autocovariance and pointwise-density discrepancies on a shared regular grid.
pub fn grid_metrics<T: Scalar>(x: &FunctionBatch<T>, y: &FunctionBatch<T>) -> Result<GridMetrics> {
    if !x.shares_discretization(y) {
        return Err(MinoError::invalid("grid metrics need both sets on the same grid"));
    }
    let (nx, ny) = grid_of(x)?;
    let (px, py) = (power_spectrum(x)?, power_spectrum(y)?);
    let spectra_mse = mse(&radial_spectrum(&px, nx, ny), &radial_spectrum(&py, nx, ny));
    let autocov_mse = mse(&autocovariance(&px, nx, ny), &autocovariance(&py, nx, ny));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in x.values().iter().chain(y.values()) {
        let v = v.to_f64().unwrap();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let density_mse = if lo.is_finite() { mse(&histogram(x, lo, hi), &histogram(y, lo, hi)) } else { 0.0 };
    Ok(GridMetrics {
        spectra_mse,
        autocov_mse,
        density_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn autocovariance_of_a_cosine() {
        // f(x) = cos(2 pi x / 8): lag-0 second moment 1/2, lag-4 value -1/2.
        let (nx, ny) = (8, 1);
        let field: Vec<f64> = (0..8).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 8.0).cos()).collect();
        let mut buf: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut buf, nx, ny, &mut FftPlanner::new(), false);
        let power: Vec<f64> = buf.iter().map(|c| c.norm_sqr() / 8.0).collect();
        let ac = autocovariance(&power, nx, ny);
        assert!((ac[0] - 0.5).abs() < 1e-12);
        assert!((ac[4] + 0.5).abs() < 1e-12);
        let radial = radial_spectrum(&power, nx, ny);
        assert_eq!(radial.len(), 5);
        assert!((radial[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn parseval() {
        let (nx, ny) = (4, 6);
        let field: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let mut buf: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut buf, nx, ny, &mut FftPlanner::new(), false);
        let spectral: f64 = buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / 24.0;
        let direct: f64 = field.iter().map(|v| v * v).sum();
        assert!((spectral - direct).abs() < 1e-10);
    }
}
