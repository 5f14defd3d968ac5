//! Matérn Gaussian random fields on arbitrary point sets.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::FunctionBatch;
use crate::error::{MinoError, Result};
use crate::geometry::{Domain, PointSet};
use crate::linalg::{cholesky_with_jitter, CholFactor, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothness {
    /// nu = 1/2
    Half,
    /// nu = 3/2
    ThreeHalves,
    /// nu = 5/2
    FiveHalves,
}

impl Smoothness {
    pub fn nu(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    pub fn from_nu(nu: f64) -> Result<Self> {
        match nu {
            x if x == 0.5 => Ok(Smoothness::Half),
            x if x == 1.5 => Ok(Smoothness::ThreeHalves),
            x if x == 2.5 => Ok(Smoothness::FiveHalves),
            _ => Err(MinoError::invalid(format!("unsupported Matérn smoothness {nu}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    #[default]
    Euclidean,
    /// Straight-line distance between points of a sphere embedded in R^3.
    Chordal,
}

/// Matérn covariance parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSpec {
    pub length_scale: f64,
    pub smoothness: Smoothness,
    #[serde(default = "default_variance")]
    pub variance: f64,
    #[serde(default)]
    pub distance: DistanceMode,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_variance() -> f64 {
    1.0
}

fn default_jitter() -> f64 {
    1e-10
}

impl GpSpec {
    pub fn new(length_scale: f64, smoothness: Smoothness) -> Self {
        Self {
            length_scale,
            smoothness,
            variance: 1.0,
            distance: DistanceMode::Euclidean,
            jitter: default_jitter(),
        }
    }

    /// Base measure on box domains: length scale 0.01, nu = 1/2.
    pub fn default_base() -> Self {
        Self::new(0.01, Smoothness::Half)
    }

    /// Base measure on the sphere: chordal distance, length scale 0.05, nu = 1/2.
    pub fn default_sphere_base() -> Self {
        Self {
            distance: DistanceMode::Chordal,
            ..Self::new(0.05, Smoothness::Half)
        }
    }

    /// Target measure of the synthetic mesh dataset: length scale 0.4, nu = 3/2.
    pub fn mesh_gp() -> Self {
        Self::new(0.4, Smoothness::ThreeHalves)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return Err(MinoError::invalid("GP length scale must be positive"));
        }
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(MinoError::invalid("GP variance must be positive"));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(MinoError::invalid("GP jitter must be non-negative"));
        }
        Ok(())
    }
}

/// Matérn kernel value at distance `d`.
pub fn matern(d: f64, spec: &GpSpec) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(MinoError::invalid(format!("kernel distance must be non-negative, got {d}")));
    }
    Ok(matern_unchecked(d, spec))
}

#[inline]
fn matern_unchecked(d: f64, spec: &GpSpec) -> f64 {
    let r = d / spec.length_scale;
    let shape = match spec.smoothness {
        Smoothness::Half => (-r).exp(),
        Smoothness::ThreeHalves => {
            let s = 3f64.sqrt() * r;
            (1.0 + s) * (-s).exp()
        }
        Smoothness::FiveHalves => {
            let s = 5f64.sqrt() * r;
            (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
        }
    };
    spec.variance * shape
}

/// Dense covariance `C[i, j] = matern(|p_i - p_j|)`.
///
/// Chordal mode requires a sphere domain; the distance is Euclidean in the
/// R^3 embedding either way.
pub fn covariance_matrix<T: Scalar>(points: &PointSet, spec: &GpSpec) -> Result<Matrix<T>> {
    spec.validate()?;
    if points.is_empty() {
        return Err(MinoError::invalid("covariance of an empty point set"));
    }
    if spec.distance == DistanceMode::Chordal && !matches!(points.domain(), Domain::Sphere { .. }) {
        return Err(MinoError::invalid("chordal distance needs a sphere domain"));
    }
    let n = points.len();
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        let pi = points.point(i);
        c.set(i, i, T::from_f64_lossy(spec.variance));
        for j in 0..i {
            let d2: f64 = pi.iter().zip(points.point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = T::from_f64_lossy(matern_unchecked(d2.sqrt(), spec));
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
    Ok(c)
}

/// Cached factorization for drawing many samples from one GP on one point set.
#[derive(Clone, Debug)]
pub struct GpSampler<T> {
    points: Arc<PointSet>,
    spec: GpSpec,
    factor: CholFactor<T>,
}

impl<T: Scalar> GpSampler<T> {
    pub fn new(spec: GpSpec, points: Arc<PointSet>) -> Result<Self> {
        let cov = covariance_matrix::<T>(&points, &spec)?;
        let factor = cholesky_with_jitter(&cov, T::from_f64_lossy(spec.jitter))?;
        Ok(Self { points, spec, factor })
    }

    pub fn spec(&self) -> &GpSpec {
        &self.spec
    }

    pub fn points(&self) -> &Arc<PointSet> {
        &self.points
    }

    pub fn factor(&self) -> &CholFactor<T> {
        &self.factor
    }

    /// `n` samples with `f_dim` independent channels, each `L z`.
    ///
    /// Normals are drawn sample-major, channel next, point fastest.
    pub fn sample<R: rand::Rng + ?Sized>(&self, n: usize, f_dim: usize, rng: &mut R) -> FunctionBatch<T> {
        let npts = self.points.len();
        let rows = n * f_dim;
        let z: Vec<T> = (0..rows * npts).map(|_| T::sample_standard_normal(rng)).collect();
        let mut out = vec![T::zero(); rows * npts];
        // out[r, :] = L z_r  <=>  out = Z L^T
        T::gemm(
            rows,
            npts,
            npts,
            T::one(),
            &z,
            (npts as isize, 1),
            self.factor.lower.as_slice(),
            (1, npts as isize),
            T::zero(),
            &mut out,
            (npts as isize, 1),
        );
        FunctionBatch::new(self.points.clone(), f_dim, out).expect("sample layout is consistent")
    }
}

/// One-shot GP sampling with a seeded generator (single channel).
pub fn sample_gp<T: Scalar>(spec: &GpSpec, points: Arc<PointSet>, n_samples: usize, seed: u64) -> Result<FunctionBatch<T>> {
    if n_samples == 0 {
        return Err(MinoError::invalid("n_samples must be at least 1"));
    }
    let sampler = GpSampler::<T>::new(*spec, points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(n_samples, 1, &mut rng))
}
