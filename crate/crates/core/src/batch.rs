use std::sync::Arc;

use crate::error::{MinoError, Result};
use crate::geometry::PointSet;
use crate::scalar::Scalar;

/// `S` function samples sharing one point set, values laid out `[S, f_dim, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionBatch<T> {
    points: Arc<PointSet>,
    f_dim: usize,
    values: Vec<T>,
}

impl<T: Scalar> FunctionBatch<T> {
    pub fn new(points: Arc<PointSet>, f_dim: usize, values: Vec<T>) -> Result<Self> {
        if f_dim == 0 {
            return Err(MinoError::invalid("f_dim must be at least 1"));
        }
        let per = f_dim * points.len();
        if per == 0 && !values.is_empty() || per > 0 && values.len() % per != 0 {
            return Err(MinoError::shape(
                "FunctionBatch::new",
                format!("multiple of {per}"),
                values.len(),
            ));
        }
        Ok(Self { points, f_dim, values })
    }

    pub fn empty(points: Arc<PointSet>, f_dim: usize) -> Self {
        Self {
            points,
            f_dim,
            values: Vec::new(),
        }
    }

    pub fn points(&self) -> &Arc<PointSet> {
        &self.points
    }

    pub fn f_dim(&self) -> usize {
        self.f_dim
    }

    /// Number of observation points `N`.
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// Flattened length of one sample, `f_dim * N`.
    pub fn sample_len(&self) -> usize {
        self.f_dim * self.points.len()
    }

    pub fn len(&self) -> usize {
        match self.sample_len() {
            0 => 0,
            per => self.values.len() / per,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn sample(&self, s: usize) -> &[T] {
        let per = self.sample_len();
        &self.values[s * per..(s + 1) * per]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            values.extend_from_slice(self.sample(i));
        }
        Self {
            points: self.points.clone(),
            f_dim: self.f_dim,
            values,
        }
    }

    /// Samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let per = self.sample_len();
        Self {
            points: self.points.clone(),
            f_dim: self.f_dim,
            values: self.values[start * per..end * per].to_vec(),
        }
    }

    /// Same samples restricted to the observation points `indices`.
    pub fn restrict_points(&self, indices: &[usize]) -> Result<Self> {
        let points = Arc::new(self.points.subset(indices)?);
        let n = self.n_points();
        let mut values = Vec::with_capacity(self.len() * self.f_dim * indices.len());
        for s in 0..self.len() {
            let sample = self.sample(s);
            for ch in 0..self.f_dim {
                values.extend(indices.iter().map(|&i| sample[ch * n + i]));
            }
        }
        Ok(Self {
            points,
            f_dim: self.f_dim,
            values,
        })
    }

    pub fn cast<U: Scalar>(&self) -> FunctionBatch<U> {
        FunctionBatch {
            points: self.points.clone(),
            f_dim: self.f_dim,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Samples as `f64` rows, each flattened to `f_dim * N`.
    pub fn to_f64_rows(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn shares_discretization(&self, other: &Self) -> bool {
        self.f_dim == other.f_dim && (Arc::ptr_eq(&self.points, &other.points) || self.points == other.points)
    }
}
