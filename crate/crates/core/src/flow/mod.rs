//! Operator flow matching: minibatch optimal-transport pairing, linear
//! probability paths, training and ODE-based generation.

mod ode;
mod ot;
mod train;

use std::sync::Arc;

pub use ode::{integrate, SolveStats, SolverConfig, VectorField};
pub use ot::{linear_assignment, ot_couple, pairwise_sq_distances, CouplingPlan};
pub use train::{train, AdamW, LossHistory, TrainConfig, TrainState, Trainer};

use crate::batch::FunctionBatch;
use crate::error::{MinoError, Result};
use crate::gaussian_field::{sample_gp, GpSpec};
use crate::geometry::PointSet;
use crate::model::VelocityModel;
use crate::scalar::Scalar;

/// Point on the straight path from `f0` to `f1` and its constant velocity.
pub fn path_sample<T: Scalar>(f0: &[T], f1: &[T], t: f64) -> Result<(Vec<T>, Vec<T>)> {
    if f0.len() != f1.len() {
        return Err(MinoError::shape("path_sample", f0.len(), f1.len()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(MinoError::invalid(format!("time {t} outside [0, 1]")));
    }
    let t = T::from_f64_lossy(t);
    let ft = f0.iter().zip(f1).map(|(&a, &b)| (T::one() - t) * a + t * b).collect();
    let v = f0.iter().zip(f1).map(|(&a, &b)| b - a).collect();
    Ok((ft, v))
}

/// The model as a vector field over a flattened `[S, f_dim, N]` state.
pub struct ModelField<'a, T: Scalar> {
    pub model: &'a VelocityModel<T>,
    pub points: Arc<PointSet>,
    pub samples: usize,
}

impl<T: Scalar> VectorField<T> for ModelField<'_, T> {
    fn eval(&self, t: f64, y: &[T], dy: &mut [T]) -> Result<()> {
        let batch = FunctionBatch::new(self.points.clone(), self.model.config().f_dim, y.to_vec())?;
        let times = vec![t.clamp(0.0, 1.0); self.samples];
        let v = self.model.velocity_batch(&batch, &times)?;
        dy.copy_from_slice(v.values());
        Ok(())
    }
}

/// Transports every sample of `f0` from `t = 0` to `t = 1`, integrating the batch as one state.
pub fn integrate_model<T: Scalar>(model: &VelocityModel<T>, f0: &FunctionBatch<T>, solver: &SolverConfig) -> Result<FunctionBatch<T>> {
    if f0.is_empty() {
        return Ok(f0.clone());
    }
    let field = ModelField {
        model,
        points: f0.points().clone(),
        samples: f0.len(),
    };
    let (y, stats) = integrate(&field, f0.values(), 0.0, 1.0, solver)?;
    log::debug!("integrated {} samples: {stats:?}", f0.len());
    FunctionBatch::new(f0.points().clone(), f0.f_dim(), y)
}

/// Samples per integration call in [`generate`].
pub const GENERATE_CHUNK: usize = 64;

/// Draws `n` base functions on `points` and pushes them through the learned flow.
pub fn generate<T: Scalar>(
    model: &VelocityModel<T>,
    base_gp: &GpSpec,
    points: Arc<PointSet>,
    n: usize,
    solver: &SolverConfig,
    seed: u64,
) -> Result<FunctionBatch<T>> {
    let f_dim = model.config().f_dim;
    if n == 0 {
        return Ok(FunctionBatch::empty(points, f_dim));
    }
    let base = sample_gp::<f64>(base_gp, points.clone(), n * f_dim, seed)?;
    let base = FunctionBatch::new(points.clone(), f_dim, base.into_values())?.cast::<T>();
    let mut values = Vec::with_capacity(base.values().len());
    for start in (0..n).step_by(GENERATE_CHUNK) {
        let chunk = base.slice(start, (start + GENERATE_CHUNK).min(n));
        values.extend_from_slice(integrate_model(model, &chunk, solver)?.values());
    }
    FunctionBatch::new(points, f_dim, values)
}
