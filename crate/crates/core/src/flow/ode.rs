use serde::{Deserialize, Serialize};

use crate::error::{MinoError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverConfig {
    Rk4Fixed { steps: usize },
    DormandPrince { rtol: f64, atol: f64 },
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::DormandPrince { rtol: 1e-5, atol: 1e-5 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SolverConfig::Rk4Fixed { steps } if steps == 0 => Err(MinoError::invalid("solver needs at least one step")),
            SolverConfig::DormandPrince { rtol, atol } if !(rtol > 0.0 && atol > 0.0) => {
                Err(MinoError::invalid(format!("tolerances must be positive, got rtol={rtol} atol={atol}")))
            }
            _ => Ok(()),
        }
    }
}

/// Right-hand side `dy/dt = f(t, y)`.
pub trait VectorField<T> {
    fn eval(&self, t: f64, y: &[T], dy: &mut [T]) -> Result<()>;
}

impl<T, F> VectorField<T> for F
where
    F: Fn(f64, &[T], &mut [T]) -> Result<()>,
{
    fn eval(&self, t: f64, y: &[T], dy: &mut [T]) -> Result<()> {
        self(t, y, dy)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Integrates `y0` from `t0` to `t1`.
pub fn integrate<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    y0: &[T],
    t0: f64,
    t1: f64,
    solver: &SolverConfig,
) -> Result<(Vec<T>, SolveStats)> {
    solver.validate()?;
    match *solver {
        SolverConfig::Rk4Fixed { steps } => rk4(field, y0, t0, t1, steps),
        SolverConfig::DormandPrince { rtol, atol } => dopri5(field, y0, t0, t1, rtol, atol),
    }
}

fn axpy<T: Scalar>(out: &mut [T], y: &[T], terms: &[(f64, &[T])], h: f64) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i].to_f64().unwrap();
        }
        *o = y[i] + T::from_f64_lossy(h * acc);
    }
}

fn rk4<T: Scalar, F: VectorField<T> + ?Sized>(field: &F, y0: &[T], t0: f64, t1: f64, steps: usize) -> Result<(Vec<T>, SolveStats)> {
    let n = y0.len();
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        field.eval(t, &y, &mut k1)?;
        axpy(&mut tmp, &y, &[(0.5, &k1)], h);
        field.eval(t + 0.5 * h, &tmp, &mut k2)?;
        axpy(&mut tmp, &y, &[(0.5, &k2)], h);
        field.eval(t + 0.5 * h, &tmp, &mut k3)?;
        axpy(&mut tmp, &y, &[(1.0, &k3)], h);
        field.eval(t + h, &tmp, &mut k4)?;
        axpy(&mut tmp, &y, &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)], h);
        std::mem::swap(&mut y, &mut tmp);
    }
    Ok((
        y,
        SolveStats {
            accepted: steps,
            rejected: 0,
            evaluations: 4 * steps,
        },
    ))
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const MIN_STEP: f64 = 1e-12;

fn rms_norm<T: Scalar>(e: &[f64], y: &[T], y_new: &[T], rtol: f64, atol: f64) -> f64 {
    if e.is_empty() {
        return 0.0;
    }
    let s: f64 = e
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(&ei, (&a, &b))| {
            let scale = atol + rtol * a.to_f64().unwrap().abs().max(b.to_f64().unwrap().abs());
            (ei / scale).powi(2)
        })
        .sum();
    (s / e.len() as f64).sqrt()
}

/// Dormand-Prince 5(4) with first-same-as-last reuse and an RMS error norm.
fn dopri5<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    y0: &[T],
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
) -> Result<(Vec<T>, SolveStats)> {
    let n = y0.len();
    let mut stats = SolveStats::default();
    let mut y = y0.to_vec();
    if n == 0 || t1 == t0 {
        return Ok((y, stats));
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut k: Vec<Vec<T>> = (0..7).map(|_| vec![T::zero(); n]).collect();
    field.eval(t0, &y, &mut k[0])?;
    stats.evaluations += 1;

    // Initial step from the norms of y and f.
    let d0 = rms_norm(&y.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>(), &y, &y, rtol, atol);
    let d1 = rms_norm(&k[0].iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>(), &y, &y, rtol, atol);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(span);

    let mut t = t0;
    let mut tmp = vec![T::zero(); n];
    let mut err = vec![0.0; n];
    let mut rejected_last = false;
    while dir * (t1 - t) > 0.0 {
        if h < MIN_STEP {
            return Err(MinoError::StepUnderflow { t, h });
        }
        let last = h >= dir * (t1 - t);
        if last {
            h = dir * (t1 - t);
        }
        for s in 1..7 {
            let (done, rest) = k.split_at_mut(s);
            let terms: Vec<(f64, &[T])> = (0..s).filter(|&j| A[s][j] != 0.0).map(|j| (A[s][j], done[j].as_slice())).collect();
            axpy(&mut tmp, &y, &terms, dir * h);
            field.eval(t + C[s] * dir * h, &tmp, &mut rest[0])?;
            stats.evaluations += 1;
        }
        // tmp now holds the fifth-order solution evaluated at stage 7.
        for (i, e) in err.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (s, ks) in k.iter().enumerate() {
                if E[s] != 0.0 {
                    acc += E[s] * ks[i].to_f64().unwrap();
                }
            }
            *e = h * acc;
        }
        let norm = rms_norm(&err, &y, &tmp, rtol, atol);
        if !norm.is_finite() {
            return Err(MinoError::invalid(format!("non-finite error estimate at t={t}")));
        }
        if norm <= 1.0 {
            t = if last { t1 } else { t + dir * h };
            std::mem::swap(&mut y, &mut tmp);
            k.swap(0, 6);
            stats.accepted += 1;
            let mut factor = if norm == 0.0 { MAX_FACTOR } else { SAFETY * norm.powf(-0.2) };
            factor = factor.clamp(MIN_FACTOR, MAX_FACTOR);
            if rejected_last {
                factor = factor.min(1.0);
            }
            h *= factor;
            rejected_last = false;
        } else {
            stats.rejected += 1;
            h *= (SAFETY * norm.powf(-0.2)).max(MIN_FACTOR);
            rejected_last = true;
        }
    }
    Ok((y, stats))
}
