use crate::batch::FunctionBatch;
use crate::error::{MinoError, Result};
use crate::scalar::Scalar;

/// Base sample `i` is paired with data sample `permutation[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPlan {
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost perfect matching on a square row-major cost matrix.
///
/// Shortest augmenting paths with row and column potentials, `O(n^3)`.
/// Returns the column assigned to each row and the total cost.
pub fn linear_assignment(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    if cost.len() != n * n {
        return Err(MinoError::shape("linear_assignment", n * n, cost.len()));
    }
    if let Some(c) = cost.iter().find(|c| !c.is_finite()) {
        return Err(MinoError::invalid(format!("non-finite assignment cost {c}")));
    }
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((assignment, total))
}

/// Squared Euclidean distances between flattened samples, `[B_base, B_data]`.
pub fn pairwise_sq_distances<T: Scalar>(base: &FunctionBatch<T>, data: &FunctionBatch<T>) -> Vec<f64> {
    let (nb, nd) = (base.len(), data.len());
    let mut cost = vec![0.0; nb * nd];
    for i in 0..nb {
        let a = base.sample(i);
        for j in 0..nd {
            let b = data.sample(j);
            cost[i * nd + j] = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x.to_f64().unwrap() - y.to_f64().unwrap();
                    d * d
                })
                .sum();
        }
    }
    cost
}

/// Exact minibatch optimal-transport pairing under squared `L2` cost.
pub fn ot_couple<T: Scalar>(base: &FunctionBatch<T>, data: &FunctionBatch<T>) -> Result<CouplingPlan> {
    if base.len() != data.len() {
        return Err(MinoError::shape("ot_couple", base.len(), data.len()));
    }
    if base.sample_len() != data.sample_len() || !base.shares_discretization(data) {
        return Err(MinoError::invalid("ot_couple needs batches on a shared discretization"));
    }
    let n = base.len();
    let cost = pairwise_sq_distances(base, data);
    let (permutation, total_cost) = linear_assignment(&cost, n)?;
    Ok(CouplingPlan { permutation, total_cost })
}
