//! Block coordinate descent for least-squares group lasso.
//!
//! Used as ground truth for the optimizers, so it keeps its own residual
//! bookkeeping and objective and only borrows the block soft-threshold.

use crate::data::GroupLassoData;
use crate::error::{OtoError, Result};
use crate::regularizer::block_soft_threshold;
use crate::zig::GroupPartition;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub x: Vec<f64>,
    pub sweeps: usize,
    /// `1/(2n) ||A x - y||^2 + lambda sum_g ||x_g||`.
    pub objective: f64,
}

impl OracleSolution {
    /// Ids of groups with any nonzero entry.
    pub fn support(&self, partition: &GroupPartition) -> Vec<usize> {
        partition
            .groups()
            .iter()
            .filter(|g| g.flat().iter().any(|&i| self.x[i] != 0.0))
            .map(|g| g.id)
            .collect()
    }
}

/// Largest eigenvalue of a small symmetric PSD matrix by power iteration.
fn top_eigenvalue(gram: &[f64], s: usize) -> f64 {
    let mut v = vec![1.0 / (s as f64).sqrt(); s];
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w: Vec<f64> = (0..s)
            .map(|i| (0..s).map(|j| gram[i * s + j] * v[j]).sum())
            .collect();
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        v = w.iter().map(|a| a / norm).collect();
        if (next - lambda).abs() <= 1e-14 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Cyclic block updates `x_g <- soft(x_g + A_g^T r / (n L_g), lambda / L_g)`
/// until the largest entry change in a sweep is below `tol`.
pub fn bcd_oracle(
    data: &GroupLassoData,
    partition: &GroupPartition,
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<OracleSolution> {
    if !(tol > 0.0) {
        return Err(OtoError::InvalidParameter(format!("tol = {tol} must be > 0")));
    }
    if !(lambda >= 0.0) {
        return Err(OtoError::InvalidParameter(format!("lambda = {lambda} must be >= 0")));
    }
    let n = data.samples;
    let d = data.dim();
    if partition.dim() != d {
        return Err(OtoError::InvalidArgument(format!(
            "partition covers {} entries, design has {d} columns",
            partition.dim()
        )));
    }
    let col = |i: usize, j: usize| data.design[i * d + j];

    let lipschitz: Vec<f64> = partition
        .groups()
        .iter()
        .map(|g| {
            let idx = g.flat();
            let s = idx.len();
            let mut gram = vec![0.0; s * s];
            for a in 0..s {
                for b in 0..s {
                    gram[a * s + b] = (0..n).map(|i| col(i, idx[a]) * col(i, idx[b])).sum::<f64>() / n as f64;
                }
            }
            top_eigenvalue(&gram, s)
        })
        .collect();

    let mut x = vec![0.0; d];
    let mut residual = data.targets.clone();
    let mut block = Vec::new();
    for sweep in 1..=max_sweeps {
        let mut change = 0.0f64;
        for (g, &l) in partition.groups().iter().zip(&lipschitz) {
            let idx = g.flat();
            if l == 0.0 {
                continue;
            }
            block.clear();
            block.extend(idx.iter().map(|&j| {
                let corr: f64 = (0..n).map(|i| col(i, j) * residual[i]).sum();
                x[j] + corr / (n as f64 * l)
            }));
            let tau = if g.penalized { lambda / l } else { 0.0 };
            block_soft_threshold(&mut block, tau);
            for (&j, &u) in idx.iter().zip(&block) {
                let delta = u - x[j];
                if delta != 0.0 {
                    for (i, r) in residual.iter_mut().enumerate() {
                        *r -= col(i, j) * delta;
                    }
                    x[j] = u;
                    change = change.max(delta.abs());
                }
            }
        }
        if change < tol {
            let fit = residual.iter().map(|r| r * r).sum::<f64>() / (2.0 * n as f64);
            let penalty: f64 = partition
                .penalized()
                .map(|g| g.flat().iter().map(|&j| x[j] * x[j]).sum::<f64>().sqrt())
                .sum();
            return Ok(OracleSolution {
                x,
                sweeps: sweep,
                objective: fit + lambda * penalty,
            });
        }
    }
    Err(OtoError::OracleFailure(format!(
        "no convergence to tol {tol} within {max_sweeps} sweeps"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_group_lasso;

    #[test]
    fn dominant_penalty_gives_zero() {
        let d = generate_group_lasso(6, 3, 2, 60, 0.1, 2).unwrap();
        let p = GroupPartition::contiguous_blocks(6, 3);
        let sol = bcd_oracle(&d, &p, 1e3, 1e-10, 100).unwrap();
        assert!(sol.x.iter().all(|&v| v == 0.0));
        assert!(sol.support(&p).is_empty());
    }

    #[test]
    fn zero_penalty_is_least_squares() {
        let d = generate_group_lasso(4, 2, 2, 50, 0.3, 5).unwrap();
        let p = GroupPartition::contiguous_blocks(4, 2);
        let sol = bcd_oracle(&d, &p, 0.0, 1e-12, 100_000).unwrap();
        // Normal equations: A^T (A x - y) = 0.
        for j in 0..8 {
            let g: f64 = (0..50)
                .map(|i| {
                    let r: f64 = d.row(i).iter().zip(&sol.x).map(|(a, x)| a * x).sum::<f64>() - d.targets[i];
                    d.row(i)[j] * r
                })
                .sum::<f64>()
                / 50.0;
            assert!(g.abs() < 1e-8, "gradient {g}");
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let d = generate_group_lasso(4, 2, 2, 50, 0.3, 5).unwrap();
        let p = GroupPartition::contiguous_blocks(4, 2);
        assert!(matches!(bcd_oracle(&d, &p, 0.0, 1e-15, 1), Err(OtoError::OracleFailure(_))));
        assert!(bcd_oracle(&d, &p, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn power_iteration_on_diagonal() {
        assert!((top_eigenvalue(&[2.0, 0.0, 0.0, 5.0], 2) - 5.0).abs() < 1e-9);
    }
}
