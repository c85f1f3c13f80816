//! Mixed l1/l2 group regularizer `r(x) = sum_g ||x_g||_2` over penalized groups.

use serde::Serialize;

use crate::error::{OtoError, Result};
use crate::tensor::Scalar;
use crate::zig::GroupPartition;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerConfig {
    pub lambda: f64,
}

impl RegularizerConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(OtoError::InvalidParameter(format!("lambda = {lambda} must be finite and >= 0")));
        }
        Ok(RegularizerConfig { lambda })
    }
}

fn group_sq_norm<T: Scalar>(x: &[T], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| x[i].as_f64() * x[i].as_f64()).sum()
}

/// Bitwise test: every entry is `0.0` (or `-0.0`).
pub fn is_zero_group<T: Scalar>(x: &[T], idx: &[usize]) -> bool {
    idx.iter().all(|&i| x[i] == T::zero())
}

pub fn group_norm_value<T: Scalar>(x: &[T], partition: &GroupPartition) -> f64 {
    partition
        .penalized()
        .map(|g| group_sq_norm(x, g.flat()).sqrt())
        .sum()
}

/// Adds `lambda * zeta(x)` into `out`, with `zeta_g = x_g / ||x_g||` on nonzero
/// groups and zero on zero groups.
pub fn add_subgradient<T: Scalar>(x: &[T], partition: &GroupPartition, lambda: f64, out: &mut [T]) {
    for g in partition.penalized() {
        let norm = group_sq_norm(x, g.flat()).sqrt();
        if norm == 0.0 {
            continue;
        }
        let s = lambda / norm;
        for &i in g.flat() {
            out[i] = T::from_f64(out[i].as_f64() + s * x[i].as_f64());
        }
    }
}

pub fn subgradient<T: Scalar>(x: &[T], partition: &GroupPartition, lambda: f64) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    add_subgradient(x, partition, lambda, &mut out);
    out
}

/// Group soft-thresholding of one block in place. Returns true when the block
/// was set to zero.
pub fn block_soft_threshold(v: &mut [f64], tau: f64) -> bool {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm <= tau {
        v.iter_mut().for_each(|a| *a = 0.0);
        true
    } else {
        let s = 1.0 - tau / norm;
        v.iter_mut().for_each(|a| *a *= s);
        false
    }
}

/// Proximal operator of `tau * r`. Unpenalized entries pass through.
pub fn group_prox<T: Scalar>(v: &[T], partition: &GroupPartition, tau: f64) -> Vec<T> {
    let mut out = v.to_vec();
    let mut buf = Vec::new();
    for g in partition.penalized() {
        buf.clear();
        buf.extend(g.flat().iter().map(|&i| v[i].as_f64()));
        block_soft_threshold(&mut buf, tau);
        for (&i, &b) in g.flat().iter().zip(&buf) {
            out[i] = T::from_f64(b);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparsityMetrics {
    /// Zero groups over penalized groups (0 when nothing is penalized).
    pub group_sparsity: f64,
    pub zero_groups: usize,
    pub nonzero_groups: usize,
}

pub fn sparsity_metrics<T: Scalar>(x: &[T], partition: &GroupPartition) -> SparsityMetrics {
    let zero = partition.penalized().filter(|g| is_zero_group(x, g.flat())).count();
    let total = partition.penalized_count();
    SparsityMetrics {
        group_sparsity: if total == 0 { 0.0 } else { zero as f64 / total as f64 },
        zero_groups: zero,
        nonzero_groups: total - zero,
    }
}
