//! Central finite-difference check of backpropagated gradients.
//!
//! The check runs in `f64` so truncation error, not `f32` rounding, dominates
//! the comparison.

use crate::error::Result;
use crate::layers::Targets;
use crate::model::ModelGraph;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |autodiff - fd| / (|fd| + 1e-8)` over every trainable scalar.
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: Option<usize>,
    pub checked: usize,
}

/// Compares backprop against `(L(x + h e_i) - L(x - h e_i)) / 2h` for every
/// trainable scalar of `model` on the given batch.
pub fn finite_difference_check<T: Scalar>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    targets: &Targets,
    h: f64,
) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(crate::error::invalid_arg(format!("step h = {h} must be positive")));
    }
    let mut m: ModelGraph<f64> = model.cast();
    let x: Tensor<f64> = input.cast();
    m.forward(&x, Some(targets))?;
    m.backward(1.0)?;
    let analytic = m.flat_grads()?;
    let base = m.flat_params();
    let mut theta = base.clone();
    let mut worst = 0.0f64;
    let mut worst_index = None;
    for i in 0..base.len() {
        theta[i] = base[i] + h;
        m.set_flat_params(&theta)?;
        let up = m.loss(&x, targets)?;
        theta[i] = base[i] - h;
        m.set_flat_params(&theta)?;
        let down = m.loss(&x, targets)?;
        theta[i] = base[i];
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        if rel > worst || worst_index.is_none() {
            worst = worst.max(rel);
            worst_index = Some(i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        worst_index,
        checked: base.len(),
    })
}
