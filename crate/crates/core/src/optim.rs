//! Half-space stochastic projected gradient (HSPG) and the SGD / Prox-SG
//! comparators, all acting on a flat parameter vector.

use std::fmt;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::seeding::{self, Stream};
use crate::data::{Dataset, GroupLassoData};
use crate::error::{OtoError, Result};
use crate::model::ModelGraph;
use crate::regularizer::{add_subgradient, group_norm_value, group_prox, is_zero_group, sparsity_metrics};
use crate::tensor::{dot, Scalar};
use crate::zig::GroupPartition;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Hspg,
    Sgd,
    ProxSg,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hspg" => Ok(OptimizerKind::Hspg),
            "sgd" => Ok(OptimizerKind::Sgd),
            "prox-sg" | "proxsg" => Ok(OptimizerKind::ProxSg),
            other => Err(OtoError::Config(format!(
                "unknown optimizer `{other}` (hspg, sgd, prox-sg)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Hspg => "hspg",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::ProxSg => "prox-sg",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `alpha_k = alpha0 * decay^(k / period)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub alpha0: f64,
    pub decay: f64,
    pub period: usize,
}

impl Schedule {
    pub fn constant(alpha0: f64) -> Self {
        Schedule {
            alpha0,
            decay: 1.0,
            period: usize::MAX,
        }
    }

    pub fn alpha_at(&self, k: usize) -> f64 {
        if self.decay == 1.0 {
            return self.alpha0;
        }
        self.alpha0 * self.decay.powi((k / self.period.max(1)) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub x: Vec<T>,
    pub alpha: f64,
    pub epsilon: f64,
    /// `N_P`: iterations spent in the subgradient stage.
    pub switch_iteration: usize,
    pub k: usize,
    pub lambda: f64,
    pub schedule: Schedule,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(x: Vec<T>, schedule: Schedule, lambda: f64, epsilon: f64, switch_iteration: usize) -> Result<Self> {
        if !(schedule.alpha0 > 0.0) || !schedule.alpha0.is_finite() {
            return Err(OtoError::InvalidParameter(format!("alpha0 = {} must be > 0", schedule.alpha0)));
        }
        if !(schedule.decay > 0.0 && schedule.decay <= 1.0) {
            return Err(OtoError::InvalidParameter(format!("decay = {} must lie in (0, 1]", schedule.decay)));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(OtoError::InvalidParameter(format!("epsilon = {epsilon} must lie in [0, 1)")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(OtoError::InvalidParameter(format!("lambda = {lambda} must be >= 0")));
        }
        if switch_iteration == 0 {
            return Err(OtoError::InvalidParameter("switch iteration must be >= 1".into()));
        }
        Ok(OptimizerState {
            x,
            alpha: schedule.alpha0,
            epsilon,
            switch_iteration,
            k: 0,
            lambda,
            schedule,
        })
    }

    pub fn in_half_space_stage(&self) -> bool {
        self.k >= self.switch_iteration
    }

    fn advance(&mut self) {
        self.k += 1;
        self.alpha = self.schedule.alpha_at(self.k);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSets {
    pub zero: Vec<usize>,
    pub nonzero: Vec<usize>,
}

/// Splits the penalized groups by whether every entry is exactly zero.
pub fn compute_index_sets<T: Scalar>(x: &[T], partition: &GroupPartition) -> IndexSets {
    let (zero, nonzero) = partition
        .penalized()
        .map(|g| g.id)
        .partition(|&id| is_zero_group(x, partition.groups()[id].flat()));
    IndexSets { zero, nonzero }
}

/// `nu = grad + lambda * zeta(x)`.
pub fn stochastic_subgradient<T: Scalar>(x: &[T], grad: &[T], partition: &GroupPartition, lambda: f64) -> Vec<T> {
    let mut nu = grad.to_vec();
    add_subgradient(x, partition, lambda, &mut nu);
    nu
}

/// Zeros every nonzero penalized group of `z` whose inner product with the
/// matching group of `x_k` falls below `epsilon * ||[x_k]_g||^2`. Returns the
/// ids of the groups it zeroed.
pub fn half_space_project<T: Scalar>(z: &mut [T], x_k: &[T], partition: &GroupPartition, epsilon: f64) -> Vec<usize> {
    let mut zeroed = Vec::new();
    for g in partition.penalized() {
        let idx = g.flat();
        if is_zero_group(x_k, idx) {
            continue;
        }
        let (inner, sq) = group_inner(z, x_k, idx);
        if inner < epsilon * sq {
            for &i in idx {
                z[i] = T::zero();
            }
            zeroed.push(g.id);
        }
    }
    zeroed
}

fn group_inner<T: Scalar>(a: &[T], b: &[T], idx: &[usize]) -> (f64, f64) {
    let mut inner = 0.0;
    let mut sq = 0.0;
    for &i in idx {
        inner += a[i].as_f64() * b[i].as_f64();
        sq += b[i].as_f64() * b[i].as_f64();
    }
    (inner, sq)
}

/// Invariant checks recorded by a half-space step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepAudit {
    pub half_space: bool,
    pub projected: usize,
    /// Groups zero at `x_k` that became nonzero.
    pub monotone_violations: usize,
    /// Kept groups with `[x_{k+1}]_g . [x_k]_g < epsilon ||[x_k]_g||^2`.
    pub half_space_violations: usize,
    /// Zeroed groups failing `[x_k]_g . nu_g > (1 - epsilon) ||[x_k]_g||^2 / alpha`.
    pub descent_violations: usize,
}

impl StepAudit {
    pub fn violations(&self) -> usize {
        self.monotone_violations + self.half_space_violations + self.descent_violations
    }
}

fn check_finite<T: Scalar>(v: &[T], k: usize, what: &str) -> Result<()> {
    match v.iter().position(|a| !a.is_finite()) {
        Some(i) => Err(OtoError::NumericalFailure {
            iteration: k,
            detail: format!("non-finite {what} entry at index {i}"),
        }),
        None => Ok(()),
    }
}

/// One HSPG iteration given the stochastic subgradient `nu` at `state.x`.
pub fn hspg_step<T: Scalar>(state: &mut OptimizerState<T>, nu: &[T], partition: &GroupPartition) -> Result<StepAudit> {
    check_finite(nu, state.k, "subgradient")?;
    let alpha = state.alpha;
    let mut z: Vec<T> = state
        .x
        .iter()
        .zip(nu)
        .map(|(&x, &v)| T::from_f64(x.as_f64() - alpha * v.as_f64()))
        .collect();
    let mut audit = StepAudit::default();
    if !state.in_half_space_stage() {
        state.x = z;
        state.advance();
        return Ok(audit);
    }
    audit.half_space = true;
    let eps = state.epsilon;
    let sets = compute_index_sets(&state.x, partition);
    for &gid in &sets.zero {
        for &i in partition.groups()[gid].flat() {
            z[i] = T::zero();
        }
    }
    let zeroed = half_space_project(&mut z, &state.x, partition, eps);
    audit.projected = zeroed.len();

    // Rounding slack: z is stored in T, so z.x differs from x.x - alpha x.nu
    // by at most a few ulps of ||x|| ||z||.
    let ulp = T::epsilon().as_f64();
    for &gid in &sets.nonzero {
        let idx = partition.groups()[gid].flat();
        let (_, sq) = group_inner(&z, &state.x, idx);
        if zeroed.binary_search(&gid).is_ok() {
            let x_nu: f64 = idx.iter().map(|&i| state.x[i].as_f64() * nu[i].as_f64()).sum();
            let z_sq: f64 = idx
                .iter()
                .map(|&i| (state.x[i].as_f64() - alpha * nu[i].as_f64()).powi(2))
                .sum();
            let slack = 4.0 * ulp * (sq + (sq * z_sq).sqrt());
            if !(x_nu > ((1.0 - eps) * sq - slack) / alpha) {
                audit.descent_violations += 1;
            }
        } else {
            let (inner, _) = group_inner(&z, &state.x, idx);
            if inner < eps * sq {
                audit.half_space_violations += 1;
            }
        }
    }
    audit.monotone_violations = sets
        .zero
        .iter()
        .filter(|&&gid| !is_zero_group(&z, partition.groups()[gid].flat()))
        .count();
    state.x = z;
    state.advance();
    Ok(audit)
}

/// `x <- prox_{alpha lambda r}(x - alpha grad)`.
pub fn prox_sg_step<T: Scalar>(state: &mut OptimizerState<T>, grad: &[T], partition: &GroupPartition) -> Result<()> {
    check_finite(grad, state.k, "gradient")?;
    let alpha = state.alpha;
    let v: Vec<T> = state
        .x
        .iter()
        .zip(grad)
        .map(|(&x, &g)| T::from_f64(x.as_f64() - alpha * g.as_f64()))
        .collect();
    state.x = group_prox(&v, partition, alpha * state.lambda);
    state.advance();
    Ok(())
}

pub fn sgd_step<T: Scalar>(state: &mut OptimizerState<T>, grad: &[T]) -> Result<()> {
    check_finite(grad, state.k, "gradient")?;
    let alpha = state.alpha;
    for (x, &g) in state.x.iter_mut().zip(grad) {
        *x = T::from_f64(x.as_f64() - alpha * g.as_f64());
    }
    state.advance();
    Ok(())
}

/// A smooth loss `f(x) = mean_i f_i(x)` that can be sampled by index.
pub trait StochasticObjective<T: Scalar> {
    fn samples(&self) -> usize;
    fn dim(&self) -> usize;
    /// Mean loss over `batch`; writes the mean gradient into `grad`.
    fn batch_gradient(&mut self, x: &[T], batch: &[usize], grad: &mut [T]) -> Result<f64>;
    fn full_loss(&mut self, x: &[T]) -> Result<f64>;
}

/// `f(x) = 1/(2n) ||A x - y||^2`.
pub struct LeastSquares<'a> {
    pub data: &'a GroupLassoData,
}

impl StochasticObjective<f64> for LeastSquares<'_> {
    fn samples(&self) -> usize {
        self.data.samples
    }

    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn batch_gradient(&mut self, x: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let row = self.data.row(i);
            let r = dot(row, x) - self.data.targets[i];
            loss += 0.5 * r * r;
            for (g, a) in grad.iter_mut().zip(row) {
                *g += scale * r * a;
            }
        }
        Ok(loss * scale)
    }

    fn full_loss(&mut self, x: &[f64]) -> Result<f64> {
        let n = self.data.samples;
        let s: f64 = (0..n)
            .map(|i| {
                let r = dot(self.data.row(i), x) - self.data.targets[i];
                r * r
            })
            .sum();
        Ok(s / (2.0 * n as f64))
    }
}

/// The model's mean training loss over a dataset.
pub struct ModelObjective<'a> {
    pub model: &'a mut ModelGraph<f32>,
    pub data: &'a Dataset,
}

const EVAL_CHUNK: usize = 512;

impl StochasticObjective<f32> for ModelObjective<'_> {
    fn samples(&self) -> usize {
        self.data.len()
    }

    fn dim(&self) -> usize {
        self.model.trainable_len()
    }

    fn batch_gradient(&mut self, x: &[f32], batch: &[usize], grad: &mut [f32]) -> Result<f64> {
        self.model.set_flat_params(x)?;
        let (input, targets) = self.data.batch(batch);
        let (_, loss) = self.model.forward(&input, Some(&targets))?;
        self.model.backward(1.0)?;
        grad.copy_from_slice(&self.model.flat_grads()?);
        self.model.clear_grads();
        Ok(loss.expect("targets given"))
    }

    fn full_loss(&mut self, x: &[f32]) -> Result<f64> {
        self.model.set_flat_params(x)?;
        let n = self.data.len();
        let mut total = 0.0;
        let mut start = 0;
        while start < n {
            let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let (input, targets) = self.data.batch(&rows);
            total += self.model.loss(&input, &targets)? * rows.len() as f64;
            start += EVAL_CHUNK;
        }
        Ok(total / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha0: f64,
    /// Multiplicative step-size decay applied once per epoch.
    pub decay: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Subgradient-stage length in epochs (HSPG only).
    pub switch_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Hspg,
            batch_size: 32,
            epochs: 10,
            alpha0: 0.1,
            decay: 1.0,
            lambda: 1e-3,
            epsilon: 0.0,
            switch_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OtoError::InvalidParameter(m));
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.alpha0 > 0.0) || !self.alpha0.is_finite() {
            return bad(format!("alpha0 = {} must be > 0", self.alpha0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay = {} must lie in (0, 1]", self.decay));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda = {} must be >= 0", self.lambda));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon = {} must lie in [0, 1)", self.epsilon));
        }
        if self.optimizer == OptimizerKind::Hspg && self.switch_epochs == 0 {
            return bad("switch epochs must be >= 1".into());
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// One line of the metric trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub objective: f64,
    pub group_sparsity: f64,
    pub zero_groups: usize,
    pub alpha: f64,
    pub stage: &'static str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AuditTotals {
    pub half_space_steps: usize,
    pub projections: usize,
    pub monotone_violations: usize,
    pub half_space_violations: usize,
    pub descent_violations: usize,
}

impl AuditTotals {
    pub fn add(&mut self, a: &StepAudit) {
        self.half_space_steps += a.half_space as usize;
        self.projections += a.projected;
        self.monotone_violations += a.monotone_violations;
        self.half_space_violations += a.half_space_violations;
        self.descent_violations += a.descent_violations;
    }

    pub fn violations(&self) -> usize {
        self.monotone_violations + self.half_space_violations + self.descent_violations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T: Scalar> {
    pub x: Vec<T>,
    pub trace: Vec<EpochRecord>,
    pub audit: AuditTotals,
}

/// Serializes a trace as JSON lines.
pub fn trace_jsonl(trace: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in trace {
        s.push_str(&serde_json::to_string(r).expect("plain record"));
        s.push('\n');
    }
    s
}

fn stage_name<T: Scalar>(kind: OptimizerKind, state: &OptimizerState<T>) -> &'static str {
    match kind {
        OptimizerKind::Hspg if state.in_half_space_stage() => "half-space",
        OptimizerKind::Hspg => "subgradient",
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::ProxSg => "prox-sg",
    }
}

/// Seeded mini-batch loop. Samples are reshuffled every epoch.
pub fn train<T: Scalar, O: StochasticObjective<T>>(
    objective: &mut O,
    partition: &GroupPartition,
    x0: Vec<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let n = objective.samples();
    if x0.len() != objective.dim() || partition.dim() != x0.len() {
        return Err(OtoError::InvalidArgument(format!(
            "parameter length {} vs objective {} vs partition {}",
            x0.len(),
            objective.dim(),
            partition.dim()
        )));
    }
    if n == 0 {
        return Err(OtoError::InvalidArgument("empty dataset".into()));
    }
    let per_epoch = config.iterations_per_epoch(n);
    let schedule = Schedule {
        alpha0: config.alpha0,
        decay: config.decay,
        period: per_epoch,
    };
    let switch = config.switch_epochs.max(1).saturating_mul(per_epoch);
    let mut state = OptimizerState::new(x0, schedule, config.lambda, config.epsilon, switch)?;
    let mut rng = seeding::rng(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![T::zero(); state.x.len()];
    let mut trace = Vec::with_capacity(config.epochs);
    let mut audit = AuditTotals::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let alpha = state.alpha;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let tag = |e: OtoError| match e {
                OtoError::NumericalFailure { iteration, detail } => OtoError::NumericalFailure {
                    iteration,
                    detail: format!("epoch {epoch} step {step}: {detail}"),
                },
                other => other,
            };
            objective.batch_gradient(&state.x, batch, &mut grad)?;
            match config.optimizer {
                OptimizerKind::Hspg => {
                    let nu = stochastic_subgradient(&state.x, &grad, partition, config.lambda);
                    audit.add(&hspg_step(&mut state, &nu, partition).map_err(tag)?);
                }
                OptimizerKind::Sgd => sgd_step(&mut state, &grad).map_err(tag)?,
                OptimizerKind::ProxSg => prox_sg_step(&mut state, &grad, partition).map_err(tag)?,
            }
        }
        let loss = objective.full_loss(&state.x)?;
        if !loss.is_finite() {
            return Err(OtoError::NumericalFailure {
                iteration: state.k,
                detail: format!("epoch {epoch}: loss is {loss}"),
            });
        }
        let m = sparsity_metrics(&state.x, partition);
        trace.push(EpochRecord {
            epoch,
            loss,
            objective: loss + config.lambda * group_norm_value(&state.x, partition),
            group_sparsity: m.group_sparsity,
            zero_groups: m.zero_groups,
            alpha,
            stage: stage_name(config.optimizer, &state),
        });
    }
    Ok(TrainOutcome {
        x: state.x,
        trace,
        audit,
    })
}

/// Trains `model` in place on `data`.
pub fn train_model(
    model: &mut ModelGraph<f32>,
    partition: &GroupPartition,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<f32>> {
    if data.sample_shape() != model.input_shape() {
        return Err(OtoError::InvalidArgument(format!(
            "dataset samples have shape {:?}, model expects {:?}",
            data.sample_shape(),
            model.input_shape()
        )));
    }
    let x0 = model.flat_params();
    let outcome = {
        let mut obj = ModelObjective { model, data };
        train(&mut obj, partition, x0, config)?
    };
    model.set_flat_params(&outcome.x)?;
    Ok(outcome)
}

/// `psi(x) = f(x) + lambda r(x)` for least squares.
pub fn least_squares_objective(data: &GroupLassoData, partition: &GroupPartition, lambda: f64, x: &[f64]) -> f64 {
    let mut ls = LeastSquares { data };
    ls.full_loss(x).expect("least squares") + lambda * group_norm_value(x, partition)
}
