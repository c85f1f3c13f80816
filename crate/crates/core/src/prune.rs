//! One-shot construction of a slim model from zero groups, plus FLOPs and
//! parameter counting.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use crate::seeding::{self, Stream};
use crate::arch::describe;
use crate::error::{OtoError, Result};
use crate::layers::{ConvBn, Linear};
use crate::model::{LayerSpec, ModelGraph};
use crate::regularizer::is_zero_group;
use crate::tensor::Tensor;
use crate::zig::{output_layer, GroupPartition, StructureTag};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PruneOptions {
    /// When every group of a layer is zero, keep the one with the largest
    /// norm instead of failing.
    pub keep_one: bool,
}

/// Per-sample cost of a model. FLOPs count multiply-accumulates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ModelCost {
    pub params: usize,
    /// Stored normalization statistics (not trainable).
    pub buffers: usize,
    pub flops: usize,
}

fn conv_flops(c: &ConvBn<f32>, oh: usize, ow: usize) -> usize {
    let m = c.out_channels();
    m * c.geometry.patch_len() * oh * ow + m * oh * ow
}

/// Cost of each layer, in order.
pub fn layer_costs(model: &ModelGraph<f32>) -> Vec<ModelCost> {
    let shapes = model.layer_shapes().expect("validated model");
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let out = &shapes[i];
            let (mut params, mut buffers) = (0, 0);
            for (info_name, t) in layer.slot_meta().iter().zip(layer.tensors()) {
                if info_name.1 {
                    params += t.numel();
                } else {
                    buffers += t.numel();
                }
            }
            let flops = match layer {
                LayerSpec::Linear(l) => l.out_features() * l.in_features(),
                LayerSpec::ConvBn(c) => conv_flops(c, out[1], out[2]),
                LayerSpec::Residual(r) => conv_flops(&r.left, out[1], out[2]) + conv_flops(&r.right, out[1], out[2]),
                LayerSpec::Attention(a) => a.heads.iter().map(|h| h.out_features() * h.in_features()).sum(),
                LayerSpec::Activation(_) | LayerSpec::Flatten => 0,
            };
            ModelCost { params, buffers, flops }
        })
        .collect()
}

pub fn count_flops_params(model: &ModelGraph<f32>) -> ModelCost {
    layer_costs(model).iter().fold(ModelCost::default(), |a, c| ModelCost {
        params: a.params + c.params,
        buffers: a.buffers + c.buffers,
        flops: a.flops + c.flops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMap {
    pub layer: usize,
    pub kind: &'static str,
    pub outputs_before: usize,
    pub outputs_after: usize,
    pub inputs_before: usize,
    pub inputs_after: usize,
    /// Original indices of the surviving outputs (channels, rows or
    /// concatenated head rows).
    pub kept_outputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub zero_groups: Vec<usize>,
    pub retained_groups: Vec<usize>,
    /// Zero groups left in place: output-layer groups (nothing consumes them)
    /// and groups restored by `keep_one`.
    pub kept_zero_groups: Vec<usize>,
    pub layers: Vec<LayerMap>,
    pub before: ModelCost,
    pub after: ModelCost,
    /// Trainable scalars inside the removed groups.
    pub pruned_group_params: usize,
    /// Trainable scalars removed from consumers' input slices.
    pub removed_input_params: usize,
    pub max_deviation: Option<f64>,
    pub architecture: String,
}

impl PruneReport {
    /// Summary line followed by one line per layer.
    pub fn to_jsonl(&self) -> String {
        let summary = json!({
            "record": "prune",
            "zero_groups": self.zero_groups,
            "retained_groups": self.retained_groups,
            "kept_zero_groups": self.kept_zero_groups,
            "params_before": self.before.params,
            "params_after": self.after.params,
            "buffers_before": self.before.buffers,
            "buffers_after": self.after.buffers,
            "flops_before": self.before.flops,
            "flops_after": self.after.flops,
            "pruned_group_params": self.pruned_group_params,
            "removed_input_params": self.removed_input_params,
            "max_deviation": self.max_deviation,
            "architecture": self.architecture,
        });
        let mut s = summary.to_string();
        s.push('\n');
        for l in &self.layers {
            let mut v = serde_json::to_value(l).expect("plain record");
            v["record"] = json!("layer");
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }
}

/// Penalized groups whose entries are all exactly zero in `model`.
pub fn zero_group_ids(model: &ModelGraph<f32>, partition: &GroupPartition) -> Vec<usize> {
    let x = model.flat_params();
    partition
        .penalized()
        .filter(|g| is_zero_group(&x, g.flat()))
        .map(|g| g.id)
        .collect()
}

/// Prunes every zero penalized group.
pub fn prune(
    model: &ModelGraph<f32>,
    partition: &GroupPartition,
    options: PruneOptions,
) -> Result<(ModelGraph<f32>, PruneReport)> {
    let zero = zero_group_ids(model, partition);
    prune_groups(model, partition, &zero, options)
}

fn feature_of(model: &ModelGraph<f32>, tag: StructureTag) -> Result<(usize, usize)> {
    match tag {
        StructureTag::Channel { layer, channel } => Ok((layer, channel)),
        StructureTag::Row { layer, row } => Ok((layer, row)),
        StructureTag::HeadRow { layer, head, row } => match &model.layers()[layer] {
            LayerSpec::Attention(a) => Ok((layer, a.head_offset(head) + row)),
            _ => Err(OtoError::InvalidModel(format!("head tag on layer {layer}"))),
        },
        StructureTag::Block { .. } => Err(OtoError::UnsupportedStructure(
            "partition groups carry no layer structure".into(),
        )),
    }
}

fn out_width(layer: &LayerSpec<f32>) -> usize {
    match layer {
        LayerSpec::Linear(l) => l.out_features(),
        LayerSpec::ConvBn(c) => c.out_channels(),
        LayerSpec::Residual(r) => r.out_channels(),
        LayerSpec::Attention(a) => a.out_features(),
        LayerSpec::Activation(_) | LayerSpec::Flatten => 0,
    }
}

fn select_rows(t: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    t.slice_rows(rows)
}

fn select_cols(t: &Tensor<f32>, cols: &[usize]) -> Tensor<f32> {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(m * cols.len());
    for r in 0..m {
        data.extend(cols.iter().map(|&c| t.data()[r * n + c]));
    }
    Tensor::new(vec![m, cols.len()], data).expect("nonempty selection")
}

fn narrow_conv_outputs(c: &mut ConvBn<f32>, keep: &[usize]) {
    c.kernel = select_rows(&c.kernel, keep);
    for t in [&mut c.bias, &mut c.mean, &mut c.std, &mut c.gamma, &mut c.beta] {
        *t = select_rows(t, keep);
    }
}

/// Drops input channels; returns the number of removed trainable scalars.
fn narrow_conv_inputs(c: &mut ConvBn<f32>, channels: &[usize]) -> usize {
    let kk = c.geometry.kernel * c.geometry.kernel;
    let cols: Vec<usize> = channels.iter().flat_map(|&ch| ch * kk..(ch + 1) * kk).collect();
    let before = c.kernel.numel();
    c.kernel = select_cols(&c.kernel, &cols);
    c.geometry.in_channels = channels.len();
    before - c.kernel.numel()
}

fn narrow_linear_inputs(l: &mut Linear<f32>, features: &[usize]) -> usize {
    let before = l.weight.numel();
    l.weight = select_cols(&l.weight, features);
    before - l.weight.numel()
}

/// Which original features of the current activation survive.
struct FeatureMap {
    kept: Vec<usize>,
}

/// Removes the listed groups and the matching input slices of the layers
/// that consume them. Listing a nonzero group changes the function; that is
/// the caller's responsibility.
pub fn prune_groups(
    model: &ModelGraph<f32>,
    partition: &GroupPartition,
    remove: &[usize],
    options: PruneOptions,
) -> Result<(ModelGraph<f32>, PruneReport)> {
    if partition.dim() != model.trainable_len() {
        return Err(OtoError::Structural(format!(
            "partition covers {} scalars, model has {}",
            partition.dim(),
            model.trainable_len()
        )));
    }
    let last = output_layer(model);
    let x = model.flat_params();
    let mut per_layer: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut group_at: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for g in partition.groups() {
        group_at.insert(feature_of(model, g.tag)?, g.id);
    }
    let mut kept_zero = Vec::new();
    let requested: BTreeSet<usize> = remove.iter().copied().collect();
    for &gid in &requested {
        let g = partition.groups().get(gid).ok_or_else(|| {
            OtoError::InvalidArgument(format!("group {gid} not in partition of {}", partition.len()))
        })?;
        let (layer, feature) = feature_of(model, g.tag)?;
        if Some(layer) == last {
            kept_zero.push(gid);
            continue;
        }
        per_layer.entry(layer).or_default().insert(feature);
    }
    for (&layer, removed) in per_layer.iter_mut() {
        let width = out_width(&model.layers()[layer]);
        if removed.len() == width {
            if !options.keep_one {
                return Err(OtoError::DegenerateLayer {
                    layer,
                    detail: format!("all {width} groups are selected"),
                });
            }
            let norm = |f: usize| -> f64 {
                let g = &partition.groups()[group_at[&(layer, f)]];
                g.flat().iter().map(|&i| (x[i] as f64).powi(2)).sum()
            };
            let best = (0..width)
                .max_by(|&a, &b| norm(a).total_cmp(&norm(b)).then(b.cmp(&a)))
                .expect("width > 0");
            removed.remove(&best);
            kept_zero.push(group_at[&(layer, best)]);
        }
    }
    kept_zero.sort_unstable();
    let pruned: Vec<usize> = requested
        .iter()
        .copied()
        .filter(|g| kept_zero.binary_search(g).is_err())
        .collect();
    let pruned_group_params = pruned.iter().map(|&g| partition.groups()[g].len()).sum();

    let shapes = model.layer_shapes()?;
    let mut incoming: Option<FeatureMap> = None;
    let mut layers = Vec::with_capacity(model.layers().len());
    let mut maps = Vec::new();
    let mut removed_input_params = 0;
    let empty = BTreeSet::new();
    for (li, layer) in model.layers().iter().enumerate() {
        let in_shape = if li == 0 { model.input_shape() } else { &shapes[li - 1] };
        let gone = per_layer.get(&li).unwrap_or(&empty);
        let width = out_width(layer);
        let keep: Vec<usize> = (0..width).filter(|f| !gone.contains(f)).collect();
        let inputs_before = match layer {
            LayerSpec::Linear(l) => l.in_features(),
            LayerSpec::ConvBn(c) => c.geometry.in_channels,
            LayerSpec::Residual(r) => r.left.geometry.in_channels,
            LayerSpec::Attention(a) => a.in_features(),
            _ => 0,
        };
        let new_layer = match layer {
            LayerSpec::Activation(a) => LayerSpec::Activation(*a),
            LayerSpec::Flatten => {
                if let Some(m) = incoming.take() {
                    let hw: usize = in_shape[1..].iter().product();
                    incoming = Some(FeatureMap {
                        kept: m.kept.iter().flat_map(|&c| c * hw..(c + 1) * hw).collect(),
                    });
                }
                LayerSpec::Flatten
            }
            LayerSpec::ConvBn(c) => {
                let mut c = c.clone();
                narrow_conv_outputs(&mut c, &keep);
                if let Some(m) = &incoming {
                    removed_input_params += narrow_conv_inputs(&mut c, &m.kept);
                }
                LayerSpec::ConvBn(c)
            }
            LayerSpec::Residual(r) => {
                let mut r = r.clone();
                narrow_conv_outputs(&mut r.left, &keep);
                narrow_conv_outputs(&mut r.right, &keep);
                if let Some(m) = &incoming {
                    removed_input_params += narrow_conv_inputs(&mut r.left, &m.kept);
                    removed_input_params += narrow_conv_inputs(&mut r.right, &m.kept);
                }
                LayerSpec::Residual(r)
            }
            LayerSpec::Linear(l) => {
                let mut l = Linear {
                    weight: select_rows(&l.weight, &keep),
                    bias: select_rows(&l.bias, &keep),
                };
                if let Some(m) = &incoming {
                    removed_input_params += narrow_linear_inputs(&mut l, &m.kept);
                }
                LayerSpec::Linear(l)
            }
            LayerSpec::Attention(a) => {
                let mut heads = Vec::new();
                for (h, head) in a.heads.iter().enumerate() {
                    let off = a.head_offset(h);
                    let rows: Vec<usize> = (0..head.out_features()).filter(|r| !gone.contains(&(off + r))).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let mut l = Linear {
                        weight: select_rows(&head.weight, &rows),
                        bias: select_rows(&head.bias, &rows),
                    };
                    if let Some(m) = &incoming {
                        removed_input_params += narrow_linear_inputs(&mut l, &m.kept);
                    }
                    heads.push(l);
                }
                LayerSpec::Attention(crate::layers::Attention { heads })
            }
        };
        if layer.has_params() {
            let inputs_after = incoming.as_ref().map_or(inputs_before, |m| m.kept.len());
            maps.push(LayerMap {
                layer: li,
                kind: layer.kind(),
                outputs_before: width,
                outputs_after: keep.len(),
                inputs_before,
                inputs_after,
                kept_outputs: keep.clone(),
            });
            incoming = (keep.len() < width).then_some(FeatureMap { kept: keep });
        }
        layers.push(new_layer);
    }
    if incoming.is_some() {
        return Err(OtoError::Structural("pruning would change the model output width".into()));
    }
    let slim = ModelGraph::new(model.input_shape().to_vec(), layers, model.loss_kind())?;
    let retained = partition
        .penalized()
        .map(|g| g.id)
        .filter(|g| pruned.binary_search(g).is_err())
        .collect();
    let report = PruneReport {
        zero_groups: pruned,
        retained_groups: retained,
        kept_zero_groups: kept_zero,
        layers: maps,
        before: count_flops_params(model),
        after: count_flops_params(&slim),
        pruned_group_params,
        removed_input_params,
        max_deviation: None,
        architecture: describe(&slim),
    };
    Ok((slim, report))
}

/// Max `|full(x) - slim(x)|` over `inputs` seeded standard-normal samples.
pub fn equivalence_check(full: &ModelGraph<f32>, slim: &ModelGraph<f32>, inputs: usize, seed: u64) -> Result<f64> {
    if full.input_shape() != slim.input_shape() || full.output_shape() != slim.output_shape() {
        return Err(OtoError::Structural(format!(
            "models map {:?} -> {:?} and {:?} -> {:?}",
            full.input_shape(),
            full.output_shape(),
            slim.input_shape(),
            slim.output_shape()
        )));
    }
    if inputs == 0 {
        return Ok(0.0);
    }
    let mut rng = seeding::rng(seed, Stream::Probe);
    let mut shape = vec![inputs];
    shape.extend_from_slice(full.input_shape());
    let x = Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    });
    full.predict(&x)?.max_abs_diff(&slim.predict(&x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::arch::ModelBuilder;
    use crate::layers::Activation;
    use crate::zig::{partition_zig, zero_groups, ZigOptions};

    fn mlp() -> ModelGraph<f32> {
        ModelBuilder::new(&[3])
            .linear(4)
            .activation(Activation::Relu)
            .linear(2)
            .build(1)
            .unwrap()
    }

    #[test]
    fn counts_for_a_linear_layer() {
        let m = ModelBuilder::new(&[3]).linear(4).build(0).unwrap();
        let c = count_flops_params(&m);
        assert_eq!((c.params, c.flops, c.buffers), (16, 12, 0));
    }

    #[test]
    fn conv_flops_formula() {
        // 2 input channels, 3x3 kernel: c*k*k = 18; 8x8 output.
        let m = ModelBuilder::new(&[2, 8, 8]).conv_bn(4, 3, 1, 1, Activation::Relu).build(0).unwrap();
        let c = count_flops_params(&m);
        assert_eq!(c.flops, 4 * 18 * 64 + 4 * 64);
        assert_eq!(c.params, 4 * 18 + 4 * 3);
        assert_eq!(c.buffers, 8);
    }

    #[test]
    fn nothing_to_prune_keeps_model() {
        let m = mlp();
        let p = partition_zig(&m, ZigOptions::default()).unwrap();
        let (slim, report) = prune(&m, &p, PruneOptions::default()).unwrap();
        assert_eq!(slim, m);
        assert!(report.zero_groups.is_empty());
        assert_eq!(equivalence_check(&m, &slim, 10, 0).unwrap(), 0.0);
    }

    #[test]
    fn row_removal_shapes() {
        let mut m = mlp();
        let p = partition_zig(&m, ZigOptions::default()).unwrap();
        zero_groups(&mut m, &p, &[2]);
        let (slim, report) = prune(&m, &p, PruneOptions::default()).unwrap();
        match (&slim.layers()[0], &slim.layers()[2]) {
            (LayerSpec::Linear(a), LayerSpec::Linear(b)) => {
                assert_eq!(a.weight.shape(), &[3, 3]);
                assert_eq!(b.weight.shape(), &[2, 3]);
            }
            _ => panic!(),
        }
        assert_eq!(report.zero_groups, vec![2]);
        assert_eq!(report.retained_groups, vec![0, 1, 3]);
        assert_eq!(
            report.after.params,
            report.before.params - report.pruned_group_params - report.removed_input_params
        );
        assert_eq!((report.pruned_group_params, report.removed_input_params), (4, 2));
        assert!(equivalence_check(&m, &slim, 50, 3).unwrap() <= 1e-5);
        assert!(report.after.flops < report.before.flops);
    }

    #[test]
    fn whole_layer_is_degenerate_unless_keep_one() {
        let mut m = mlp();
        let p = partition_zig(&m, ZigOptions::default()).unwrap();
        zero_groups(&mut m, &p, &[0, 1, 2, 3]);
        assert!(matches!(
            prune(&m, &p, PruneOptions::default()),
            Err(OtoError::DegenerateLayer { layer: 0, .. })
        ));
        let (slim, report) = prune(&m, &p, PruneOptions { keep_one: true }).unwrap();
        assert_eq!(slim.layer_shapes().unwrap()[0], vec![1]);
        assert_eq!(report.kept_zero_groups.len(), 1);
        assert!(equivalence_check(&m, &slim, 20, 1).unwrap() <= 1e-5);
    }

    #[test]
    fn conv_then_dense_through_flatten() {
        let mut m = ModelBuilder::new(&[2, 4, 4])
            .conv_bn(3, 3, 1, 1, Activation::Relu)
            .residual(3, 3, 1, Activation::Gelu)
            .flatten()
            .linear(5)
            .activation(Activation::Relu)
            .attention(&[2, 3])
            .linear(2)
            .build(5)
            .unwrap();
        m.randomize_params(&mut ChaCha8Rng::seed_from_u64(9));
        let p = partition_zig(&m, ZigOptions::default()).unwrap();
        // conv channel 1, residual channel 0, linear row 4, attention head 0 entirely.
        let ids: Vec<usize> = vec![1, 3, 6 + 4, 11, 12];
        zero_groups(&mut m, &p, &ids);
        let (slim, report) = prune(&m, &p, PruneOptions::default()).unwrap();
        assert_eq!(report.zero_groups, ids);
        assert_eq!(describe(&slim).matches("attention:3").count(), 1);
        assert!(equivalence_check(&m, &slim, 30, 2).unwrap() <= 1e-5);
        assert_eq!(
            report.after.params,
            report.before.params - report.pruned_group_params - report.removed_input_params
        );
        // Pruning the slim model again changes nothing.
        let ps = partition_zig(&slim, ZigOptions::default()).unwrap();
        let (again, r2) = prune(&slim, &ps, PruneOptions::default()).unwrap();
        assert_eq!(again, slim);
        assert!(r2.zero_groups.is_empty());
    }

    #[test]
    fn pruning_a_live_group_changes_outputs() {
        let mut m = mlp();
        m.randomize_params(&mut ChaCha8Rng::seed_from_u64(2));
        let p = partition_zig(&m, ZigOptions::default()).unwrap();
        let (slim, _) = prune_groups(&m, &p, &[1], PruneOptions::default()).unwrap();
        assert!(equivalence_check(&m, &slim, 50, 3).unwrap() > 1e-3);
    }

    #[test]
    fn report_jsonl_has_summary_and_layers() {
        let mut m = mlp();
        let p = partition_zig(&m, ZigOptions::default()).unwrap();
        zero_groups(&mut m, &p, &[0]);
        let (_, r) = prune(&m, &p, PruneOptions::default()).unwrap();
        let text = r.to_jsonl();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["record"], "prune");
        assert_eq!(lines[1]["record"], "layer");
        assert_eq!(lines[1]["outputs_after"], 3);
    }
}
