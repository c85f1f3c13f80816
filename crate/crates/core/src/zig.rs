//! Zero-invariant group (ZIG) partitioning.
//!
//! A group is zero-invariant when setting all of its parameters to zero forces
//! the structure it controls (a conv channel, a dense row, a head row) to
//! output exactly zero. The rules per layer kind:
//!
//! * Conv-BN with `m` channels: `m` groups, group `c` holds row `c` of the
//!   flattened kernel plus `bias[c]`, `gamma[c]`, `beta[c]`. The stored
//!   statistics `mean`/`std` never enter a group.
//! * Residual block: group `c` holds the channel-`c` parameters of *both*
//!   branches, because the branches are summed.
//! * Linear: group `i` holds row `i` of the weight and `bias[i]`.
//! * Attention: one group per (head, row).

use std::fmt::{self, Write as _};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::seeding::{self, Stream};
use crate::error::{OtoError, Result};
use crate::model::{LayerSpec, ModelGraph, ParamId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructureTag {
    Channel { layer: usize, channel: usize },
    Row { layer: usize, row: usize },
    HeadRow { layer: usize, head: usize, row: usize },
    /// A plain block of a flat vector (no model structure).
    Block { index: usize },
}

impl StructureTag {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            StructureTag::Channel { layer, .. }
            | StructureTag::Row { layer, .. }
            | StructureTag::HeadRow { layer, .. } => Some(layer),
            StructureTag::Block { .. } => None,
        }
    }
}

impl fmt::Display for StructureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructureTag::Channel { layer, channel } => write!(f, "layer{layer}/channel{channel}"),
            StructureTag::Row { layer, row } => write!(f, "layer{layer}/row{row}"),
            StructureTag::HeadRow { layer, head, row } => write!(f, "layer{layer}/head{head}/row{row}"),
            StructureTag::Block { index } => write!(f, "block{index}"),
        }
    }
}

/// Contiguous run `start..start+len` inside one parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub param: ParamId,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: usize,
    pub tag: StructureTag,
    pub spans: Vec<Span>,
    pub penalized: bool,
    flat: Vec<usize>,
}

impl Group {
    /// Indices into the flat trainable vector.
    pub fn flat(&self) -> &[usize] {
        &self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// `(array id, index)` pairs covered by the group.
    pub fn members(&self) -> impl Iterator<Item = (ParamId, usize)> + '_ {
        self.spans
            .iter()
            .flat_map(|s| (s.start..s.start + s.len).map(move |i| (s.param, i)))
    }
}

/// Disjoint groups over a flat parameter vector of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    groups: Vec<Group>,
    dim: usize,
}

impl GroupPartition {
    /// Builds a partition over a flat vector; `groups[i]` lists flat indices.
    /// All groups are penalized unless listed in `unpenalized`.
    pub fn from_flat_groups(dim: usize, groups: Vec<Vec<usize>>, unpenalized: &[usize]) -> Result<Self> {
        let groups = groups
            .into_iter()
            .enumerate()
            .map(|(id, flat)| Group {
                id,
                tag: StructureTag::Block { index: id },
                spans: flat
                    .iter()
                    .map(|&i| Span {
                        param: ParamId(0),
                        start: i,
                        len: 1,
                    })
                    .collect(),
                penalized: !unpenalized.contains(&id),
                flat,
            })
            .collect();
        let p = GroupPartition { groups, dim };
        p.validate(false)?;
        Ok(p)
    }

    /// Consecutive equal-size blocks `[0, size), [size, 2 size), ...`.
    pub fn contiguous_blocks(count: usize, size: usize) -> Self {
        let groups = (0..count).map(|g| (g * size..(g + 1) * size).collect()).collect();
        Self::from_flat_groups(count * size, groups, &[]).expect("blocks are disjoint")
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn penalized(&self) -> impl Iterator<Item = &Group> {
        self.groups.iter().filter(|g| g.penalized)
    }

    pub fn penalized_count(&self) -> usize {
        self.penalized().count()
    }

    /// Marks, for every flat index, whether it lies in some penalized group.
    pub fn penalized_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.dim];
        for g in self.penalized() {
            for &i in g.flat() {
                mask[i] = true;
            }
        }
        mask
    }

    /// Checks non-emptiness, disjointness, bounds and (optionally) that every
    /// index is covered.
    pub fn validate(&self, require_cover: bool) -> Result<()> {
        let mut seen = vec![false; self.dim];
        for g in &self.groups {
            if g.flat.is_empty() {
                return Err(OtoError::InvalidModel(format!("group {} is empty", g.id)));
            }
            for &i in &g.flat {
                if i >= self.dim {
                    return Err(OtoError::InvalidModel(format!(
                        "group {} index {i} out of range {}",
                        g.id, self.dim
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(OtoError::InvalidModel(format!(
                        "index {i} appears in more than one group"
                    )));
                }
            }
        }
        if require_cover {
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(OtoError::InvalidModel(format!("flat index {i} is in no group")));
            }
        }
        Ok(())
    }

    /// One group per line: `id <tab> tag <tab> penalty <tab> array:start..end ...`.
    pub fn to_text<T: Scalar>(&self, model: Option<&ModelGraph<T>>) -> String {
        let mut s = String::new();
        if let Some(m) = model {
            for p in m.params() {
                let role = if p.trainable { "trainable" } else { "excluded" };
                let _ = writeln!(s, "# array {} {} {:?} {role}", p.id.0, p.name, p.shape);
            }
        }
        let _ = writeln!(s, "# group\ttag\tpenalty\tspans");
        for g in &self.groups {
            let spans: Vec<String> = g
                .spans
                .iter()
                .map(|sp| format!("{}:{}..{}", sp.param.0, sp.start, sp.start + sp.len))
                .collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                g.id,
                g.tag,
                if g.penalized { "penalized" } else { "unpenalized" },
                spans.join(" ")
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[derive(Default)]
pub struct ZigOptions {
    /// Penalize the groups of the last parameterised layer (the output head).
    pub penalize_output_layer: bool,
}


struct Builder<'a, T: Scalar> {
    model: &'a ModelGraph<T>,
    groups: Vec<Group>,
}

impl<T: Scalar> Builder<'_, T> {
    fn first_param(&self, layer: usize) -> usize {
        self.model
            .params()
            .iter()
            .position(|p| p.layer == layer)
            .expect("parameterised layer has arrays")
    }

    fn push(&mut self, tag: StructureTag, spans: Vec<Span>, penalized: bool) {
        let params = self.model.params();
        let flat = spans
            .iter()
            .flat_map(|s| {
                let off = params[s.param.0].flat_offset.expect("grouped arrays are trainable");
                off + s.start..off + s.start + s.len
            })
            .collect();
        self.groups.push(Group {
            id: self.groups.len(),
            tag,
            spans,
            penalized,
            flat,
        });
    }
}

fn conv_spans(first: usize, channel: usize, patch: usize) -> [Span; 4] {
    let one = |slot: usize| Span {
        param: ParamId(first + slot),
        start: channel,
        len: 1,
    };
    [
        Span {
            param: ParamId(first),
            start: channel * patch,
            len: patch,
        },
        one(1),
        one(4),
        one(5),
    ]
}

fn row_spans(weight: usize, row: usize, width: usize) -> [Span; 2] {
    [
        Span {
            param: ParamId(weight),
            start: row * width,
            len: width,
        },
        Span {
            param: ParamId(weight + 1),
            start: row,
            len: 1,
        },
    ]
}

/// Index of the last layer that owns parameters.
pub fn output_layer<T: Scalar>(model: &ModelGraph<T>) -> Option<usize> {
    model.layers().iter().rposition(LayerSpec::has_params)
}

pub fn partition_zig<T: Scalar>(model: &ModelGraph<T>, options: ZigOptions) -> Result<GroupPartition> {
    let last = output_layer(model);
    let mut b = Builder {
        model,
        groups: Vec::new(),
    };
    for (li, layer) in model.layers().iter().enumerate() {
        let penalized = options.penalize_output_layer || Some(li) != last;
        match layer {
            LayerSpec::ConvBn(c) => {
                let first = b.first_param(li);
                let patch = c.geometry.patch_len();
                for ch in 0..c.out_channels() {
                    b.push(
                        StructureTag::Channel { layer: li, channel: ch },
                        conv_spans(first, ch, patch).to_vec(),
                        penalized,
                    );
                }
            }
            LayerSpec::Residual(r) => {
                if r.left.out_channels() != r.right.out_channels() {
                    return Err(OtoError::InvalidModel(format!(
                        "layer {li}: residual branches have {} and {} channels",
                        r.left.out_channels(),
                        r.right.out_channels()
                    )));
                }
                let first = b.first_param(li);
                let (pl, pr) = (r.left.geometry.patch_len(), r.right.geometry.patch_len());
                for ch in 0..r.out_channels() {
                    let mut spans = conv_spans(first, ch, pl).to_vec();
                    spans.extend(conv_spans(first + 6, ch, pr));
                    b.push(StructureTag::Channel { layer: li, channel: ch }, spans, penalized);
                }
            }
            LayerSpec::Linear(l) => {
                let first = b.first_param(li);
                for row in 0..l.out_features() {
                    b.push(
                        StructureTag::Row { layer: li, row },
                        row_spans(first, row, l.in_features()).to_vec(),
                        penalized,
                    );
                }
            }
            LayerSpec::Attention(a) => {
                let first = b.first_param(li);
                for (h, head) in a.heads.iter().enumerate() {
                    for row in 0..head.out_features() {
                        b.push(
                            StructureTag::HeadRow { layer: li, head: h, row },
                            row_spans(first + 2 * h, row, head.in_features()).to_vec(),
                            penalized,
                        );
                    }
                }
            }
            LayerSpec::Activation(_) | LayerSpec::Flatten => {}
        }
    }
    let p = GroupPartition {
        groups: b.groups,
        dim: model.trainable_len(),
    };
    p.validate(true)?;
    Ok(p)
}

/// Writes zeros into every member of the listed groups.
pub fn zero_groups<T: Scalar>(model: &mut ModelGraph<T>, partition: &GroupPartition, ids: &[usize]) {
    for &gid in ids {
        for s in &partition.groups()[gid].spans {
            let t = model.param_mut(s.param);
            t.data_mut()[s.start..s.start + s.len]
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }
}

/// Values of the output slice a group controls, read from per-layer outputs.
pub(crate) fn designated_slice<T: Scalar>(
    model: &ModelGraph<T>,
    outputs: &[Tensor<T>],
    tag: StructureTag,
) -> Vec<T> {
    let (layer, feature) = match tag {
        StructureTag::Channel { layer, channel } => (layer, channel),
        StructureTag::Row { layer, row } => (layer, row),
        StructureTag::HeadRow { layer, head, row } => match &model.layers()[layer] {
            LayerSpec::Attention(a) => (layer, a.head_offset(head) + row),
            _ => unreachable!("head tag on non-attention layer"),
        },
        StructureTag::Block { .. } => return Vec::new(),
    };
    let out = &outputs[layer];
    let batch = out.shape()[0];
    let features = out.shape()[1];
    let per_feature: usize = out.shape()[2..].iter().product();
    let mut vals = Vec::with_capacity(batch * per_feature);
    for b in 0..batch {
        let base = (b * features + feature) * per_feature;
        vals.extend_from_slice(&out.data()[base..base + per_feature]);
    }
    vals
}

/// Randomizes parameters and inputs, zeros a random subset of groups, and
/// returns the largest magnitude seen in any zeroed group's output slice.
pub fn verify_zero_invariance(
    model: &ModelGraph<f32>,
    partition: &GroupPartition,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeding::rng(seed, Stream::ZeroTrials);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut m = model.clone();
        m.randomize_params(&mut rng);
        let k = if partition.is_empty() {
            0
        } else {
            rng.random_range(0..=partition.len())
        };
        let chosen = sample(&mut rng, partition.len(), k).into_vec();
        zero_groups(&mut m, partition, &chosen);
        let batch = 2;
        let mut shape = vec![batch];
        shape.extend_from_slice(model.input_shape());
        let input = Tensor::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            3.0 * v as f32
        });
        let outputs = m.layer_outputs(&input)?;
        for &gid in &chosen {
            let tag = partition.groups()[gid].tag;
            for v in designated_slice(&m, &outputs, tag) {
                worst = worst.max(v.abs() as f64);
            }
        }
    }
    Ok(worst)
}
