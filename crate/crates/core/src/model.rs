//! Ordered layer lists with a stable parameter registry.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{invalid_arg, OtoError, Result};
use crate::layers::{
    self, conv_bn_backward, conv_bn_forward_cached, linear_backward, Activation, Attention,
    ConvBn, ConvCache, Linear, LossKind, Residual, Targets,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec<T: Scalar = f32> {
    Linear(Linear<T>),
    ConvBn(ConvBn<T>),
    Residual(Residual<T>),
    Attention(Attention<T>),
    Activation(Activation),
    /// Collapses `(batch, c, h, w)` into `(batch, c*h*w)`.
    Flatten,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear(_) => "linear",
            LayerSpec::ConvBn(_) => "convbn",
            LayerSpec::Residual(_) => "residual",
            LayerSpec::Attention(_) => "attention",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self, LayerSpec::Activation(_) | LayerSpec::Flatten)
    }

    /// `(suffix, trainable)` for every array in registry order.
    pub(crate) fn slot_meta(&self) -> Vec<(String, bool)> {
        fn conv(prefix: &str, out: &mut Vec<(String, bool)>) {
            for (n, t) in [
                ("kernel", true),
                ("bias", true),
                ("mean", false),
                ("std", false),
                ("gamma", true),
                ("beta", true),
            ] {
                out.push((format!("{prefix}{n}"), t));
            }
        }
        let mut out = Vec::new();
        match self {
            LayerSpec::Linear(_) => {
                out.push(("weight".into(), true));
                out.push(("bias".into(), true));
            }
            LayerSpec::ConvBn(_) => conv("", &mut out),
            LayerSpec::Residual(_) => {
                conv("left.", &mut out);
                conv("right.", &mut out);
            }
            LayerSpec::Attention(a) => {
                for h in 0..a.heads.len() {
                    out.push((format!("head{h}.weight"), true));
                    out.push((format!("head{h}.bias"), true));
                }
            }
            LayerSpec::Activation(_) | LayerSpec::Flatten => {}
        }
        out
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor<T>> {
        fn conv<T: Scalar>(c: &ConvBn<T>) -> [&Tensor<T>; 6] {
            [&c.kernel, &c.bias, &c.mean, &c.std, &c.gamma, &c.beta]
        }
        match self {
            LayerSpec::Linear(l) => vec![&l.weight, &l.bias],
            LayerSpec::ConvBn(c) => conv(c).to_vec(),
            LayerSpec::Residual(r) => conv(&r.left).into_iter().chain(conv(&r.right)).collect(),
            LayerSpec::Attention(a) => a.heads.iter().flat_map(|h| [&h.weight, &h.bias]).collect(),
            LayerSpec::Activation(_) | LayerSpec::Flatten => Vec::new(),
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        fn conv<T: Scalar>(c: &mut ConvBn<T>) -> [&mut Tensor<T>; 6] {
            [
                &mut c.kernel,
                &mut c.bias,
                &mut c.mean,
                &mut c.std,
                &mut c.gamma,
                &mut c.beta,
            ]
        }
        match self {
            LayerSpec::Linear(l) => vec![&mut l.weight, &mut l.bias],
            LayerSpec::ConvBn(c) => conv(c).into_iter().collect(),
            LayerSpec::Residual(r) => {
                let Residual { left, right } = r;
                conv(left).into_iter().chain(conv(right)).collect()
            }
            LayerSpec::Attention(a) => a
                .heads
                .iter_mut()
                .flat_map(|h| {
                    let Linear { weight, bias } = h;
                    [weight, bias]
                })
                .collect(),
            LayerSpec::Activation(_) | LayerSpec::Flatten => Vec::new(),
        }
    }

    fn cast<U: Scalar>(&self) -> LayerSpec<U> {
        match self {
            LayerSpec::Linear(l) => LayerSpec::Linear(l.cast()),
            LayerSpec::ConvBn(c) => LayerSpec::ConvBn(c.cast()),
            LayerSpec::Residual(r) => LayerSpec::Residual(Residual {
                left: r.left.cast(),
                right: r.right.cast(),
            }),
            LayerSpec::Attention(a) => LayerSpec::Attention(Attention {
                heads: a.heads.iter().map(Linear::cast).collect(),
            }),
            LayerSpec::Activation(a) => LayerSpec::Activation(*a),
            LayerSpec::Flatten => LayerSpec::Flatten,
        }
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Linear(l) => vector_layer(input, l.in_features(), l.out_features()),
            LayerSpec::Attention(a) => vector_layer(input, a.in_features(), a.out_features()),
            LayerSpec::ConvBn(c) => {
                c.validate()?;
                conv_shape(input, c)
            }
            LayerSpec::Residual(r) => {
                r.left.validate()?;
                r.right.validate()?;
                let l = conv_shape(input, &r.left)?;
                let rr = conv_shape(input, &r.right)?;
                if l != rr {
                    return Err(OtoError::InvalidModel(format!(
                        "residual branches produce {l:?} and {rr:?}"
                    )));
                }
                Ok(l)
            }
            LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::Flatten => match input.len() {
                3 => Ok(vec![input.iter().product()]),
                1 => Ok(input.to_vec()),
                _ => Err(invalid_arg(format!("cannot flatten {input:?}"))),
            },
        }
    }
}

fn vector_layer(input: &[usize], n: usize, m: usize) -> Result<Vec<usize>> {
    if input.len() != 1 {
        return Err(invalid_arg(format!(
            "dense layer needs a flat feature vector, got per-sample shape {input:?} (insert flatten)"
        )));
    }
    if input[0] != n {
        return Err(invalid_arg(format!("expected {n} input features, got {}", input[0])));
    }
    Ok(vec![m])
}

fn conv_shape<T: Scalar>(input: &[usize], c: &ConvBn<T>) -> Result<Vec<usize>> {
    if input.len() != 3 {
        return Err(invalid_arg(format!(
            "convolution needs (channels, h, w) per sample, got {input:?}"
        )));
    }
    if input[0] != c.geometry.in_channels {
        return Err(invalid_arg(format!(
            "channel dimension: {} incoming, kernel expects {}",
            input[0], c.geometry.in_channels
        )));
    }
    let (oh, ow) = c.geometry.output_hw(input[1], input[2])?;
    Ok(vec![c.out_channels(), oh, ow])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub id: ParamId,
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Offset inside the flat trainable vector, `None` for stored statistics.
    pub flat_offset: Option<usize>,
}

#[derive(Debug, Clone)]
enum LayerCache<T: Scalar> {
    Input(Tensor<T>),
    Conv(ConvCache<T>),
    Residual(ConvCache<T>, ConvCache<T>),
    Flatten(Vec<usize>),
    None,
}

#[derive(Debug, Clone)]
struct Tape<T: Scalar> {
    caches: Vec<LayerCache<T>>,
    output_shape: Vec<usize>,
    loss_grad: Option<Tensor<T>>,
}

/// A feed-forward network: input shape, ordered layers, and a loss.
#[derive(Debug, Clone)]
pub struct ModelGraph<T: Scalar = f32> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec<T>>,
    loss: LossKind,
    registry: Vec<ParamInfo>,
    slots: Vec<(usize, usize)>,
    tape: Option<Tape<T>>,
}

impl<T: Scalar> PartialEq for ModelGraph<T> {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers && self.loss == other.loss
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// `input_shape` is per sample: `[features]` or `[channels, h, w]`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec<T>>, loss: LossKind) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(invalid_arg(format!("bad input shape {input_shape:?}")));
        }
        let mut model = ModelGraph {
            input_shape,
            layers,
            loss,
            registry: Vec::new(),
            slots: Vec::new(),
            tape: None,
        };
        model.layer_shapes()?;
        model.rebuild_registry();
        Ok(model)
    }

    fn rebuild_registry(&mut self) {
        self.registry.clear();
        self.slots.clear();
        let mut offset = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            for (si, ((suffix, trainable), t)) in
                layer.slot_meta().into_iter().zip(layer.tensors()).enumerate()
            {
                let flat_offset = trainable.then(|| {
                    let o = offset;
                    offset += t.numel();
                    o
                });
                self.registry.push(ParamInfo {
                    id: ParamId(self.registry.len()),
                    layer: li,
                    name: format!("layer{li}.{suffix}"),
                    shape: t.shape().to_vec(),
                    trainable,
                    flat_offset,
                });
                self.slots.push((li, si));
            }
        }
    }

    /// Per-sample output shapes of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.output_shape(&cur).map_err(|e| e.at_layer(i))?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layer_shapes()
            .ok()
            .and_then(|s| s.last().cloned())
            .unwrap_or_else(|| self.input_shape.clone())
    }

    pub fn layers(&self) -> &[LayerSpec<T>] {
        &self.layers
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn into_layers(self) -> Vec<LayerSpec<T>> {
        self.layers
    }

    /// Mutable access to one layer. Shapes must be preserved; use
    /// [`ModelGraph::new`] to build a structurally different model.
    pub fn with_layer_mut<R>(&mut self, index: usize, f: impl FnOnce(&mut LayerSpec<T>) -> R) -> Result<R> {
        let before = self.layers[index].tensors().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        let r = f(&mut self.layers[index]);
        let after = self.layers[index].tensors().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        if before != after {
            return Err(OtoError::State(format!("layer {index} changed parameter shapes in place")));
        }
        self.tape = None;
        Ok(r)
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.registry
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        let (l, s) = self.slots[id.0];
        self.layers[l].tensors()[s]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let (l, s) = self.slots[id.0];
        self.tape = None;
        self.layers[l].tensors_mut().into_iter().nth(s).expect("slot exists")
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.registry.iter().find(|p| p.name == name).map(|p| p.id)
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.registry
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for p in self.registry.iter().filter(|p| p.trainable) {
            out.extend_from_slice(self.param(p.id).data());
        }
        out
    }

    pub fn set_flat_params(&mut self, x: &[T]) -> Result<()> {
        if x.len() != self.trainable_len() {
            return Err(invalid_arg(format!(
                "flat vector has {} entries, model has {} trainable scalars",
                x.len(),
                self.trainable_len()
            )));
        }
        let ids: Vec<(ParamId, usize)> = self
            .registry
            .iter()
            .filter_map(|p| p.flat_offset.map(|o| (p.id, o)))
            .collect();
        for (id, o) in ids {
            let t = self.param_mut(id);
            let n = t.numel();
            t.data_mut().copy_from_slice(&x[o..o + n]);
        }
        Ok(())
    }

    /// Concatenated gradients of the trainable arrays from the last backward pass.
    pub fn flat_grads(&self) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for p in self.registry.iter().filter(|p| p.trainable) {
            let g = self.param(p.id).grad().ok_or_else(|| {
                OtoError::State(format!("no gradient for {} (run backward first)", p.name))
            })?;
            out.extend_from_slice(g);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph::new(
            self.input_shape.clone(),
            self.layers.iter().map(LayerSpec::cast).collect(),
            self.loss,
        )
        .expect("casting preserves structure")
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.rank() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            return Err(invalid_arg(format!(
                "input {:?} is not (batch, {:?})",
                input.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Runs the layers without recording anything.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(input, false, false)?.0.pop().expect("output"))
    }

    /// Output of every layer (index `i` is the output of layer `i`).
    pub fn layer_outputs(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.run(input, true, false)?.0)
    }

    fn run(
        &self,
        input: &Tensor<T>,
        keep_all: bool,
        record: bool,
    ) -> Result<(Vec<Tensor<T>>, Vec<LayerCache<T>>)> {
        self.check_input(input)?;
        let mut outputs = Vec::new();
        let mut caches = Vec::new();
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, cache) = forward_layer(layer, &cur, record).map_err(|e| e.at_layer(i))?;
            if record {
                caches.push(cache);
            }
            if keep_all {
                outputs.push(next.clone());
            }
            cur = next;
        }
        if !keep_all || self.layers.is_empty() {
            outputs.push(cur);
        }
        Ok((outputs, caches))
    }

    /// Forward pass that records intermediates for [`ModelGraph::backward`].
    /// Returns the output and, when targets are given, the mean batch loss.
    pub fn forward(&mut self, input: &Tensor<T>, targets: Option<&Targets>) -> Result<(Tensor<T>, Option<f64>)> {
        let (mut outs, caches) = self.run(input, false, true)?;
        let output = outs.pop().expect("output");
        let (loss, loss_grad) = match targets {
            Some(t) => {
                let (l, g) = layers::loss_and_grad(self.loss, &output, t)?;
                (Some(l), Some(g))
            }
            None => (None, None),
        };
        self.tape = Some(Tape {
            caches,
            output_shape: output.shape().to_vec(),
            loss_grad,
        });
        Ok((output, loss))
    }

    /// Backpropagates `adjoint * d(loss)` into every trainable array's grad slot.
    pub fn backward(&mut self, adjoint: T) -> Result<()> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| OtoError::State("backward called before forward".into()))?;
        let mut g = tape
            .loss_grad
            .clone()
            .ok_or_else(|| OtoError::State("forward ran without targets; no loss to differentiate".into()))?;
        if adjoint != T::one() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * adjoint);
        }
        self.backward_from(&g).map(|_| ())
    }

    /// Backpropagates an arbitrary output adjoint; returns the input gradient.
    pub fn backward_from(&mut self, d_output: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| OtoError::State("backward called before forward".into()))?;
        if d_output.shape() != tape.output_shape.as_slice() {
            let shape = tape.output_shape.clone();
            self.tape = Some(tape);
            return Err(invalid_arg(format!(
                "adjoint shape {:?} does not match output {shape:?}",
                d_output.shape()
            )));
        }
        let mut grad = d_output.clone();
        for i in (0..self.layers.len()).rev() {
            let cache = &tape.caches[i];
            grad = backward_layer(&mut self.layers[i], cache, &grad);
        }
        self.tape = Some(tape);
        Ok(grad)
    }

    /// Mean loss over a batch without recording.
    pub fn loss(&self, input: &Tensor<T>, targets: &Targets) -> Result<f64> {
        let out = self.predict(input)?;
        Ok(layers::loss_and_grad(self.loss, &out, targets)?.0)
    }

    /// Draws default initial values: He-normal weights, zero biases, unit BN
    /// scale, and `mean = 0, std = 1` statistics.
    pub fn init_params<R: Rng>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            init_layer(layer, rng);
        }
        self.tape = None;
    }

    /// Fills every array (including BN statistics) with generic random values,
    /// `std` drawn from `[0.5, 1.5]`. Used by property checks.
    pub fn randomize_params<R: Rng>(&mut self, rng: &mut R) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let positive = Uniform::new(0.5, 1.5).unwrap();
        for li in 0..self.registry.len() {
            let is_std = self.registry[li].name.ends_with("std");
            let t = self.param_mut(ParamId(li));
            for v in t.data_mut() {
                let x: f64 = if is_std {
                    positive.sample(rng)
                } else {
                    normal.sample(rng)
                };
                *v = T::from_f64(x);
            }
        }
        self.tape = None;
    }

    pub fn clear_grads(&mut self) {
        for layer in &mut self.layers {
            for t in layer.tensors_mut() {
                t.clear_grad();
            }
        }
    }
}

fn init_layer<T: Scalar, R: Rng>(layer: &mut LayerSpec<T>, rng: &mut R) {
    fn he<T: Scalar, R: Rng>(t: &mut Tensor<T>, fan_in: usize, rng: &mut R) {
        let n = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = T::from_f64(n.sample(rng)));
    }
    fn fill<T: Scalar>(t: &mut Tensor<T>, v: f64) {
        t.data_mut().iter_mut().for_each(|x| *x = T::from_f64(v));
    }
    fn conv<T: Scalar, R: Rng>(c: &mut ConvBn<T>, rng: &mut R) {
        let fan = c.geometry.patch_len();
        he(&mut c.kernel, fan, rng);
        fill(&mut c.bias, 0.0);
        fill(&mut c.mean, 0.0);
        fill(&mut c.std, 1.0);
        fill(&mut c.gamma, 1.0);
        fill(&mut c.beta, 0.0);
    }
    match layer {
        LayerSpec::Linear(l) => {
            let fan = l.in_features();
            he(&mut l.weight, fan, rng);
            fill(&mut l.bias, 0.0);
        }
        LayerSpec::ConvBn(c) => conv(c, rng),
        LayerSpec::Residual(r) => {
            conv(&mut r.left, rng);
            conv(&mut r.right, rng);
        }
        LayerSpec::Attention(a) => {
            for h in &mut a.heads {
                let fan = h.in_features();
                he(&mut h.weight, fan, rng);
                fill(&mut h.bias, 0.0);
            }
        }
        LayerSpec::Activation(_) | LayerSpec::Flatten => {}
    }
}

fn forward_layer<T: Scalar>(
    layer: &LayerSpec<T>,
    input: &Tensor<T>,
    record: bool,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let keep = |t: &Tensor<T>| {
        if record {
            LayerCache::Input(t.clone())
        } else {
            LayerCache::None
        }
    };
    Ok(match layer {
        LayerSpec::Linear(l) => (layers::linear_forward(input, l)?, keep(input)),
        LayerSpec::Attention(a) => (layers::attention_forward(input, a)?, keep(input)),
        LayerSpec::Activation(act) => (layers::activation_forward(input, *act), keep(input)),
        LayerSpec::ConvBn(c) => {
            let (y, cache) = conv_bn_forward_cached(input, c)?;
            (y, if record { LayerCache::Conv(cache) } else { LayerCache::None })
        }
        LayerSpec::Residual(r) => {
            let (l, lc) = conv_bn_forward_cached(input, &r.left)?;
            let (rr, rc) = conv_bn_forward_cached(input, &r.right)?;
            let y = layers::add_same_shape(l, &rr)?;
            (
                y,
                if record {
                    LayerCache::Residual(lc, rc)
                } else {
                    LayerCache::None
                },
            )
        }
        LayerSpec::Flatten => {
            let batch = input.shape()[0];
            let rest = input.numel() / batch;
            (
                input.clone().reshape(vec![batch, rest])?,
                LayerCache::Flatten(input.shape().to_vec()),
            )
        }
    })
}

fn set_conv_grads<T: Scalar>(c: &mut ConvBn<T>, g: layers::ConvGrads<T>) -> Tensor<T> {
    c.kernel.set_grad(g.kernel).expect("kernel grad");
    c.bias.set_grad(g.bias).expect("bias grad");
    c.gamma.set_grad(g.gamma).expect("gamma grad");
    c.beta.set_grad(g.beta).expect("beta grad");
    g.d_input
}

fn backward_layer<T: Scalar>(
    layer: &mut LayerSpec<T>,
    cache: &LayerCache<T>,
    d_out: &Tensor<T>,
) -> Tensor<T> {
    match (layer, cache) {
        (LayerSpec::Linear(l), LayerCache::Input(x)) => {
            let (dx, dw, db) = linear_backward(x, l, d_out);
            l.weight.set_grad(dw).expect("weight grad");
            l.bias.set_grad(db).expect("bias grad");
            dx
        }
        (LayerSpec::Attention(a), LayerCache::Input(x)) => {
            let rows = x.leading();
            let total = a.out_features();
            let mut dx_total: Option<Tensor<T>> = None;
            let mut offset = 0;
            for head in a.heads.iter_mut() {
                let mh = head.out_features();
                let mut slice = Vec::with_capacity(rows * mh);
                for r in 0..rows {
                    slice.extend_from_slice(&d_out.data()[r * total + offset..r * total + offset + mh]);
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = mh;
                let dh = Tensor::new(shape, slice).expect("head slice");
                let (dx, dw, db) = linear_backward(x, head, &dh);
                head.weight.set_grad(dw).expect("weight grad");
                head.bias.set_grad(db).expect("bias grad");
                dx_total = Some(match dx_total {
                    None => dx,
                    Some(acc) => layers::add_same_shape(acc, &dx).expect("same shape"),
                });
                offset += mh;
            }
            dx_total.expect("at least one head")
        }
        (LayerSpec::Activation(act), LayerCache::Input(x)) => {
            let data = x
                .data()
                .iter()
                .zip(d_out.data())
                .map(|(&xi, &g)| g * act.derivative(xi))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        }
        (LayerSpec::ConvBn(c), LayerCache::Conv(cache)) => {
            let g = conv_bn_backward(c, cache, d_out);
            set_conv_grads(c, g)
        }
        (LayerSpec::Residual(r), LayerCache::Residual(lc, rc)) => {
            let gl = conv_bn_backward(&r.left, lc, d_out);
            let gr = conv_bn_backward(&r.right, rc, d_out);
            let dl = set_conv_grads(&mut r.left, gl);
            let dr = set_conv_grads(&mut r.right, gr);
            layers::add_same_shape(dl, &dr).expect("same shape")
        }
        (LayerSpec::Flatten, LayerCache::Flatten(shape)) => {
            d_out.clone().reshape(shape.clone()).expect("flatten inverse")
        }
        _ => unreachable!("tape does not match layer list"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ModelBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_model_is_identity() {
        let m = ModelGraph::<f32>::new(vec![3], vec![], LossKind::MeanSquaredError).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), x);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut m = ModelBuilder::new(&[3]).linear(2).build(1).unwrap();
        assert!(matches!(m.backward(1.0), Err(OtoError::State(_))));
    }

    #[test]
    fn linear_mse_gradient_closed_form() {
        let mut m = ModelBuilder::new(&[3]).linear(2).loss(LossKind::MeanSquaredError).build(7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        m.randomize_params(&mut rng);
        let x = [0.5f32, -1.0, 2.0];
        let y = [0.25f32, -0.75];
        let xt = Tensor::new(vec![1, 3], x.to_vec()).unwrap();
        let (out, _) = m.forward(&xt, Some(&Targets::Values(y.to_vec()))).unwrap();
        m.backward(1.0).unwrap();
        let w = m.param(ParamId(0)).grad().unwrap().to_vec();
        let b = m.param(ParamId(1)).grad().unwrap().to_vec();
        for i in 0..2 {
            let r = 2.0 * (out.data()[i] - y[i]);
            assert!((b[i] - r).abs() < 1e-6);
            for j in 0..3 {
                assert!((w[i * 3 + j] - r * x[j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn flat_roundtrip_skips_statistics() {
        let mut m = ModelBuilder::new(&[1, 4, 4]).conv_bn(2, 3, 1, 1, Activation::Relu).build(2).unwrap();
        // kernel 2x9, bias 2, gamma 2, beta 2
        assert_eq!(m.trainable_len(), 18 + 6);
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        m.set_flat_params(&x).unwrap();
        assert_eq!(m.flat_params(), x);
        let std = m.param_by_name("layer0.std").unwrap();
        assert_eq!(m.param(std).data(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut m = ModelBuilder::new(&[2, 5, 5])
            .conv_bn(3, 3, 1, 1, Activation::Gelu)
            .residual(3, 3, 1, Activation::Relu)
            .flatten()
            .linear(4)
            .build(11)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        m.randomize_params(&mut rng);
        let x = Tensor::from_fn(vec![2, 2, 5, 5], |i| ((i * 37) % 11) as f32 - 5.0);
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
