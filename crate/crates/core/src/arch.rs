//! Building models from a compact layer list.
//!
//! Layers are comma separated:
//!
//! ```text
//! convbn:OUT:K:STRIDE:PAD:ACT
//! residual:OUT:K1:K2:STRIDE:ACT                      (padding K/2 on both branches)
//! residual:OUT:K1:S1:P1:ACT1:K2:S2:P2:ACT2
//! linear:OUT
//! attention:W1/W2/...                                (one width per head)
//! act:ACT          flatten
//! ```
//!
//! `ACT` is `relu`, `gelu`, `leaky@SLOPE` or `prelu@SLOPE`.

use std::fmt;


use crate::seeding::{self, Stream};
use crate::error::{invalid_arg, OtoError, Result};
use crate::layers::{Activation, Attention, ConvBn, ConvGeometry, Linear, LossKind, Residual};
use crate::model::{LayerSpec, ModelGraph};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvPlan {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerPlan {
    ConvBn { out: usize, conv: ConvPlan },
    Residual { out: usize, left: ConvPlan, right: ConvPlan },
    Linear { out: usize },
    Attention { widths: Vec<usize> },
    Activation(Activation),
    Flatten,
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerPlan::ConvBn { out, conv } => write!(
                f,
                "convbn:{out}:{}:{}:{}:{}",
                conv.kernel, conv.stride, conv.padding, conv.activation
            ),
            LayerPlan::Residual { out, left, right } => write!(
                f,
                "residual:{out}:{}:{}:{}:{}:{}:{}:{}:{}",
                left.kernel,
                left.stride,
                left.padding,
                left.activation,
                right.kernel,
                right.stride,
                right.padding,
                right.activation
            ),
            LayerPlan::Linear { out } => write!(f, "linear:{out}"),
            LayerPlan::Attention { widths } => {
                let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                write!(f, "attention:{}", w.join("/"))
            }
            LayerPlan::Activation(a) => write!(f, "act:{a}"),
            LayerPlan::Flatten => write!(f, "flatten"),
        }
    }
}

fn num(tok: &str, what: &str, layer: &str) -> Result<usize> {
    tok.trim()
        .parse()
        .map_err(|_| invalid_arg(format!("`{layer}`: {what} `{tok}` is not a non-negative integer")))
}

fn positive(tok: &str, what: &str, layer: &str) -> Result<usize> {
    let v = num(tok, what, layer)?;
    if v == 0 {
        return Err(invalid_arg(format!("`{layer}`: {what} must be positive")));
    }
    Ok(v)
}

impl LayerPlan {
    pub fn parse(token: &str) -> Result<Self> {
        let token = token.trim();
        let parts: Vec<&str> = token.split(':').collect();
        let conv = |k: &str, s: &str, p: &str, a: &str| -> Result<ConvPlan> {
            Ok(ConvPlan {
                kernel: positive(k, "kernel", token)?,
                stride: positive(s, "stride", token)?,
                padding: num(p, "padding", token)?,
                activation: Activation::parse(a)?,
            })
        };
        match parts.as_slice() {
            ["convbn", out, k, s, p, a] => Ok(LayerPlan::ConvBn {
                out: positive(out, "channels", token)?,
                conv: conv(k, s, p, a)?,
            }),
            ["residual", out, k1, k2, s, a] => {
                let k1v = positive(k1, "kernel", token)?;
                let k2v = positive(k2, "kernel", token)?;
                if k1v % 2 == 0 || k2v % 2 == 0 {
                    return Err(invalid_arg(format!(
                        "`{token}`: short residual form needs odd kernels"
                    )));
                }
                Ok(LayerPlan::Residual {
                    out: positive(out, "channels", token)?,
                    left: conv(k1, s, &(k1v / 2).to_string(), a)?,
                    right: conv(k2, s, &(k2v / 2).to_string(), a)?,
                })
            }
            ["residual", out, k1, s1, p1, a1, k2, s2, p2, a2] => Ok(LayerPlan::Residual {
                out: positive(out, "channels", token)?,
                left: conv(k1, s1, p1, a1)?,
                right: conv(k2, s2, p2, a2)?,
            }),
            ["linear", out] => Ok(LayerPlan::Linear {
                out: positive(out, "width", token)?,
            }),
            ["attention", widths] => {
                let widths = widths
                    .split('/')
                    .map(|w| positive(w, "head width", token))
                    .collect::<Result<Vec<_>>>()?;
                Ok(LayerPlan::Attention { widths })
            }
            ["act", a] => Ok(LayerPlan::Activation(Activation::parse(a)?)),
            // activation tokens carry their own `@slope`
            ["act", a, rest @ ..] if !rest.is_empty() => Err(invalid_arg(format!(
                "`{token}`: write slopes as `{a}@SLOPE`"
            ))),
            ["flatten"] => Ok(LayerPlan::Flatten),
            _ => Err(OtoError::UnsupportedStructure(format!("unrecognised layer `{token}`"))),
        }
    }

    pub fn of_layer<T: Scalar>(layer: &LayerSpec<T>) -> Self {
        let plan = |c: &ConvBn<T>| ConvPlan {
            kernel: c.geometry.kernel,
            stride: c.geometry.stride,
            padding: c.geometry.padding,
            activation: c.activation,
        };
        match layer {
            LayerSpec::ConvBn(c) => LayerPlan::ConvBn {
                out: c.out_channels(),
                conv: plan(c),
            },
            LayerSpec::Residual(r) => LayerPlan::Residual {
                out: r.out_channels(),
                left: plan(&r.left),
                right: plan(&r.right),
            },
            LayerSpec::Linear(l) => LayerPlan::Linear {
                out: l.out_features(),
            },
            LayerSpec::Attention(a) => LayerPlan::Attention {
                widths: a.heads.iter().map(Linear::out_features).collect(),
            },
            LayerSpec::Activation(a) => LayerPlan::Activation(*a),
            LayerSpec::Flatten => LayerPlan::Flatten,
        }
    }
}

pub fn parse_layers(text: &str) -> Result<Vec<LayerPlan>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(LayerPlan::parse)
        .collect()
}

pub fn parse_shape(text: &str) -> Result<Vec<usize>> {
    text.split('x')
        .map(|t| positive(t, "extent", text))
        .collect()
}

pub fn format_shape(shape: &[usize]) -> String {
    shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x")
}

/// Layer list of a model in the syntax accepted by [`parse_layers`].
pub fn describe<T: Scalar>(model: &ModelGraph<T>) -> String {
    model
        .layers()
        .iter()
        .map(|l| LayerPlan::of_layer(l).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Incremental model construction; parameters are sized by shape inference.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    input: Vec<usize>,
    plans: Vec<LayerPlan>,
    loss: LossKind,
}

impl ModelBuilder {
    pub fn new(input: &[usize]) -> Self {
        ModelBuilder {
            input: input.to_vec(),
            plans: Vec::new(),
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }

    pub fn from_plans(input: &[usize], plans: Vec<LayerPlan>, loss: LossKind) -> Self {
        ModelBuilder {
            input: input.to_vec(),
            plans,
            loss,
        }
    }

    pub fn plan(mut self, plan: LayerPlan) -> Self {
        self.plans.push(plan);
        self
    }

    pub fn conv_bn(self, out: usize, kernel: usize, stride: usize, padding: usize, activation: Activation) -> Self {
        self.plan(LayerPlan::ConvBn {
            out,
            conv: ConvPlan {
                kernel,
                stride,
                padding,
                activation,
            },
        })
    }

    /// Residual block with the same odd kernel on both branches.
    pub fn residual(self, out: usize, kernel: usize, stride: usize, activation: Activation) -> Self {
        let c = ConvPlan {
            kernel,
            stride,
            padding: kernel / 2,
            activation,
        };
        self.plan(LayerPlan::Residual { out, left: c, right: c })
    }

    pub fn residual_with(self, out: usize, left: ConvPlan, right: ConvPlan) -> Self {
        self.plan(LayerPlan::Residual { out, left, right })
    }

    pub fn linear(self, out: usize) -> Self {
        self.plan(LayerPlan::Linear { out })
    }

    pub fn attention(self, widths: &[usize]) -> Self {
        self.plan(LayerPlan::Attention {
            widths: widths.to_vec(),
        })
    }

    pub fn activation(self, a: Activation) -> Self {
        self.plan(LayerPlan::Activation(a))
    }

    pub fn flatten(self) -> Self {
        self.plan(LayerPlan::Flatten)
    }

    pub fn loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    /// Builds the model with zeroed arrays, then initialises from `seed`.
    pub fn build(&self, seed: u64) -> Result<ModelGraph<f32>> {
        let mut model = self.build_zeroed()?;
        model.init_params(&mut seeding::rng(seed, Stream::Init));
        Ok(model)
    }

    pub fn build_zeroed(&self) -> Result<ModelGraph<f32>> {
        let mut shape = self.input.clone();
        let mut layers = Vec::with_capacity(self.plans.len());
        for (i, plan) in self.plans.iter().enumerate() {
            let layer = make_layer(plan, &shape).map_err(|e| e.at_layer(i))?;
            shape = layer.output_shape(&shape).map_err(|e| e.at_layer(i))?;
            layers.push(layer);
        }
        ModelGraph::new(self.input.clone(), layers, self.loss)
    }
}

fn conv_layer(out: usize, in_channels: usize, c: &ConvPlan) -> ConvBn<f32> {
    let geometry = ConvGeometry {
        in_channels,
        kernel: c.kernel,
        stride: c.stride,
        padding: c.padding,
    };
    ConvBn {
        geometry,
        activation: c.activation,
        kernel: Tensor::zeros(vec![out, geometry.patch_len()]),
        bias: Tensor::zeros(vec![out]),
        mean: Tensor::zeros(vec![out]),
        std: Tensor::filled(vec![out], 1.0),
        gamma: Tensor::filled(vec![out], 1.0),
        beta: Tensor::zeros(vec![out]),
    }
}

fn make_layer(plan: &LayerPlan, input: &[usize]) -> Result<LayerSpec<f32>> {
    let features = || -> Result<usize> {
        if input.len() != 1 {
            return Err(invalid_arg(format!(
                "dense layer after per-sample shape {input:?}; insert flatten"
            )));
        }
        Ok(input[0])
    };
    let channels = || -> Result<usize> {
        if input.len() != 3 {
            return Err(invalid_arg(format!(
                "convolution needs (channels, h, w), got {input:?}"
            )));
        }
        Ok(input[0])
    };
    Ok(match plan {
        LayerPlan::ConvBn { out, conv } => LayerSpec::ConvBn(conv_layer(*out, channels()?, conv)),
        LayerPlan::Residual { out, left, right } => {
            let c = channels()?;
            LayerSpec::Residual(Residual {
                left: conv_layer(*out, c, left),
                right: conv_layer(*out, c, right),
            })
        }
        LayerPlan::Linear { out } => {
            let n = features()?;
            LayerSpec::Linear(Linear::new(Tensor::zeros(vec![*out, n]), Tensor::zeros(vec![*out]))?)
        }
        LayerPlan::Attention { widths } => {
            let n = features()?;
            let heads = widths
                .iter()
                .map(|&w| Linear::new(Tensor::zeros(vec![w, n]), Tensor::zeros(vec![w])))
                .collect::<Result<Vec<_>>>()?;
            LayerSpec::Attention(Attention::new(heads)?)
        }
        LayerPlan::Activation(a) => LayerSpec::Activation(*a),
        LayerPlan::Flatten => LayerSpec::Flatten,
    })
}
