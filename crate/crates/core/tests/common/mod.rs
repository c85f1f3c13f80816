#![allow(dead_code)]

use oto::arch::{ConvPlan, ModelBuilder};
use oto::layers::{Activation, LossKind};
use oto::model::ModelGraph;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const ACTIVATIONS: [Activation; 4] = [
    Activation::Relu,
    Activation::LeakyRelu(0.1),
    Activation::PRelu(0.25),
    Activation::Gelu,
];

pub fn random_activation(rng: &mut ChaCha8Rng) -> Activation {
    *ACTIVATIONS.choose(rng).unwrap()
}

fn conv_plan(rng: &mut ChaCha8Rng, stride: usize) -> ConvPlan {
    let kernel = *[1, 3].choose(rng).unwrap();
    ConvPlan {
        kernel,
        stride,
        padding: kernel / 2,
        activation: random_activation(rng),
    }
}

/// Conv-BN, residual, linear and attention layers with random sizes, in that
/// order, closed by a small linear head.
pub fn random_model(rng: &mut ChaCha8Rng) -> ModelGraph<f32> {
    let c = rng.random_range(1..=3);
    let hw = rng.random_range(4..=6);
    let mut b = ModelBuilder::new(&[c, hw, hw]);
    for _ in 0..rng.random_range(1..=2) {
        let stride = rng.random_range(1..=2);
        let p = conv_plan(rng, stride);
        b = b.conv_bn(rng.random_range(1..=4), p.kernel, p.stride, p.padding, p.activation);
    }
    let stride = rng.random_range(1..=2);
    let left = conv_plan(rng, stride);
    let right = conv_plan(rng, stride);
    b = b.residual_with(rng.random_range(1..=4), left, right).flatten();
    b = b.linear(rng.random_range(2..=6)).activation(random_activation(rng));
    let heads: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=3)).collect();
    b = b.attention(&heads).activation(random_activation(rng));
    b = b.linear(rng.random_range(1..=3));
    let loss = if rng.random_bool(0.5) {
        LossKind::MeanSquaredError
    } else {
        LossKind::SoftmaxCrossEntropy
    };
    b.loss(loss).build(rng.random()).unwrap()
}
