//! Central finite differences against backprop for one network of each flavour.

use oto::arch::ModelBuilder;
use oto::gradcheck::finite_difference_check;
use oto::layers::{Activation, LossKind, Targets};
use oto::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn run_example() -> oto::Result<String> {
    let nets = [
        ("mlp/mse", ModelBuilder::new(&[4]).linear(6).activation(Activation::Gelu).linear(2)),
        (
            "cnn/ce",
            ModelBuilder::new(&[2, 4, 4])
                .conv_bn(3, 3, 1, 1, Activation::Gelu)
                .flatten()
                .linear(3)
                .loss(LossKind::SoftmaxCrossEntropy),
        ),
        ("attention/mse", ModelBuilder::new(&[4]).attention(&[2, 3]).linear(2)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut out = String::new();
    for (name, b) in nets {
        let mut model = b.build(5)?;
        model.randomize_params(&mut rng);
        let mut shape = vec![2];
        shape.extend_from_slice(model.input_shape());
        let x = Tensor::from_fn(shape, |_| noise.sample(&mut rng) as f32);
        let width = model.output_shape()[0];
        let t = match model.loss_kind() {
            LossKind::SoftmaxCrossEntropy => Targets::Classes(vec![0, width - 1]),
            LossKind::MeanSquaredError => Targets::Values(vec![0.5; 2 * width]),
        };
        let g = finite_difference_check(&model, &x, &t, 1e-3)?;
        out.push_str(&format!("{name}: {} params, max rel error {:.2e}\n", g.checked, g.max_rel_error));
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> oto::Result<()> {
    print!("{}", run_example()?);
    Ok(())
}
