//! Zero-invariant groups of a small conv/residual/attention network.
//!
//! Prints the partition table, then zeroes a third of the penalized groups
//! and checks that their designated outputs come out as exact zeros.

use oto::arch::ModelBuilder;
use oto::layers::Activation;
use oto::zig::{partition_zig, verify_zero_invariance, ZigOptions};

pub fn run_example() -> oto::Result<String> {
    let model = ModelBuilder::new(&[3, 6, 6])
        .conv_bn(4, 3, 1, 1, Activation::Relu)
        .residual(4, 3, 2, Activation::LeakyRelu(0.1))
        .flatten()
        .linear(8)
        .activation(Activation::Gelu)
        .attention(&[2, 2])
        .activation(Activation::Relu)
        .linear(3)
        .build(1)?;
    let p = partition_zig(&model, ZigOptions::default())?;
    let worst = verify_zero_invariance(&model, &p, 20, 7)?;
    let mut out = p.to_text(Some(&model));
    out.push_str(&format!(
        "{} groups ({} penalized) over {} parameters; max |output| on zeroed slices: {worst:e}\n",
        p.len(),
        p.penalized_count(),
        p.dim()
    ));
    Ok(out)
}

#[allow(dead_code)]
fn main() -> oto::Result<()> {
    print!("{}", run_example()?);
    Ok(())
}
