use oto::arch::ModelBuilder;
use oto::layers::Activation;
use oto::prune::{equivalence_check, prune, PruneOptions};
use oto::zig::{partition_zig, zero_groups, ZigOptions};

/// Zero every other channel of the first conv and the residual block, then cut
/// them out and compare outputs and costs.
pub fn run_example() -> oto::Result<String> {
    let mut model = ModelBuilder::new(&[1, 8, 8])
        .conv_bn(6, 3, 1, 1, Activation::Relu)
        .residual(6, 3, 2, Activation::Relu)
        .flatten()
        .linear(10)
        .build(2)?;
    let p = partition_zig(&model, ZigOptions::default())?;
    let odd: Vec<usize> = p
        .penalized()
        .filter(|g| g.tag.layer().is_some_and(|l| l < 2))
        .map(|g| g.id)
        .filter(|id| id % 2 == 1)
        .collect();
    zero_groups(&mut model, &p, &odd);
    let (slim, report) = prune(&model, &p, PruneOptions::default())?;
    let dev = equivalence_check(&model, &slim, 50, 1)?;
    Ok(format!("{}max output deviation {dev:e}\n", report.to_jsonl()))
}

#[allow(dead_code)]
fn main() -> oto::Result<()> {
    print!("{}", run_example()?);
    Ok(())
}
