// With a small step, the prox step only zeroes a group whose norm falls inside
// a ball of radius alpha*lambda, which almost never happens. The half-space
// step looks at direction instead of size.

use oto::data::generate_group_lasso;
use oto::optim::{train, LeastSquares, OptimizerKind, TrainConfig};
use oto::oracle::bcd_oracle;
use oto::regularizer::sparsity_metrics;
use oto::zig::GroupPartition;

pub fn run_example() -> oto::Result<String> {
    let data = generate_group_lasso(40, 5, 10, 500, 0.01, 11)?;
    let p = GroupPartition::contiguous_blocks(40, 5);
    let lambda = 0.01;
    let warm = bcd_oracle(&data, &p, 0.0, 1e-12, 100_000)?.x;
    let mut out = String::new();
    for kind in [OptimizerKind::ProxSg, OptimizerKind::Hspg] {
        let cfg = TrainConfig {
            optimizer: kind,
            batch_size: 1,
            epochs: 20,
            alpha0: 1e-4,
            decay: 1.0,
            lambda,
            epsilon: 0.0,
            switch_epochs: 2,
            seed: 5,
        };
        let run = train(&mut LeastSquares { data: &data }, &p, warm.clone(), &cfg)?;
        let m = sparsity_metrics(&run.x, &p);
        out.push_str(&format!("{:>7}: {} of 40 groups exactly zero\n", kind.name(), m.zero_groups));
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> oto::Result<()> {
    print!("{}", run_example()?);
    Ok(())
}
