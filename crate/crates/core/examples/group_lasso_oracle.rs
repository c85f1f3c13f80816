//! HSPG on a planted group-lasso problem, checked against block coordinate descent.

use oto::data::generate_group_lasso;
use oto::optim::{least_squares_objective, train, LeastSquares, OptimizerKind, TrainConfig};
use oto::oracle::bcd_oracle;
use oto::regularizer::sparsity_metrics;
use oto::zig::GroupPartition;

pub fn run_example() -> oto::Result<String> {
    let data = generate_group_lasso(40, 5, 10, 500, 0.01, 11)?;
    let p = GroupPartition::contiguous_blocks(40, 5);
    let lambda = 0.01;
    let sol = bcd_oracle(&data, &p, lambda, 1e-12, 100_000)?;
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Hspg,
        batch_size: 10,
        epochs: 40,
        alpha0: 0.1,
        decay: 0.85,
        lambda,
        epsilon: 0.0,
        switch_epochs: 5,
        seed: 7,
    };
    let run = train(&mut LeastSquares { data: &data }, &p, vec![0.0; data.dim()], &cfg)?;
    let psi = least_squares_objective(&data, &p, lambda, &run.x);
    let nonzero: Vec<usize> = p
        .groups()
        .iter()
        .filter(|g| g.flat().iter().any(|&i| run.x[i] != 0.0))
        .map(|g| g.id)
        .collect();
    Ok(format!(
        "planted {:?}\noracle  {:?} ({} sweeps, psi {:.6})\nhspg    {:?} (psi {psi:.6}, {} zero groups)\n",
        data.support,
        sol.support(&p),
        sol.sweeps,
        sol.objective,
        nonzero,
        sparsity_metrics(&run.x, &p).zero_groups
    ))
}

#[allow(dead_code)]
fn main() -> oto::Result<()> {
    print!("{}", run_example()?);
    Ok(())
}
