//! The whole pipeline from a config file: partition, train, prune, verify.
//! Artifacts land in a temporary directory.

use std::path::Path;

use oto::config::ExperimentConfig;
use oto::pipeline::{run_pipeline, stage_flops, stage_verify};

pub fn run_example() -> oto::Result<String> {
    let text = include_str!("configs/mlp_blobs.cfg");
    let dir = std::env::temp_dir().join(format!("oto-mlp-blobs-{}", std::process::id()));
    let cfg = ExperimentConfig::parse(text, Path::new(&dir))?;
    let s = run_pipeline(&cfg)?;
    let last = s.train.trace.last().expect("trained");
    let report = s.report.expect("model run");
    let mut out = format!(
        "final epoch {}: loss {:.4}, group sparsity {:.1}%\nflops {} -> {}\n",
        last.epoch,
        last.loss,
        last.group_sparsity * 100.0,
        report.before.flops,
        report.after.flops
    );
    out.push_str(&format!(
        "holdout accuracy: full {:.4}, slim {:.4}\n",
        s.train.holdout_accuracy.unwrap_or(f64::NAN),
        s.slim_holdout_accuracy.unwrap_or(f64::NAN)
    ));
    for text in [stage_verify(&cfg)?, stage_flops(&cfg)?] {
        out.push_str(text.trim_end());
        out.push('\n');
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(out)
}

#[allow(dead_code)]
fn main() -> oto::Result<()> {
    print!("{}", run_example()?);
    Ok(())
}
