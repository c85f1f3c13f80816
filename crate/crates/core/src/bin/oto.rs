use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oto::config::ExperimentConfig;
use oto::optim::trace_jsonl;
use oto::pipeline;

#[derive(Parser)]
#[command(name = "oto", about = "Group-sparse training and one-shot structured pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the zero-invariant group partition.
    Partition(Common),
    /// Train with the configured optimizer; writes the metric trace.
    Train(Common),
    /// Build the slim model from the trained checkpoint.
    Prune(Common),
    /// Zero-invariance and full/slim equivalence checks (oracle gap for group lasso).
    Verify(Common),
    /// Parameter and FLOPs counts.
    Flops(Common),
    /// Full pipeline; several configs run on parallel threads.
    Run {
        #[arg(long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> oto::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run_one(path: &PathBuf, seed: Option<u64>) -> oto::Result<String> {
    let cfg = load(path, seed)?;
    let s = pipeline::run_pipeline(&cfg)?;
    let mut text = format!("# {}\n", path.display());
    text.push_str(&trace_jsonl(&s.train.trace));
    if let Some(r) = &s.report {
        text.push_str(&r.to_jsonl());
    }
    if let Some(g) = &s.glasso {
        text.push_str(g);
        text.push('\n');
    }
    if let (Some(full), Some(slim)) = (s.train.holdout_accuracy, s.slim_holdout_accuracy) {
        text.push_str(&format!("holdout accuracy: full {full:.4}, slim {slim:.4}\n"));
    }
    Ok(text)
}

fn dispatch(cli: Cli) -> oto::Result<String> {
    match cli.command {
        Command::Partition(c) => pipeline::stage_partition(&load(&c.config, c.seed)?),
        Command::Train(c) => {
            let s = pipeline::stage_train(&load(&c.config, c.seed)?)?;
            let mut text = trace_jsonl(&s.trace);
            if let Some(a) = s.holdout_accuracy {
                text.push_str(&format!("holdout accuracy: {a:.4}\n"));
            }
            Ok(text)
        }
        Command::Prune(c) => pipeline::stage_prune(&load(&c.config, c.seed)?).map(|r| r.to_jsonl()),
        Command::Verify(c) => pipeline::stage_verify(&load(&c.config, c.seed)?),
        Command::Flops(c) => pipeline::stage_flops(&load(&c.config, c.seed)?),
        Command::Run { config, seed } => {
            let results: Vec<oto::Result<String>> = std::thread::scope(|s| {
                let handles: Vec<_> = config.iter().map(|p| s.spawn(move || run_one(p, seed))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            });
            let mut text = String::new();
            for r in results {
                text.push_str(&r?);
            }
            Ok(text)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
