//! Config-driven stages: partition, train, prune, verify, flops and the full
//! run. Every stage reads and writes artifacts in the configured output
//! directory, so each can be invoked on its own.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::arch::{parse_layers, ModelBuilder};
use crate::checkpoint;
use crate::config::{DatasetSpec, ExperimentConfig, ModelSection};
use crate::data::{generate_blobs, generate_group_lasso, load_csv, load_idx, Dataset, GroupLassoData};
use crate::error::{OtoError, Result};
use crate::layers::Targets;
use crate::model::ModelGraph;
use crate::optim::{least_squares_objective, train, train_model, trace_jsonl, EpochRecord, LeastSquares};
use crate::oracle::bcd_oracle;
use crate::prune::{count_flops_params, equivalence_check, prune, ModelCost, PruneOptions, PruneReport};
use crate::regularizer::sparsity_metrics;
use crate::tensor::Tensor;
use crate::zig::{partition_zig, verify_zero_invariance, GroupPartition, ZigOptions};

pub const PARTITION_FILE: &str = "partition.tsv";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const FULL_CKPT: &str = "full.ckpt";
pub const SLIM_CKPT: &str = "slim.ckpt";
pub const SLIM_ARCH: &str = "slim.arch";
pub const REPORT_FILE: &str = "prune_report.jsonl";
pub const GLASSO_REPORT: &str = "glasso_report.jsonl";
pub const GLASSO_CKPT: &str = "solution.ckpt";

fn out(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| OtoError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| OtoError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| OtoError::io(path, e))
}

fn model_section(cfg: &ExperimentConfig) -> Result<&ModelSection> {
    cfg.model
        .as_ref()
        .ok_or_else(|| OtoError::Config("this stage needs model.layers".into()))
}

/// Freshly initialized model from the config, seeded by the run seed.
pub fn build_model(cfg: &ExperimentConfig) -> Result<ModelGraph<f32>> {
    let m = model_section(cfg)?;
    ModelBuilder::from_plans(&m.input, m.layers.clone(), m.loss).build(cfg.seed)
}

fn zig_options(cfg: &ExperimentConfig) -> ZigOptions {
    ZigOptions {
        penalize_output_layer: cfg.model.as_ref().is_some_and(|m| m.penalize_output),
    }
}

/// Training split and optional holdout (the trailing `holdout` samples).
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let data = match &cfg.dataset {
        DatasetSpec::Blobs {
            classes,
            dim,
            samples,
            separation,
        } => generate_blobs(*classes, *dim, *samples, *separation, cfg.seed)?,
        DatasetSpec::Idx { images, labels } => load_idx(images, labels)?,
        DatasetSpec::Csv { path, header } => load_csv(path, *header)?,
        DatasetSpec::GroupLasso { .. } => glasso_data(cfg)?.to_dataset(),
    };
    if cfg.holdout == 0 {
        return Ok((data, None));
    }
    let n = data.len();
    if cfg.holdout >= n {
        return Err(OtoError::Config(format!("dataset.holdout {} leaves no training data ({n} samples)", cfg.holdout)));
    }
    let (a, b) = data.split_at(n - cfg.holdout)?;
    Ok((a, Some(b)))
}

fn glasso_data(cfg: &ExperimentConfig) -> Result<GroupLassoData> {
    match cfg.dataset {
        DatasetSpec::GroupLasso {
            groups,
            group_size,
            support,
            samples,
            noise,
        } => generate_group_lasso(groups, group_size, support, samples, noise, cfg.seed),
        _ => Err(OtoError::Config("not a synthetic-glasso config".into())),
    }
}

/// Fraction of correctly classified samples (argmax of the output).
pub fn accuracy(model: &ModelGraph<f32>, data: &Dataset) -> Result<f64> {
    let Targets::Classes(labels) = &data.targets else {
        return Err(OtoError::InvalidArgument("accuracy needs class labels".into()));
    };
    let out = model.predict(&data.inputs)?;
    let k = out.last_extent();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &out.data()[i * k..(i + 1) * k];
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
            best == Some(y)
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn partition_for(cfg: &ExperimentConfig, model: Option<&ModelGraph<f32>>) -> Result<GroupPartition> {
    match (&cfg.dataset, model) {
        (DatasetSpec::GroupLasso { groups, group_size, .. }, _) => {
            Ok(GroupPartition::contiguous_blocks(*groups, *group_size))
        }
        (_, Some(m)) => partition_zig(m, zig_options(cfg)),
        (_, None) => partition_zig(&build_model(cfg)?, zig_options(cfg)),
    }
}

/// Writes the group partition as text and returns it.
pub fn stage_partition(cfg: &ExperimentConfig) -> Result<String> {
    let run = || -> Result<String> {
        let text = match &cfg.model {
            Some(_) => {
                let model = build_model(cfg)?;
                partition_for(cfg, Some(&model))?.to_text(Some(&model))
            }
            None => partition_for(cfg, None)?.to_text::<f32>(None),
        };
        write(&out(cfg, PARTITION_FILE), &text)?;
        Ok(text)
    };
    run().map_err(|e| e.in_stage("partition"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub trace: Vec<EpochRecord>,
    pub violations: usize,
    pub holdout_accuracy: Option<f64>,
}

/// Trains from the seeded initialization; writes the trace and the full
/// checkpoint (or the solution vector for group lasso).
pub fn stage_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let run = || -> Result<TrainSummary> {
        if cfg.model.is_none() {
            let data = glasso_data(cfg)?;
            let partition = partition_for(cfg, None)?;
            let mut obj = LeastSquares { data: &data };
            let outcome = train(&mut obj, &partition, vec![0.0; data.dim()], &cfg.train)?;
            write(&out(cfg, TRACE_FILE), trace_jsonl(&outcome.trace))?;
            let x = Tensor::new(vec![outcome.x.len()], outcome.x.iter().map(|&v| v as f32).collect())?;
            write(&out(cfg, GLASSO_CKPT), checkpoint::encode(&[("x".to_string(), &x)]))?;
            return Ok(TrainSummary {
                trace: outcome.trace,
                violations: outcome.audit.violations(),
                holdout_accuracy: None,
            });
        }
        let mut model = build_model(cfg)?;
        let partition = partition_for(cfg, Some(&model))?;
        let (train_set, holdout) = load_dataset(cfg)?;
        let outcome = train_model(&mut model, &partition, &train_set, &cfg.train)?;
        write(&out(cfg, TRACE_FILE), trace_jsonl(&outcome.trace))?;
        checkpoint::save(&model, &out(cfg, FULL_CKPT))?;
        let holdout_accuracy = match &holdout {
            Some(h) if matches!(h.targets, Targets::Classes(_)) => Some(accuracy(&model, h)?),
            _ => None,
        };
        Ok(TrainSummary {
            trace: outcome.trace,
            violations: outcome.audit.violations(),
            holdout_accuracy,
        })
    };
    run().map_err(|e| e.in_stage("train"))
}

fn load_full(cfg: &ExperimentConfig) -> Result<ModelGraph<f32>> {
    let mut model = build_model(cfg)?;
    let arrays = checkpoint::read(&out(cfg, FULL_CKPT))?;
    checkpoint::load_into(&mut model, &arrays)?;
    Ok(model)
}

fn load_slim(cfg: &ExperimentConfig) -> Result<ModelGraph<f32>> {
    let m = model_section(cfg)?;
    let plans = parse_layers(read_text(&out(cfg, SLIM_ARCH))?.trim())?;
    let mut slim = ModelBuilder::from_plans(&m.input, plans, m.loss).build_zeroed()?;
    checkpoint::load_into(&mut slim, &checkpoint::read(&out(cfg, SLIM_CKPT))?)?;
    Ok(slim)
}

/// Builds the slim model from the trained checkpoint; writes the slim
/// checkpoint, its architecture and the report.
pub fn stage_prune(cfg: &ExperimentConfig) -> Result<PruneReport> {
    let run = || -> Result<PruneReport> {
        let full = load_full(cfg)?;
        let partition = partition_for(cfg, Some(&full))?;
        let (slim, mut report) = prune(
            &full,
            &partition,
            PruneOptions {
                keep_one: cfg.prune.keep_one,
            },
        )?;
        report.max_deviation = Some(equivalence_check(&full, &slim, cfg.prune.verify_inputs, cfg.seed)?);
        checkpoint::save(&slim, &out(cfg, SLIM_CKPT))?;
        write(&out(cfg, SLIM_ARCH), format!("{}\n", report.architecture))?;
        write(&out(cfg, REPORT_FILE), report.to_jsonl())?;
        Ok(report)
    };
    run().map_err(|e| e.in_stage("prune"))
}

/// Model runs: zero-invariance trials and full/slim equivalence. Group-lasso
/// runs: comparison with the block coordinate descent oracle.
pub fn stage_verify(cfg: &ExperimentConfig) -> Result<String> {
    let run = || -> Result<String> {
        if cfg.model.is_none() {
            return verify_glasso(cfg);
        }
        let model = build_model(cfg)?;
        let partition = partition_for(cfg, Some(&model))?;
        let zero_invariance = verify_zero_invariance(&model, &partition, cfg.prune.zero_trials, cfg.seed)?;
        let equivalence = if out(cfg, SLIM_CKPT).is_file() {
            let full = load_full(cfg)?;
            let slim = load_slim(cfg)?;
            Some(equivalence_check(&full, &slim, cfg.prune.verify_inputs, cfg.seed)?)
        } else {
            None
        };
        Ok(json!({
            "record": "verify",
            "zero_invariance_max": zero_invariance,
            "equivalence_max": equivalence,
        })
        .to_string())
    };
    run().map_err(|e| e.in_stage("verify"))
}

fn verify_glasso(cfg: &ExperimentConfig) -> Result<String> {
    let data = glasso_data(cfg)?;
    let partition = partition_for(cfg, None)?;
    let arrays = checkpoint::read(&out(cfg, GLASSO_CKPT))?;
    let x: Vec<f64> = match arrays.as_slice() {
        [(name, t)] if name == "x" && t.numel() == data.dim() => t.data().iter().map(|&v| v as f64).collect(),
        _ => return Err(OtoError::Structural("solution checkpoint does not match the problem".into())),
    };
    let lambda = cfg.train.lambda;
    let oracle = bcd_oracle(&data, &partition, lambda, cfg.oracle_tol, 1_000_000)?;
    let psi = least_squares_objective(&data, &partition, lambda, &x);
    let support: Vec<usize> = partition
        .groups()
        .iter()
        .filter(|g| g.flat().iter().any(|&i| x[i] != 0.0))
        .map(|g| g.id)
        .collect();
    let oracle_support = oracle.support(&partition);
    let text = json!({
        "record": "glasso",
        "lambda": lambda,
        "objective": psi,
        "oracle_objective": oracle.objective,
        "relative_gap": (psi - oracle.objective) / oracle.objective.abs(),
        "support": support,
        "oracle_support": oracle_support,
        "planted_support": data.support,
        "support_matches": support == oracle_support,
        "zero_groups": sparsity_metrics(&x, &partition).zero_groups,
    })
    .to_string();
    write(&out(cfg, GLASSO_REPORT), format!("{text}\n"))?;
    Ok(text)
}

fn cost_line(label: &str, c: &ModelCost) -> String {
    format!("{label}\tparams={}\tbuffers={}\tflops={}", c.params, c.buffers, c.flops)
}

/// Cost of the configured model, and of the slim model if one was written.
pub fn stage_flops(cfg: &ExperimentConfig) -> Result<String> {
    let run = || -> Result<String> {
        let full = build_model(cfg)?;
        let before = count_flops_params(&full);
        let mut text = cost_line("full", &before);
        if out(cfg, SLIM_ARCH).is_file() {
            let after = count_flops_params(&load_slim(cfg)?);
            text.push('\n');
            text.push_str(&cost_line("slim", &after));
            text.push_str(&format!(
                "\nratio\tparams={:.4}\tflops={:.4}",
                after.params as f64 / before.params as f64,
                after.flops as f64 / before.flops as f64
            ));
        }
        Ok(text)
    };
    run().map_err(|e| e.in_stage("flops"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub train: TrainSummary,
    pub report: Option<PruneReport>,
    pub slim_holdout_accuracy: Option<f64>,
    /// Group-lasso runs: the verify record.
    pub glasso: Option<String>,
}

/// partition -> train -> prune (with equivalence check and counts).
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunSummary> {
    stage_partition(cfg)?;
    let train = stage_train(cfg)?;
    if cfg.model.is_none() {
        let glasso = stage_verify(cfg)?;
        return Ok(RunSummary {
            train,
            report: None,
            slim_holdout_accuracy: None,
            glasso: Some(glasso),
        });
    }
    let report = stage_prune(cfg)?;
    let slim_holdout_accuracy = match train.holdout_accuracy {
        Some(_) => {
            let slim = load_slim(cfg).map_err(|e| e.in_stage("prune"))?;
            let (_, holdout) = load_dataset(cfg).map_err(|e| e.in_stage("prune"))?;
            Some(accuracy(&slim, holdout.as_ref().expect("holdout")).map_err(|e| e.in_stage("prune"))?)
        }
        None => None,
    };
    Ok(RunSummary {
        train,
        report: Some(report),
        slim_holdout_accuracy,
        glasso: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path, extra: &str) -> ExperimentConfig {
        let text = format!(
            "seed = 4\nmodel.input = 6\nmodel.layers = linear:5, act:relu, linear:3\n\
             dataset.kind = synthetic-classify\ndataset.classes = 3\ndataset.dim = 6\n\
             dataset.samples = 60\ndataset.holdout = 12\noptimizer.batch = 8\n\
             optimizer.lambda = 0.05\nprune.verify_inputs = 10\nprune.zero_trials = 3\n{extra}"
        );
        ExperimentConfig::parse(&text, dir).unwrap()
    }

    #[test]
    fn zero_epochs_prunes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), "optimizer.epochs = 0\n");
        let s = run_pipeline(&c).unwrap();
        assert!(s.train.trace.is_empty());
        let r = s.report.unwrap();
        assert!(r.zero_groups.is_empty());
        assert_eq!(r.before, r.after);
        assert_eq!(r.max_deviation, Some(0.0));
        assert_eq!(load_slim(&c).unwrap(), load_full(&c).unwrap());
    }

    #[test]
    fn stages_chain_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), "optimizer.epochs = 3\n");
        assert!(stage_prune(&c).unwrap_err().to_string().contains("stage `prune`"));
        stage_partition(&c).unwrap();
        stage_train(&c).unwrap();
        stage_prune(&c).unwrap();
        let v = stage_verify(&c).unwrap();
        assert!(v.contains("\"zero_invariance_max\":0.0"), "{v}");
        assert!(stage_flops(&c).unwrap().contains("slim"));
    }

    #[test]
    fn glasso_run_reports_against_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::parse(
            "dataset.kind = synthetic-glasso\ndataset.groups = 6\ndataset.group_size = 2\n\
             dataset.support = 2\ndataset.samples = 80\noptimizer.batch = 8\noptimizer.epochs = 5\n\
             optimizer.lambda = 0.05\n",
            dir.path(),
        )
        .unwrap();
        let s = run_pipeline(&c).unwrap();
        let v: serde_json::Value = serde_json::from_str(s.glasso.as_ref().unwrap()).unwrap();
        assert_eq!(v["record"], "glasso");
        assert!(v["relative_gap"].as_f64().unwrap().is_finite());
    }
}
