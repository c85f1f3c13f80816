//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! model.input = 3x8x8
//! model.layers = convbn:8:3:1:1:relu, flatten, linear:10
//! dataset.kind = synthetic-classify
//! optimizer.kind = hspg
//! optimizer.alpha0 = 0.1
//! output.dir = out
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{parse_layers, parse_shape, LayerPlan};
use crate::error::{OtoError, Result};
use crate::layers::LossKind;
use crate::optim::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub input: Vec<usize>,
    pub layers: Vec<LayerPlan>,
    pub loss: LossKind,
    pub penalize_output: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    GroupLasso {
        groups: usize,
        group_size: usize,
        support: usize,
        samples: usize,
        noise: f64,
    },
    Blobs {
        classes: usize,
        dim: usize,
        samples: usize,
        separation: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        header: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSection {
    pub verify_inputs: usize,
    pub keep_one: bool,
    /// Random trials for the zero-invariance check in `verify`.
    pub zero_trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Absent for the flat group-lasso problem, which trains on a plain vector.
    pub model: Option<ModelSection>,
    pub dataset: DatasetSpec,
    /// Trailing samples held out for evaluation.
    pub holdout: usize,
    pub train: TrainConfig,
    pub prune: PruneSection,
    /// Group-lasso runs only: oracle stopping tolerance.
    pub oracle_tol: f64,
    pub output_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "seed",
    "model.input",
    "model.layers",
    "model.loss",
    "model.penalize_output",
    "dataset.kind",
    "dataset.groups",
    "dataset.group_size",
    "dataset.support",
    "dataset.samples",
    "dataset.noise",
    "dataset.classes",
    "dataset.dim",
    "dataset.separation",
    "dataset.images",
    "dataset.labels",
    "dataset.path",
    "dataset.header",
    "dataset.holdout",
    "optimizer.kind",
    "optimizer.alpha0",
    "optimizer.decay",
    "optimizer.lambda",
    "optimizer.epsilon",
    "optimizer.switch_epochs",
    "optimizer.batch",
    "optimizer.epochs",
    "oracle.tol",
    "prune.verify_inputs",
    "prune.keep_one",
    "prune.zero_trials",
    "output.dir",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(_, v)| v.as_str())
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| OtoError::Config(format!("line {line}: `{key}` has invalid value `{v}`"))),
        }
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| OtoError::Config(format!("missing key `{key}`")))
    }
}

fn parse_entries(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| OtoError::Config(format!("line {line_no}: expected `key = value`")))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(OtoError::Config(format!("line {line_no}: unknown key `{k}`")));
        }
        if map.insert(k.to_string(), (line_no, v.to_string())).is_some() {
            return Err(OtoError::Config(format!("line {line_no}: `{k}` given twice")));
        }
    }
    Ok(Entries { map })
}

fn existing(base: &Path, p: &str) -> Result<PathBuf> {
    let path = base.join(p);
    if !path.is_file() {
        return Err(OtoError::Config(format!("file {} does not exist", path.display())));
    }
    Ok(path)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OtoError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let e = parse_entries(text)?;
        let seed = e.get("seed", 0u64)?;

        let model = match e.raw("model.layers") {
            None => None,
            Some(layers) => Some(ModelSection {
                input: parse_shape(e.raw("model.input").ok_or_else(|| {
                    OtoError::Config("`model.layers` needs `model.input`".into())
                })?)
                .map_err(|err| OtoError::Config(format!("model.input: {err}")))?,
                layers: parse_layers(layers).map_err(|err| OtoError::Config(format!("model.layers: {err}")))?,
                loss: LossKind::parse(e.raw("model.loss").unwrap_or("ce"))
                    .map_err(|err| OtoError::Config(format!("model.loss: {err}")))?,
                penalize_output: e.get("model.penalize_output", false)?,
            }),
        };

        let kind = e.raw("dataset.kind").unwrap_or("synthetic-classify");
        let dataset = match kind {
            "synthetic-glasso" => DatasetSpec::GroupLasso {
                groups: e.get("dataset.groups", 40)?,
                group_size: e.get("dataset.group_size", 5)?,
                support: e.get("dataset.support", 10)?,
                samples: e.get("dataset.samples", 500)?,
                noise: e.get("dataset.noise", 0.01)?,
            },
            "synthetic-classify" => DatasetSpec::Blobs {
                classes: e.get("dataset.classes", 10)?,
                dim: e.get("dataset.dim", 32)?,
                samples: e.get("dataset.samples", 2000)?,
                separation: e.get("dataset.separation", 1.0)?,
            },
            "idx-files" | "idx" => DatasetSpec::Idx {
                images: existing(base, e.require("dataset.images")?)?,
                labels: existing(base, e.require("dataset.labels")?)?,
            },
            "csv" => DatasetSpec::Csv {
                path: existing(base, e.require("dataset.path")?)?,
                header: e.get("dataset.header", false)?,
            },
            other => {
                return Err(OtoError::Config(format!(
                    "unknown dataset.kind `{other}` (synthetic-glasso, synthetic-classify, idx-files, csv)"
                )))
            }
        };

        let train = TrainConfig {
            optimizer: OptimizerKind::parse(e.raw("optimizer.kind").unwrap_or("hspg"))?,
            batch_size: e.get("optimizer.batch", 32)?,
            epochs: e.get("optimizer.epochs", 10)?,
            alpha0: e.get("optimizer.alpha0", 0.1)?,
            decay: e.get("optimizer.decay", 1.0)?,
            lambda: e.get("optimizer.lambda", 1e-3)?,
            epsilon: e.get("optimizer.epsilon", 0.0)?,
            switch_epochs: e.get("optimizer.switch_epochs", 1)?,
            seed,
        };

        let cfg = ExperimentConfig {
            seed,
            model,
            dataset,
            holdout: e.get("dataset.holdout", 0)?,
            train,
            prune: PruneSection {
                verify_inputs: e.get("prune.verify_inputs", 100)?,
                keep_one: e.get("prune.keep_one", false)?,
                zero_trials: e.get("prune.zero_trials", 20)?,
            },
            oracle_tol: e.get("oracle.tol", 1e-10)?,
            output_dir: base.join(e.raw("output.dir").unwrap_or("out")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks on every numeric field; runs before any compute.
    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| OtoError::Config(e.to_string()))?;
        let bad = |m: String| Err(OtoError::Config(m));
        match &self.dataset {
            DatasetSpec::GroupLasso {
                groups,
                group_size,
                support,
                samples,
                noise,
            } => {
                if *groups == 0 || *group_size == 0 || *samples == 0 {
                    return bad("group lasso sizes must be positive".into());
                }
                if support > groups {
                    return bad(format!("dataset.support {support} exceeds dataset.groups {groups}"));
                }
                if !(*noise >= 0.0) {
                    return bad(format!("dataset.noise {noise} must be >= 0"));
                }
                if self.model.is_some() {
                    return bad("synthetic-glasso trains a plain vector; drop the model.* keys".into());
                }
            }
            DatasetSpec::Blobs {
                classes,
                dim,
                samples,
                separation,
            } => {
                if *classes < 2 || *dim == 0 || *samples == 0 {
                    return bad("blobs need dataset.classes >= 2, dim >= 1, samples >= 1".into());
                }
                if !(*separation >= 0.0) {
                    return bad(format!("dataset.separation {separation} must be >= 0"));
                }
            }
            DatasetSpec::Idx { .. } | DatasetSpec::Csv { .. } => {}
        }
        if !matches!(self.dataset, DatasetSpec::GroupLasso { .. }) && self.model.is_none() {
            return bad("model.layers is required for this dataset".into());
        }
        if !(self.oracle_tol > 0.0) {
            return bad(format!("oracle.tol {} must be > 0", self.oracle_tol));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "
# toy run
seed = 3
model.input = 16
model.layers = linear:8, act:relu, linear:4
dataset.kind = synthetic-classify
dataset.classes = 4
dataset.dim = 16
optimizer.alpha0 = 0.05   # trailing comment
optimizer.epochs = 2
";

    #[test]
    fn parses_defaults_and_overrides() {
        let c = ExperimentConfig::parse(BASIC, Path::new("/tmp")).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.train.alpha0, 0.05);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.model.as_ref().unwrap().layers.len(), 3);
        assert_eq!(c.output_dir, Path::new("/tmp/out"));
        assert_eq!(c.with_seed(9).train.seed, 9);
    }

    #[test]
    fn rejects_out_of_range_values() {
        for extra in [
            "optimizer.epsilon = 1.0",
            "optimizer.lambda = -1",
            "optimizer.alpha0 = 0",
            "optimizer.batch = 0",
            "optimizer.decay = 1.5",
        ] {
            let text = format!("{BASIC}\n{extra}\n");
            let err = ExperimentConfig::parse(&text, Path::new(".")).unwrap_err();
            assert!(matches!(err, OtoError::Config(_)), "{extra}: {err}");
        }
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(ExperimentConfig::parse("optimizer.alpha = 1", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("seed 1", Path::new(".")).is_err());
    }

    #[test]
    fn missing_files_fail_at_load() {
        let text = "model.input = 1x2x2\nmodel.layers = flatten, linear:2\ndataset.kind = idx-files\n\
                    dataset.images = nope.idx\ndataset.labels = nope.idx\n";
        let err = ExperimentConfig::parse(text, Path::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn glasso_needs_no_model() {
        let c = ExperimentConfig::parse("dataset.kind = synthetic-glasso\n", Path::new(".")).unwrap();
        assert!(c.model.is_none());
        assert!(ExperimentConfig::parse("dataset.kind = csv\ndataset.path = x", Path::new("/nonexistent")).is_err());
    }
}
