use std::path::Path;
use std::process::{Command, Output};

const MLP: &str = "seed = 2
model.input = 6
model.layers = linear:12, act:relu, linear:3
dataset.kind = synthetic-classify
dataset.classes = 3
dataset.dim = 6
dataset.samples = 200
dataset.holdout = 40
optimizer.batch = 16
optimizer.epochs = 6
optimizer.switch_epochs = 2
optimizer.lambda = 0.1
output.dir = out
";

fn oto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oto")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn stages_run_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mlp.cfg", MLP);
    let part = stdout(&oto(&["partition", "--config", &cfg]));
    assert!(part.contains("layer0/row0\tpenalized"));
    assert!(part.contains("layer2/row0\tunpenalized"));

    let train = stdout(&oto(&["train", "--config", &cfg]));
    assert_eq!(train.lines().filter(|l| l.starts_with('{')).count(), 6);
    assert!(train.contains("\"stage\":\"half-space\""));

    let prune = stdout(&oto(&["prune", "--config", &cfg]));
    assert!(prune.lines().next().unwrap().contains("\"record\":\"prune\""));
    let verify = stdout(&oto(&["verify", "--config", &cfg]));
    assert!(verify.contains("\"zero_invariance_max\":0.0"), "{verify}");
    let flops = stdout(&oto(&["flops", "--config", &cfg]));
    assert!(flops.starts_with("full\tparams="));
    for f in ["partition.tsv", "trace.jsonl", "full.ckpt", "slim.ckpt", "prune_report.jsonl"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn seed_override_changes_the_run_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mlp.cfg", MLP);
    let a = stdout(&oto(&["train", "--config", &cfg, "--seed", "5"]));
    let b = stdout(&oto(&["train", "--config", &cfg, "--seed", "5"]));
    let c = stdout(&oto(&["train", "--config", &cfg, "--seed", "6"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn run_accepts_several_configs() {
    let dir = tempfile::tempdir().unwrap();
    let one = write_config(dir.path(), "a.cfg", MLP);
    let two = write_config(
        dir.path(),
        "b.cfg",
        "dataset.kind = synthetic-glasso\ndataset.groups = 6\ndataset.group_size = 2\n\
         dataset.support = 2\ndataset.samples = 60\noptimizer.epochs = 5\noptimizer.batch = 6\n\
         optimizer.switch_epochs = 1\noptimizer.lambda = 0.01\noutput.dir = glasso\n",
    );
    let out = stdout(&oto(&["run", "--config", &one, &two]));
    assert!(out.contains("a.cfg") && out.contains("b.cfg"));
    assert!(out.contains("holdout accuracy"));
    assert!(dir.path().join("glasso/solution.ckpt").exists());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = oto(&["train", "--config", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let bad = write_config(dir.path(), "bad.cfg", &format!("{MLP}optimizer.bogus = 1\n"));
    let o = oto(&["partition", "--config", &bad]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("optimizer.bogus"));

    // prune before train: no checkpoint yet
    let fresh = write_config(dir.path(), "fresh.cfg", &MLP.replace("output.dir = out", "output.dir = fresh"));
    let o = oto(&["prune", "--config", &fresh]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("prune"));
}
