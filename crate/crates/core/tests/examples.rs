// Each example compiled as a module and run once.

#[path = "../examples/zig_partition.rs"]
mod zig_partition;

#[test]
fn zig_partition_runs() {
    let out = zig_partition::run_example().unwrap();
    assert!(out.contains("zeroed slices: 0e0"), "{out}");
    assert!(out.contains("unpenalized"), "{out}");
}

#[path = "../examples/gradient_check.rs"]
mod gradient_check;

#[test]
fn gradient_check_runs() {
    let out = gradient_check::run_example().unwrap();
    assert!(out.contains("cnn/ce"), "{out}");
}

#[path = "../examples/group_lasso_oracle.rs"]
mod group_lasso_oracle;

#[test]
fn group_lasso_oracle_runs() {
    let out = group_lasso_oracle::run_example().unwrap();
    assert!(out.contains("30 zero groups"), "{out}");
}

#[path = "../examples/hspg_vs_proxsg.rs"]
mod hspg_vs_proxsg;

#[test]
fn hspg_vs_proxsg_runs() {
    let out = hspg_vs_proxsg::run_example().unwrap();
    assert!(out.contains("prox-sg: 0 of 40"), "{out}");
    assert!(out.contains("hspg: 30 of 40"), "{out}");
}

#[path = "../examples/prune_toy_cnn.rs"]
mod prune_toy_cnn;

#[test]
fn prune_toy_cnn_runs() {
    let out = prune_toy_cnn::run_example().unwrap();
    assert!(out.contains("max output deviation 0e0"), "{out}");
}

#[path = "../examples/mlp_blobs.rs"]
mod mlp_blobs;

#[test]
fn mlp_blobs_runs() {
    let out = mlp_blobs::run_example().unwrap();
    assert!(out.contains("\"equivalence_max\":0.0"), "{out}");
    assert!(out.contains("flops"), "{out}");
}

#[path = "../examples/idx_checkpoint.rs"]
mod idx_checkpoint;

#[test]
fn idx_checkpoint_runs() {
    let out = idx_checkpoint::run_example().unwrap();
    assert!(out.contains("restored weights identical: true"), "{out}");
}
