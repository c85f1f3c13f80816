//! Writes a tiny IDX image/label pair, trains a conv net on it for a few
//! epochs, then round-trips the weights through a checkpoint file.

use std::path::Path;

use oto::arch::ModelBuilder;
use oto::checkpoint;
use oto::data::{encode_idx_images, encode_idx_labels, load_idx};
use oto::layers::{Activation, LossKind};
use oto::optim::{train_model, OptimizerKind, TrainConfig};
use oto::zig::{partition_zig, ZigOptions};
use oto::OtoError;

fn io<T>(path: &Path, r: std::io::Result<T>) -> oto::Result<T> {
    r.map_err(|source| OtoError::Io { path: path.to_path_buf(), source })
}

pub fn run_example() -> oto::Result<String> {
    let dir = std::env::temp_dir().join(format!("oto-idx-{}", std::process::id()));
    io(&dir, std::fs::create_dir_all(&dir))?;
    // Two classes: bright top half or bright bottom half.
    let (n, h, w) = (64, 6, 6);
    let mut pixels = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 2) as u8;
        labels.push(class);
        for r in 0..h {
            for c in 0..w {
                let lit = (r < h / 2) == (class == 0);
                pixels.push(if lit { 200 } else { ((i * 7 + r * 3 + c) % 40) as u8 });
            }
        }
    }
    let (images, label_file) = (dir.join("images.idx"), dir.join("labels.idx"));
    io(&images, std::fs::write(&images, encode_idx_images((n, h, w), &pixels)))?;
    io(&label_file, std::fs::write(&label_file, encode_idx_labels(&labels)))?;
    let data = load_idx(&images, &label_file)?;

    let mut model = ModelBuilder::new(&[1, h, w])
        .conv_bn(4, 3, 1, 1, Activation::Relu)
        .flatten()
        .linear(2)
        .loss(LossKind::SoftmaxCrossEntropy)
        .build(4)?;
    let p = partition_zig(&model, ZigOptions::default())?;
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        batch_size: 8,
        epochs: 5,
        alpha0: 0.05,
        ..TrainConfig::default()
    };
    let run = train_model(&mut model, &p, &data, &cfg)?;

    let path = dir.join("model.ckpt");
    checkpoint::save(&model, &path)?;
    let mut restored = ModelBuilder::new(&[1, h, w])
        .conv_bn(4, 3, 1, 1, Activation::Relu)
        .flatten()
        .linear(2)
        .loss(LossKind::SoftmaxCrossEntropy)
        .build_zeroed()?;
    checkpoint::load_into(&mut restored, &checkpoint::read(&path)?)?;
    let same = restored.flat_params() == model.flat_params();
    let acc = oto::pipeline::accuracy(&restored, &data)?;
    io(&dir, std::fs::remove_dir_all(&dir))?;
    Ok(format!(
        "{} samples {:?}, loss {:.4} -> {:.4}, restored weights identical: {same}, accuracy {acc:.3}\n",
        data.len(),
        data.sample_shape(),
        run.trace.first().map_or(f64::NAN, |r| r.loss),
        run.trace.last().map_or(f64::NAN, |r| r.loss)
    ))
}

#[allow(dead_code)]
fn main() -> oto::Result<()> {
    print!("{}", run_example()?);
    Ok(())
}
