#![allow(dead_code)]

use patchprobe::decoders::{DetHeadConfig, HeadConfig, ModelConfig, PatchModel, SegHeadConfig, Task};
use patchprobe::encoder::{encode_image, ArchiveWriter, Encoder, FeatureArchive, MockEncoder};
use patchprobe::synth::{signal_squares, SceneConfig, SyntheticSet};
use patchprobe::training::TrainConfig;

pub const CHANNELS: usize = 32;

/// `n` signal-square scenes and an in-memory archive with original and mirrored entries.
pub fn fixture(n: usize, seed: u64) -> (SyntheticSet, FeatureArchive) {
    let set = signal_squares(n, &SceneConfig { seed, ..Default::default() });
    let enc = MockEncoder::new(CHANNELS);
    let mut w = ArchiveWriter::new(enc.spec().clone(), "train");
    for (id, img) in &set.images {
        let (m, f) = encode_image(&enc, img, *id, img.width().max(img.height()), true).unwrap();
        w.push(&m, false).unwrap();
        w.push(&f.unwrap(), true).unwrap();
    }
    let archive = FeatureArchive::from_bytes(&w.finish()).unwrap();
    (set, archive)
}

/// Narrow heads that train in seconds on the fixture.
pub fn small_config(task: Task) -> ModelConfig {
    let mut cfg = ModelConfig::for_task(task, CHANNELS, 1);
    cfg.stem.adapted_dim = 32;
    cfg.head = match task {
        Task::Seg => HeadConfig::Seg(SegHeadConfig { in_dim: 32, stage_channels: [16, 8, 8, 8] }),
        Task::Det => HeadConfig::Det(DetHeadConfig { in_dim: 32, hidden_dim: 32, num_classes: 1 }),
    };
    cfg
}

/// Optimizer settings for the overfit runs.
pub fn overfit_train_config(max_steps: usize) -> TrainConfig {
    TrainConfig { epochs: 10_000, batch_size: 4, lr: 1e-2, max_steps: Some(max_steps), ..Default::default() }
}

/// Largest relative error between the analytic gradient and central differences
/// over every parameter. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn max_fd_error(model: &PatchModel, objective: impl Fn(&PatchModel) -> (f64, Vec<f64>), h: f64, floor: f64) -> f64 {
    let (_, analytic) = objective(model);
    let base = model.flat_params();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_flat_params(&p).unwrap();
        let up = objective(&probe).0;
        p[i] = base[i] - h;
        probe.set_flat_params(&p).unwrap();
        let down = objective(&probe).0;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
