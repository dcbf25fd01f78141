#![allow(dead_code)]

use maskclip_core::corpus::{generate_samples, Sample, SceneOptions};
use maskclip_core::objectives::Objective;
use maskclip_core::trainer::{Dataset, TrainConfig, Trainer};

/// Desk geometry with one narrow block per tower, for fast runs.
pub fn small_config(objective: Objective) -> TrainConfig {
    let mut c = TrainConfig {
        objective,
        epochs: 3,
        batch_size: 8,
        warmup_epochs: 1.0,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    c.model.vision.depth = 1;
    c.model.vision.width = 16;
    c.model.vision.heads = 2;
    c.model.text.depth = 1;
    c.model.text.width = 16;
    c.model.text.heads = 2;
    c.model.embed_dim = 8;
    c.ema.start = 0.9;
    c.ema.end = 0.99;
    c
}

pub fn samples(n: usize, seed: u64) -> Vec<Sample> {
    generate_samples(n, seed, &SceneOptions::default()).unwrap()
}

pub fn trainer(cfg: &TrainConfig, samples: &[Sample]) -> Trainer {
    Trainer::new(cfg.clone(), Dataset::from_samples(samples, &cfg.model).unwrap()).unwrap()
}
