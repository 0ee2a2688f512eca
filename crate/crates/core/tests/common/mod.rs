#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use replaylens::model::{Checkpoint, ModelConfig, MultimodalSequence};

pub fn tiny_config(layers: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_model,
        heads: 2,
        vocab: 16,
        max_seq: 10,
        visual_dim: 4,
        d_ff: 2 * d_model,
    }
}

pub fn random_sequence(cfg: &ModelConfig, visual: usize, text: usize, seed: u64) -> MultimodalSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultimodalSequence {
        visual: (0..visual)
            .map(|_| (0..cfg.visual_dim).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect(),
        text: (0..text).map(|_| rng.random_range(0..cfg.vocab)).collect(),
        answer: None,
    }
}

/// Same architecture, independently initialized: a pair whose lens
/// distributions differ everywhere.
pub fn random_pair(cfg: &ModelConfig, seed: u64) -> (Checkpoint, Checkpoint) {
    (
        Checkpoint::init(cfg, seed).unwrap(),
        Checkpoint::init(cfg, seed.wrapping_add(1000)).unwrap(),
    )
}
