//! Fixtures shared by the pipeline benchmarks.

use hvrp_core::instances::{generate_instance, Instance};
use hvrp_core::model::{Ablation, Model, ModelConfig};
use hvrp_core::trainer::TrainConfig;

pub fn instances(n: usize, count: usize, seed: u64) -> Vec<Instance> {
    (0..count as u64)
        .map(|i| generate_instance(n, 30, seed + i).expect("valid generator arguments"))
        .collect()
}

pub fn model(hidden_dim: usize, ablation: Ablation) -> Model {
    let cfg = ModelConfig {
        hidden_dim,
        heads: 8,
        ablation,
        ..ModelConfig::default()
    };
    Model::new(cfg, 1).expect("valid model config")
}

/// One short epoch of the desk shape, scaled down in batch size.
pub fn step_config(batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        steps_per_epoch: 1,
        batch_size,
        val_size: batch_size,
        ..TrainConfig::desk()
    }
}
