#![allow(dead_code)]

use bridge_core::behavior::ResidualKind;
use bridge_core::pipeline::{Pipeline, PipelineOptions};
use bridge_core::synth::{make_planted, PlantedConfig};
use bridge_core::trainer::TrainConfig;

/// Planted fixture used by the ablation and determinism checks.
pub fn fixture(seed: u64) -> PlantedConfig {
    PlantedConfig::new(200, 100, 5, 0.1, seed)
}

pub fn pipeline(cfg: &PlantedConfig, opts: &PipelineOptions) -> Pipeline {
    Pipeline::build(make_planted(cfg).expect("planted dataset"), opts).expect("pipeline")
}

/// 5 users, 8 items, two clusters of four.
pub fn tiny_pipeline(behavior: ResidualKind) -> Pipeline {
    let mut cfg = PlantedConfig::new(5, 8, 2, 0.0, 11);
    cfg.interactions_per_user = 4;
    cfg.visual_extra = 2;
    cfg.text_extra = 3;
    let opts = PipelineOptions {
        item_knn_k: 3,
        behavior,
        ..Default::default()
    };
    pipeline(&cfg, &opts)
}

/// Short-run training settings for the planted fixture.
pub fn fixture_train_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        batch_size: 256,
        epochs,
        seed,
        dim: 32,
        k_c_train: 20,
        k_c_eval: 20,
        ..Default::default()
    }
}

pub fn report(name: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
