#![allow(dead_code)]

use std::path::Path;

use rcr::config::RunConfig;
use rcr::pipeline;

pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml_with_overrides("items = 150\nepisodes = 40\nseed = 3\nmax_steps = 20", &[]).unwrap()
}

/// Trains a small RCR model into `dir`.
pub fn tiny_model_dir(dir: &Path) -> RunConfig {
    let cfg = tiny_config();
    let (catalog, sim) = pipeline::prepare(&cfg).unwrap();
    let out = pipeline::train(&cfg, &catalog, &sim).unwrap();
    pipeline::save_model_dir(dir, &cfg, &catalog, &sim, &out).unwrap();
    cfg
}
