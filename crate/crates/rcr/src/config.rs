//! Flat key-value run configuration (TOML), with command-line overrides.

use std::path::{Path, PathBuf};

use rcr_core::catalog::{CatalogConfig, PredictorConfig};
use rcr_core::recommender::ModelDims;
use rcr_core::trainer::{Mode, Schedule, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{RcrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // training
    pub mode: Mode,
    pub episodes: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub k: usize,
    pub lambda_att: f64,
    pub terminal_reward: f64,
    pub alpha: f64,
    pub lambda_max: f64,
    pub initial_lambda: f64,
    pub policy_rate: f64,
    pub discriminator_rate: f64,
    pub lambda_rate: f64,
    /// When set, every rate decays as `rate / (1 + episode / half_life)`.
    pub rate_half_life: Option<f64>,
    pub gate: bool,
    pub max_rejects: usize,
    pub discriminator_batch: usize,
    pub discriminator_steps: usize,
    pub discriminator_hidden: usize,
    pub buffer_capacity: usize,
    pub grad_clip: f64,
    pub baseline_rate: f64,
    pub discount: f64,
    pub entropy_bonus: f64,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub d_txt: usize,
    pub fusion: usize,
    pub d_s: usize,
    pub trunk: usize,
    pub text_pretrain_steps: usize,
    pub text_pretrain_batch: usize,
    pub text_pretrain_rate: f64,
    pub finetune_text: bool,
    pub stub_penalty: Option<f64>,

    // catalog
    pub items: usize,
    pub embed_dim: usize,
    pub noise_sigma: f64,
    pub embed_scale: f64,
    pub catalog_seed: u64,
    pub seen_fraction: f64,
    pub predictor_epochs: usize,
    pub predictor_rate: f64,
    /// Load the catalog from a file instead of generating it.
    pub catalog: Option<PathBuf>,
    pub templates: Option<PathBuf>,

    // evaluation and reports
    pub eval_sessions: usize,
    pub seeds: Vec<u64>,
    pub ablation_values: Vec<f64>,
    pub window: usize,
    pub out_dir: PathBuf,
    pub report_formats: Vec<ReportFormat>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let c = CatalogConfig::default();
        let p = PredictorConfig::default();
        Self {
            mode: t.mode,
            episodes: t.episodes,
            seed: t.seed,
            max_steps: t.max_steps,
            k: t.k,
            lambda_att: t.lambda_att,
            terminal_reward: t.terminal_reward,
            alpha: t.alpha,
            lambda_max: t.lambda_max,
            initial_lambda: t.initial_lambda,
            policy_rate: t.policy_rate.at(0),
            discriminator_rate: t.discriminator_rate.at(0),
            lambda_rate: t.lambda_rate.at(0),
            rate_half_life: None,
            gate: t.gate,
            max_rejects: t.max_rejects,
            discriminator_batch: t.discriminator_batch,
            discriminator_steps: t.discriminator_steps,
            discriminator_hidden: t.discriminator_hidden,
            buffer_capacity: t.buffer_capacity,
            grad_clip: t.grad_clip,
            baseline_rate: t.baseline_rate,
            discount: t.discount,
            entropy_bonus: t.entropy_bonus,
            token_dim: t.dims.token_dim,
            text_hidden: t.dims.text_hidden,
            d_txt: t.dims.d_txt,
            fusion: t.dims.fusion,
            d_s: t.dims.d_s,
            trunk: t.dims.trunk,
            text_pretrain_steps: t.text_pretrain_steps,
            text_pretrain_batch: t.text_pretrain_batch,
            text_pretrain_rate: t.text_pretrain_rate,
            finetune_text: t.finetune_text,
            stub_penalty: t.stub_penalty,
            items: c.n_items,
            embed_dim: c.embed_dim,
            noise_sigma: c.noise_sigma,
            embed_scale: c.embed_scale,
            catalog_seed: c.seed,
            seen_fraction: 0.8,
            predictor_epochs: p.epochs,
            predictor_rate: p.learning_rate,
            catalog: None,
            templates: None,
            eval_sessions: 100,
            seeds: vec![0, 1, 2],
            ablation_values: vec![0.01, 0.05, 1.0],
            window: 500,
            out_dir: PathBuf::from("runs/default"),
            report_formats: vec![ReportFormat::Json, ReportFormat::Csv],
        }
    }
}

fn schedule(rate: f64, half_life: Option<f64>) -> Schedule {
    match half_life {
        Some(h) => Schedule::InverseTime { rate, half_life: h },
        None => Schedule::constant(rate),
    }
}

impl RunConfig {
    /// Parses a TOML document, applies `key=value` overrides and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let cfg: RunConfig = merge_toml(text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| RcrError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is serialisable")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            episodes: self.episodes,
            seed: self.seed,
            max_steps: self.max_steps,
            k: self.k,
            lambda_att: self.lambda_att,
            terminal_reward: self.terminal_reward,
            alpha: self.alpha,
            lambda_max: self.lambda_max,
            initial_lambda: self.initial_lambda,
            policy_rate: schedule(self.policy_rate, self.rate_half_life),
            discriminator_rate: schedule(self.discriminator_rate, self.rate_half_life),
            lambda_rate: schedule(self.lambda_rate, self.rate_half_life),
            gate: self.gate,
            max_rejects: self.max_rejects,
            discriminator_batch: self.discriminator_batch,
            discriminator_steps: self.discriminator_steps,
            discriminator_hidden: self.discriminator_hidden,
            buffer_capacity: self.buffer_capacity,
            grad_clip: self.grad_clip,
            baseline_rate: self.baseline_rate,
            discount: self.discount,
            entropy_bonus: self.entropy_bonus,
            dims: ModelDims {
                token_dim: self.token_dim,
                text_hidden: self.text_hidden,
                d_txt: self.d_txt,
                fusion: self.fusion,
                d_s: self.d_s,
                trunk: self.trunk,
            },
            text_pretrain_steps: self.text_pretrain_steps,
            text_pretrain_batch: self.text_pretrain_batch,
            text_pretrain_rate: self.text_pretrain_rate,
            finetune_text: self.finetune_text,
            stub_penalty: self.stub_penalty,
        }
    }

    pub fn catalog_config(&self) -> CatalogConfig {
        CatalogConfig {
            n_items: self.items,
            embed_dim: self.embed_dim,
            noise_sigma: self.noise_sigma,
            embed_scale: self.embed_scale,
            seed: self.catalog_seed,
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            epochs: self.predictor_epochs,
            learning_rate: self.predictor_rate,
            seed: self.catalog_seed,
            ..PredictorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate().map_err(|e| RcrError::Config(e.to_string()))?;
        if !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            return Err(RcrError::Config(format!("seen_fraction {} must lie in (0, 1)", self.seen_fraction)));
        }
        if self.rate_half_life.is_some_and(|h| !(h > 0.0)) {
            return Err(RcrError::Config("rate_half_life must be positive".into()));
        }
        let max = i64::MAX as u64;
        if self.seed > max || self.catalog_seed > max || self.seeds.iter().any(|&s| s > max) {
            return Err(RcrError::Config(format!("seeds must not exceed {max}")));
        }
        if self.seeds.is_empty() {
            return Err(RcrError::Config("seeds must not be empty".into()));
        }
        if self.window == 0 {
            return Err(RcrError::Config("window must be positive".into()));
        }
        if self.ablation_values.iter().any(|v| !(*v >= 0.0)) {
            return Err(RcrError::Config("ablation values must be non-negative".into()));
        }
        Ok(())
    }

    pub fn wants(&self, format: ReportFormat) -> bool {
        self.report_formats.contains(&format)
    }
}

/// Deserialises a TOML document after applying `key=value` overrides.
pub fn merge_toml<T: DeserializeOwned>(text: &str, overrides: &[(String, String)]) -> Result<T> {
    let mut table: toml::Table = text.parse().map_err(|e| RcrError::Config(format!("{e}")))?;
    for (key, raw) in overrides {
        table.insert(key.clone(), parse_value(raw));
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| RcrError::Config(e.message().to_string()))
}

/// Reads `raw` as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_with_overrides(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml_with_overrides("episods = 3", &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn overrides_win_over_file_values() {
        let o = vec![("episodes".into(), "7".into()), ("mode".into(), "rl".into())];
        let c = RunConfig::from_toml_with_overrides("episodes = 3\nmode = \"rcr\"", &o).unwrap();
        assert_eq!(c.episodes, 7);
        assert_eq!(c.mode, Mode::Rl);
    }

    #[test]
    fn rate_ordering_is_a_config_error() {
        let e = RunConfig::from_toml_with_overrides("lambda_rate = 0.1", &[]).unwrap_err();
        assert!(matches!(e, RcrError::Config(_)));
    }
}
