//! Catalog preparation, training runs and model directories.

use std::path::{Path, PathBuf};

use rcr_core::catalog::{generate_catalog, split_seen_unseen, train_attribute_predictor, AttributeSchema, Catalog};
use rcr_core::constraint::Discriminator;
use rcr_core::numkit::ParamSet;
use rcr_core::recommender::Recommender;
use rcr_core::trainer::{run_training, summarize, Mode, TrainOutcome};
use rcr_core::user_sim::UserSimulator;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{RcrError, Result};
use crate::formats;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const TEMPLATES_FILE: &str = "templates.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BUFFER_FILE: &str = "buffer.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Generates (or loads) the catalog, splits it, installs predicted retrieval
/// attributes and builds the simulator.
pub fn prepare(config: &RunConfig) -> Result<(Catalog, UserSimulator)> {
    let catalog = match &config.catalog {
        Some(path) => formats::read_catalog(path)?,
        None => {
            let raw = generate_catalog(&AttributeSchema::default(), &config.catalog_config())?;
            let split = split_seen_unseen(&raw, config.seen_fraction, config.catalog_seed)?;
            let (predictor, _) = train_attribute_predictor(&split, &config.predictor_config())?;
            split.with_predictions(&predictor)
        }
    };
    let sim = match &config.templates {
        Some(path) => UserSimulator::with_templates(catalog.schema(), formats::read_templates(path, catalog.schema())?)?,
        None => UserSimulator::new(catalog.schema())?,
    };
    Ok((catalog, sim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub episodes: usize,
    pub seed: u64,
    pub final_lambda: f64,
    pub text_accuracy: f64,
    pub pairs: usize,
    pub last_window: String,
}

pub fn train(config: &RunConfig, catalog: &Catalog, sim: &UserSimulator) -> Result<TrainOutcome> {
    Ok(run_training(&config.train_config(), catalog, sim)?)
}

/// Writes everything needed to reload and serve a trained model.
pub fn save_model_dir(dir: &Path, config: &RunConfig, catalog: &Catalog, sim: &UserSimulator, out: &TrainOutcome) -> Result<TrainSummary> {
    std::fs::create_dir_all(dir).map_err(|e| RcrError::io(dir, e))?;
    formats::write_text(&dir.join(CONFIG_FILE), &config.to_toml())?;
    let mut params = out.model.params.clone();
    if let Some(d) = &out.discriminator {
        for (name, value) in d.params.entries() {
            params.add(name, value.clone())?;
        }
    }
    formats::write_checkpoint(&dir.join(CHECKPOINT_FILE), &params)?;
    formats::write_catalog(&dir.join(CATALOG_FILE), catalog)?;
    formats::write_templates(&dir.join(TEMPLATES_FILE), sim.templates(), catalog.schema())?;
    formats::write_metrics(&dir.join(METRICS_FILE), &out.log)?;
    if out.discriminator.is_some() {
        formats::write_buffer(&dir.join(BUFFER_FILE), &out.buffer)?;
    }
    let summary = TrainSummary {
        mode: config.mode,
        episodes: out.log.rows.len(),
        seed: config.seed,
        final_lambda: out.lagrange.lambda,
        text_accuracy: out.text_accuracy,
        pairs: out.buffer.len(),
        last_window: summarize(&out.log, config.window),
    };
    formats::write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// A trained model loaded from its directory.
pub struct LoadedModel {
    pub id: String,
    pub dir: PathBuf,
    pub config: RunConfig,
    pub catalog: Catalog,
    pub sim: UserSimulator,
    pub model: Recommender,
    pub discriminator: Option<Discriminator>,
}

fn select(params: &ParamSet, prefixes: &[&str]) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for p in prefixes {
        for (name, value) in params.subset(p).entries() {
            out.add(name, value.clone())?;
        }
    }
    Ok(out)
}

pub fn load_model_dir(dir: &Path) -> Result<LoadedModel> {
    let text = formats::read_text(&dir.join(CONFIG_FILE))?;
    let config = RunConfig::from_toml_with_overrides(&text, &[])?;
    let catalog = formats::read_catalog(&dir.join(CATALOG_FILE))?;
    let templates = formats::read_templates(&dir.join(TEMPLATES_FILE), catalog.schema())?;
    let sim = UserSimulator::with_templates(catalog.schema(), templates)?;
    let params = formats::read_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let model = Recommender::from_params(select(&params, &["text_encoder.", "tracker.", "policy."])?, &catalog)
        .map_err(|e| RcrError::format(dir.join(CHECKPOINT_FILE), e))?;
    let disc_params = params.subset("discriminator.");
    let discriminator = if disc_params.is_empty() {
        None
    } else {
        Some(Discriminator::from_params(disc_params).map_err(|e| RcrError::format(dir.join(CHECKPOINT_FILE), e))?)
    };
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    Ok(LoadedModel {
        id,
        dir: dir.to_path_buf(),
        config,
        catalog,
        sim,
        model,
        discriminator,
    })
}

/// `dir` itself when it holds a checkpoint, otherwise every immediate
/// subdirectory that does, sorted by name.
pub fn discover_models(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(CHECKPOINT_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| RcrError::io(dir, e))? {
        let path = entry.map_err(|e| RcrError::io(dir, e))?.path();
        if path.join(CHECKPOINT_FILE).is_file() {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}
