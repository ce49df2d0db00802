//! The `rcr` command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rcr_core::catalog::{generate_catalog, split_seen_unseen, train_attribute_predictor, AttributeSchema, Split};
use rcr_core::eval::{ablate_lambda_max, compare_baselines, discriminator_auc, run_sessions, MetricsReport};
use rcr_core::seqgen::{run_demo, SeqGenConfig};
use rcr_core::trainer::Mode;
use serde::Serialize;

use crate::config::{merge_toml, parse_override, ReportFormat, RunConfig};
use crate::error::{RcrError, Result};
use crate::pipeline::{self, discover_models, load_model_dir, save_model_dir, CONFIG_FILE};
use crate::session::{Engine, SessionStore};
use crate::{formats, service};

#[derive(Debug, Parser)]
#[command(name = "rcr", version, about = "Reward-constrained interactive recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its directory.
    Train(TrainArgs),
    /// Evaluate a trained model directory.
    Eval(EvalArgs),
    /// Train and evaluate RL, RL+Naive and RCR over several seeds.
    Compare(CompareArgs),
    /// Train RCR without the gate for several lambda_max values.
    Ablate(AblateArgs),
    /// Serve interactive sessions over HTTP.
    Serve(ServeArgs),
    /// Run the constrained text generation demo.
    Gendemo(GendemoArgs),
    /// Generate a catalog file.
    Gencatalog(GencatalogArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set alpha=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<(String, String)>) -> Result<RunConfig> {
        let mut all = self.overrides.clone();
        all.extend(extra);
        let mut cfg = RunConfig::load(self.config.as_deref(), &all)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn set<T: ToString>(key: &str, v: &Option<T>, out: &mut Vec<(String, String)>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.to_string()));
    }
}

fn list<T: ToString>(vs: &[T]) -> String {
    format!("[{}]", vs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Seen,
    Unseen,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub sessions: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Unseen)]
    pub split: SplitArg,
    /// Evaluation seed (defaults to the training seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report directory (defaults to `<model>/eval`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// lambda_max values (default 0.01,0.05,1.0).
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// A model directory, or a directory of model directories.
    #[arg(long, env = "RCR_MODEL_DIR")]
    pub model_dir: PathBuf,
    #[arg(long, env = "RCR_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Where session logs are appended (defaults to `<model-dir>/sessions`).
    #[arg(long, env = "RCR_SESSIONS_DIR")]
    pub sessions_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GendemoArgs {
    /// Demo configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
    #[arg(long, default_value = "runs/gendemo")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub updates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GencatalogArgs {
    #[arg(long, default_value_t = 2000)]
    pub items: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long, default_value_t = 0.8)]
    pub seen_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Ablate(a) => ablate(a),
        Command::Serve(a) => serve(a),
        Command::Gendemo(a) => gendemo(a),
        Command::Gencatalog(a) => gencatalog(a),
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| RcrError::io(dir, e))?;
    formats::write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Seen => "seen",
        Split::Unseen => "unseen",
    }
}

const REPORT_HEADER: &str = "mode,split,sessions,sr10,sr20,sr30,ni,ni_se,nv,nv_se,relaxed_turns";

fn report_line(r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.mode,
        split_name(r.split),
        r.sessions,
        r.sr10,
        r.sr20,
        r.sr30,
        r.ni,
        r.ni_se,
        r.nv,
        r.nv_se,
        r.relaxed_turns
    )
}

fn print_report(r: &MetricsReport) {
    println!(
        "{:<9} {:<7} SR@10 {:.3}  SR@20 {:.3}  SR@30 {:.3}  NI {:.2} ± {:.2}  NV {:.2} ± {:.2}",
        r.mode.to_string(),
        split_name(r.split),
        r.sr10,
        r.sr20,
        r.sr30,
        r.ni,
        r.ni_se,
        r.nv,
        r.nv_se
    );
}

fn write_reports<T: Serialize>(dir: &Path, stem: &str, cfg: &RunConfig, json: &T, rows: &[&MetricsReport]) -> Result<()> {
    if cfg.wants(ReportFormat::Json) {
        formats::write_json(&dir.join(format!("{stem}.json")), json)?;
    }
    if cfg.wants(ReportFormat::Csv) {
        let mut lines = vec![REPORT_HEADER.to_string()];
        lines.extend(rows.iter().map(|r| report_line(r)));
        formats::write_lines(&dir.join(format!("{stem}.csv")), &lines)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    set("mode", &a.mode.map(|m| format!("\"{}\"", mode_key(m))), &mut extra);
    set("episodes", &a.episodes, &mut extra);
    set("seed", &a.seed, &mut extra);
    let cfg = a.common.load(extra)?;
    let (catalog, sim) = pipeline::prepare(&cfg)?;
    let out = pipeline::train(&cfg, &catalog, &sim)?;
    let summary = save_model_dir(&cfg.out_dir, &cfg, &catalog, &sim, &out)?;
    println!("{}: {}", cfg.out_dir.display(), summary.last_window);
    Ok(())
}

fn mode_key(m: Mode) -> &'static str {
    match m {
        Mode::Rl => "rl",
        Mode::Naive => "naive",
        Mode::Rcr => "rcr",
    }
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    reports: Vec<MetricsReport>,
    discriminator_auc: Option<f64>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = load_model_dir(&a.model)?;
    let seed = a.seed.unwrap_or(m.config.seed);
    let splits: &[Split] = match a.split {
        SplitArg::Seen => &[Split::Seen],
        SplitArg::Unseen => &[Split::Unseen],
        SplitArg::Both => &[Split::Unseen, Split::Seen],
    };
    let tc = m.config.train_config();
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    for &split in splits {
        let e = run_sessions(&m.model, m.discriminator.as_ref(), &tc, &m.catalog, &m.sim, split, a.sessions, seed)?;
        print_report(&e.report);
        reports.push(e.report);
        logs.extend(e.logs);
    }
    let discriminator_auc = match &m.discriminator {
        Some(d) => Some(discriminator_auc(&m.model, d, &m.catalog, &m.sim, &logs)?),
        None => None,
    };
    if let Some(auc) = discriminator_auc {
        println!("discriminator AUC {auc:.4}");
    }
    let dir = a.out.unwrap_or_else(|| a.model.join("eval"));
    echo_config(&dir, &m.config)?;
    let report = EvalReport {
        model: m.id.clone(),
        reports: reports.clone(),
        discriminator_auc,
    };
    write_reports(&dir, "eval", &m.config, &report, &reports.iter().collect::<Vec<_>>())
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut extra = Vec::new();
    set("episodes", &a.episodes, &mut extra);
    set("eval_sessions", &a.sessions, &mut extra);
    if !a.seeds.is_empty() {
        extra.push(("seeds".into(), list(&a.seeds)));
    }
    let cfg = a.common.load(extra)?;
    let (catalog, sim) = pipeline::prepare(&cfg)?;
    let cmp = compare_baselines(&cfg.train_config(), &cfg.seeds, &catalog, &sim, cfg.eval_sessions)?;
    echo_config(&cfg.out_dir, &cfg)?;
    for (mode, seed, out) in &cmp.runs {
        let run_cfg = RunConfig {
            mode: *mode,
            seed: *seed,
            ..cfg.clone()
        };
        save_model_dir(&cfg.out_dir.join(format!("{}-{seed}", mode_key(*mode))), &run_cfg, &catalog, &sim, out)?;
    }
    let rows: Vec<&MetricsReport> = cmp.rows.iter().map(|r| &r.report).collect();
    for r in &rows {
        print_report(r);
    }
    write_reports(&cfg.out_dir, "compare", &cfg, &rows, &rows)
}

#[derive(Serialize)]
struct AblationSummary {
    lambda_max: f64,
    seed: u64,
    final_sr: f64,
    final_lambda: f64,
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut extra = Vec::new();
    set("episodes", &a.episodes, &mut extra);
    if !a.values.is_empty() {
        extra.push(("ablation_values".into(), list(&a.values)));
    }
    if !a.seeds.is_empty() {
        extra.push(("seeds".into(), list(&a.seeds)));
    }
    let cfg = a.common.load(extra)?;
    let (catalog, sim) = pipeline::prepare(&cfg)?;
    let curves = ablate_lambda_max(&cfg.ablation_values, &cfg.train_config(), &cfg.seeds, &catalog, &sim, cfg.window)?;
    echo_config(&cfg.out_dir, &cfg)?;
    let mut summary = Vec::new();
    for c in &curves {
        formats::write_curve(&cfg.out_dir.join(format!("curve_{}_{}.csv", c.lambda_max, c.seed)), c)?;
        let s = AblationSummary {
            lambda_max: c.lambda_max,
            seed: c.seed,
            final_sr: c.final_sr(),
            final_lambda: c.lambda.last().copied().unwrap_or(0.0),
        };
        println!("lambda_max {:<6} seed {:<3} final SR {:.3} lambda {:.4}", s.lambda_max, s.seed, s.final_sr, s.final_lambda);
        summary.push(s);
    }
    formats::write_json(&cfg.out_dir.join("ablation.json"), &summary)
}

fn serve(a: ServeArgs) -> Result<()> {
    let dirs = discover_models(&a.model_dir)?;
    if dirs.is_empty() {
        return Err(RcrError::format(&a.model_dir, "no model directories found"));
    }
    let models = dirs.iter().map(|d| load_model_dir(d)).collect::<Result<Vec<_>>>()?;
    let sessions_dir = a.sessions_dir.unwrap_or_else(|| a.model_dir.join("sessions"));
    let store = SessionStore::open(&sessions_dir).map_err(|e| RcrError::io(&sessions_dir, e))?;
    let engine = Arc::new(Engine::new(models, Some(store)).map_err(|e| RcrError::io(&sessions_dir, e))?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| RcrError::Config(format!("bad address: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| RcrError::io("<runtime>", e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| RcrError::io(addr.to_string(), e))?;
        let local = listener.local_addr().map_err(|e| RcrError::io(addr.to_string(), e))?;
        let names: Vec<String> = engine.models().into_iter().map(|m| m.id).collect();
        println!("serving {} on http://{local}", names.join(", "));
        axum::serve(listener, service::router(engine))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| RcrError::io(addr.to_string(), e))
    })
}

fn gendemo(a: GendemoArgs) -> Result<()> {
    let text = match &a.config {
        Some(p) => formats::read_text(p)?,
        None => String::new(),
    };
    let mut overrides = a.overrides.clone();
    set("seed", &a.seed, &mut overrides);
    set("finetune_updates", &a.updates, &mut overrides);
    let cfg: SeqGenConfig = merge_toml(&text, &overrides)?;
    cfg.validate().map_err(|e| RcrError::Config(e.to_string()))?;
    let (corpus, report) = run_demo(&cfg)?;
    let dir = &a.out;
    std::fs::create_dir_all(dir).map_err(|e| RcrError::io(dir, e))?;
    let toml = toml::to_string(&cfg).map_err(|e| RcrError::Config(e.to_string()))?;
    formats::write_text(&dir.join(CONFIG_FILE), &toml)?;
    let lines: Vec<String> = corpus.sentences.iter().map(|s| corpus.decode(&s.tokens)).collect();
    formats::write_lines(&dir.join("corpus.txt"), &lines)?;
    formats::write_lines(&dir.join("samples_baseline.txt"), &report.baseline.samples)?;
    formats::write_lines(&dir.join("samples_constrained.txt"), &report.constrained.samples)?;
    formats::write_json(&dir.join("report.json"), &report)?;
    println!(
        "perplexity {:.2} (bigram {:.2}), classifier accuracy {:.3}, pretrained VR {:.1}%",
        report.pretrain.valid_perplexity, report.pretrain.bigram_perplexity, report.classifier_accuracy, report.pretrained_violation_rate
    );
    println!("{:<13} {:>7} {:>11} {:>8}", "variant", "VR %", "reward pct", "lambda");
    for (name, v) in [("unconstrained", &report.baseline), ("constrained", &report.constrained)] {
        println!("{name:<13} {:>7.1} {:>11.1} {:>8.4}", v.violation_rate, v.reward_percentile, v.final_lambda);
    }
    Ok(())
}

fn gencatalog(a: GencatalogArgs) -> Result<()> {
    let mut cfg = RunConfig {
        items: a.items,
        catalog_seed: a.seed,
        seen_fraction: a.seen_fraction,
        ..RunConfig::default()
    };
    if let Some(d) = a.embed_dim {
        cfg.embed_dim = d;
    }
    if let Some(s) = a.noise_sigma {
        cfg.noise_sigma = s;
    }
    cfg.validate()?;
    let raw = generate_catalog(&AttributeSchema::default(), &cfg.catalog_config())?;
    let split = split_seen_unseen(&raw, cfg.seen_fraction, cfg.catalog_seed)?;
    let (predictor, report) = train_attribute_predictor(&split, &cfg.predictor_config())?;
    let catalog = split.with_predictions(&predictor);
    formats::write_catalog(&a.out, &catalog)?;
    let acc: Vec<String> = report.unseen_accuracy.iter().map(|x| format!("{x:.3}")).collect();
    println!("{} items -> {} (unseen attribute accuracy {})", catalog.len(), a.out.display(), acc.join(" "));
    Ok(())
}
