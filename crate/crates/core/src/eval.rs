//! Session metrics (SR@K, NI, NV), baseline comparison and the `λ_max` ablation.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Split};
use crate::constraint::{auc, harvest_pairs, Discriminator, PairBuffer};
use crate::numkit::Tape;
use crate::recommender::{Recommender, StepRecord, TextCache};
use crate::rng::{self, streams};
use crate::trainer::{pair_input, rollout, run_training, Environment, Mode, TextSource, TrainConfig, TrainOutcome};
use crate::user_sim::{sample_goal, Goal, UserSimulator};
use crate::Result;

/// Raw record of one evaluation session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub goal: usize,
    pub success: bool,
    pub steps: Vec<StepRecord>,
}

impl SessionLog {
    pub fn nv(&self) -> usize {
        self.steps.iter().map(|s| s.violations).sum()
    }

    /// Turns taken, with failures counted at `max_steps`.
    pub fn turns(&self, max_steps: usize) -> usize {
        if self.success {
            self.steps.len()
        } else {
            max_steps
        }
    }

    pub fn succeeded_within(&self, k: usize) -> bool {
        self.success && self.steps.len() <= k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub split: Split,
    pub sessions: usize,
    pub seeds: Vec<u64>,
    pub sr10: f64,
    pub sr20: f64,
    pub sr30: f64,
    pub ni: f64,
    pub ni_se: f64,
    pub nv: f64,
    pub nv_se: f64,
    /// Turns on which the hard filter had to drop a stated attribute.
    pub relaxed_turns: usize,
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, libm::sqrt(var / n as f64))
}

impl MetricsReport {
    pub fn from_logs(mode: Mode, split: Split, seeds: Vec<u64>, logs: &[SessionLog], max_steps: usize) -> Self {
        let n = logs.len().max(1) as f64;
        let sr = |k: usize| logs.iter().filter(|l| l.succeeded_within(k)).count() as f64 / n;
        let turns: Vec<f64> = logs.iter().map(|l| l.turns(max_steps) as f64).collect();
        let nvs: Vec<f64> = logs.iter().map(|l| l.nv() as f64).collect();
        let (ni, ni_se) = mean_se(&turns);
        let (nv, nv_se) = mean_se(&nvs);
        MetricsReport {
            mode,
            split,
            sessions: logs.len(),
            seeds,
            sr10: sr(10),
            sr20: sr(20),
            sr30: sr(30),
            ni,
            ni_se,
            nv,
            nv_se,
            relaxed_turns: logs.iter().flat_map(|l| &l.steps).filter(|s| s.relaxed > 0).count(),
        }
    }
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub logs: Vec<SessionLog>,
}

/// Plays `n_sessions` sessions with goals and retrieval restricted to `split`.
///
/// The policy samples its actions; the gate and penalty follow `config`.
#[allow(clippy::too_many_arguments)]
pub fn run_sessions(
    model: &Recommender,
    discriminator: Option<&Discriminator>,
    config: &TrainConfig,
    catalog: &Catalog,
    sim: &UserSimulator,
    split: Split,
    n_sessions: usize,
    seed: u64,
) -> Result<Evaluation> {
    let env = Environment::new(catalog, sim, split);
    let settings = config.rollout_settings(discriminator, false);
    let mut goal_rng = rng::stream(seed, streams::EVAL);
    let mut feedback_rng = rng::stream(seed, streams::EVAL_FEEDBACK);
    let mut policy_rng = rng::stream(seed, streams::EVAL_POLICY);
    let mut cache = TextCache::new(sim);
    let mut logs = Vec::with_capacity(n_sessions);
    for _ in 0..n_sessions {
        let goal = sample_goal(catalog, split, &mut goal_rng)?;
        let mut tape = Tape::new(&model.params);
        let mut text = TextSource::Cached(&mut cache);
        let ep = rollout(&mut tape, model, &env, &settings, &mut text, goal, &mut policy_rng, &mut feedback_rng)?;
        logs.push(SessionLog {
            goal: ep.goal.item,
            success: ep.success,
            steps: ep.steps,
        });
    }
    let report = MetricsReport::from_logs(config.mode, split, alloc::vec![seed], &logs, config.max_steps);
    Ok(Evaluation { report, logs })
}

/// AUC of `disc` on pairs harvested from `logs` (violations are positives).
pub fn discriminator_auc(
    model: &Recommender,
    disc: &Discriminator,
    catalog: &Catalog,
    sim: &UserSimulator,
    logs: &[SessionLog],
) -> Result<f64> {
    let mut buffer = PairBuffer::new(usize::MAX);
    for l in logs {
        let goal = Goal {
            attrs: catalog.item(l.goal).attrs.clone(),
            item: l.goal,
        };
        harvest_pairs(catalog, &l.steps, &goal, &mut buffer);
    }
    let mut cache = TextCache::new(sim);
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (samples, label) in [(buffer.violations(), true), (buffer.clean(), false)] {
        for s in samples {
            let x = pair_input(model, sim, catalog, &mut cache, s)?;
            let (h, item) = x.split_at(model.dims.d_txt);
            scores.push(disc.violation_prob(h, item)?);
            labels.push(label);
        }
    }
    Ok(auc(&scores, &labels))
}

/// One comparison row with the raw sessions behind it.
pub struct ComparisonRow {
    pub report: MetricsReport,
    pub logs: Vec<SessionLog>,
}

pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Training outcomes per (mode, seed), in row order RL, RL+Naive, RCR.
    pub runs: Vec<(Mode, u64, TrainOutcome)>,
}

impl Comparison {
    pub fn row(&self, mode: Mode, split: Split) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .map(|r| &r.report)
            .find(|r| r.mode == mode && r.split == split)
    }
}

/// Trains RL, RL+Naive and RCR for every seed on the seen split and
/// evaluates all three on unseen items, plus RCR on seen items.
pub fn compare_baselines(
    config: &TrainConfig,
    seeds: &[u64],
    catalog: &Catalog,
    sim: &UserSimulator,
    n_sessions: usize,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut rcr_seen = Vec::new();
    for mode in [Mode::Rl, Mode::Naive, Mode::Rcr] {
        let mut unseen = Vec::new();
        let mut max_steps = config.max_steps;
        for &seed in seeds {
            let cfg = TrainConfig {
                mode,
                seed,
                ..config.clone()
            };
            max_steps = cfg.max_steps;
            let out = run_training(&cfg, catalog, sim)?;
            let disc = out.discriminator.as_ref();
            unseen.extend(run_sessions(&out.model, disc, &cfg, catalog, sim, Split::Unseen, n_sessions, seed)?.logs);
            if mode == Mode::Rcr {
                rcr_seen.extend(run_sessions(&out.model, disc, &cfg, catalog, sim, Split::Seen, n_sessions, seed)?.logs);
            }
            runs.push((mode, seed, out));
        }
        rows.push(ComparisonRow {
            report: MetricsReport::from_logs(mode, Split::Unseen, seeds.to_vec(), &unseen, max_steps),
            logs: unseen,
        });
    }
    rows.push(ComparisonRow {
        report: MetricsReport::from_logs(Mode::Rcr, Split::Seen, seeds.to_vec(), &rcr_seen, config.max_steps),
        logs: rcr_seen,
    });
    Ok(Comparison { rows, runs })
}

/// Window-averaged training curves for one `λ_max` and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub lambda_max: f64,
    pub seed: u64,
    /// Last episode index of each window.
    pub episodes: Vec<usize>,
    pub sr: Vec<f64>,
    pub ni: Vec<f64>,
    pub nv: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl AblationCurve {
    pub fn final_sr(&self) -> f64 {
        self.sr.last().copied().unwrap_or(f64::NAN)
    }
}

/// Non-overlapping window means of the training log; a trailing partial window is kept.
pub fn smooth_log(outcome: &TrainOutcome, lambda_max: f64, seed: u64, window: usize) -> AblationCurve {
    let window = window.max(1);
    let mut c = AblationCurve {
        lambda_max,
        seed,
        episodes: Vec::new(),
        sr: Vec::new(),
        ni: Vec::new(),
        nv: Vec::new(),
        lambda: Vec::new(),
    };
    for w in outcome.log.rows.chunks(window) {
        let n = w.len() as f64;
        c.episodes.push(w[w.len() - 1].episode);
        c.sr.push(w.iter().filter(|r| r.success).count() as f64 / n);
        c.ni.push(w.iter().map(|r| r.steps as f64).sum::<f64>() / n);
        c.nv.push(w.iter().map(|r| r.nv as f64).sum::<f64>() / n);
        c.lambda.push(w.iter().map(|r| r.lambda).sum::<f64>() / n);
    }
    c
}

/// Trains RCR without the retrieval gate for every `λ_max` and seed.
pub fn ablate_lambda_max(
    values: &[f64],
    config: &TrainConfig,
    seeds: &[u64],
    catalog: &Catalog,
    sim: &UserSimulator,
    window: usize,
) -> Result<Vec<AblationCurve>> {
    let mut curves = Vec::new();
    for &lambda_max in values {
        for &seed in seeds {
            let cfg = TrainConfig {
                mode: Mode::Rcr,
                gate: false,
                lambda_max,
                initial_lambda: config.initial_lambda.min(lambda_max),
                seed,
                ..config.clone()
            };
            let out = run_training(&cfg, catalog, sim)?;
            curves.push(smooth_log(&out, lambda_max, seed, window));
        }
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn log(success: bool, n: usize, nv: usize) -> SessionLog {
        let mut steps: Vec<StepRecord> = (0..n).map(|_| StepRecord::default()).collect();
        steps[0].violations = nv;
        SessionLog { goal: 0, success, steps }
    }

    #[test]
    fn perfect_recommender_metrics() {
        let logs: Vec<SessionLog> = (0..5).map(|_| log(true, 1, 0)).collect();
        let r = MetricsReport::from_logs(Mode::Rcr, Split::Unseen, vec![0], &logs, 50);
        assert_eq!((r.sr10, r.sr20, r.sr30), (1.0, 1.0, 1.0));
        assert_eq!((r.ni, r.ni_se, r.nv), (1.0, 0.0, 0.0));
    }

    #[test]
    fn failing_recommender_metrics() {
        let logs: Vec<SessionLog> = (0..4).map(|_| log(false, 50, 3)).collect();
        let r = MetricsReport::from_logs(Mode::Rl, Split::Unseen, vec![0], &logs, 50);
        assert_eq!(r.sr30, 0.0);
        assert_eq!(r.ni, 50.0);
        assert_eq!(r.nv, 3.0);
    }

    #[test]
    fn success_rates_by_horizon() {
        let logs = vec![log(true, 5, 0), log(true, 15, 0), log(true, 25, 0), log(false, 50, 0)];
        let r = MetricsReport::from_logs(Mode::Rl, Split::Seen, vec![0], &logs, 50);
        assert_eq!((r.sr10, r.sr20, r.sr30), (0.25, 0.5, 0.75));
        assert_eq!(r.ni, (5.0 + 15.0 + 25.0 + 50.0) / 4.0);
    }

    #[test]
    fn standard_error() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, divided by n
        assert!((se - libm::sqrt(5.0 / 12.0)).abs() < 1e-15);
    }
}
