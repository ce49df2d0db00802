//! Rewards, penalised returns and the three-timescale Lagrangian loop:
//! policy steps at rate `η1`, discriminator steps at `η2`, multiplier steps
//! at `η3`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::{attr_mismatch_count, embed_distance, Catalog, Split};
use crate::constraint::{
    harvest_pairs, history_encoding, sample_item_encoding, train_discriminator, Discriminator, DiscriminatorConfig,
    HardConstraintTracker, PairBuffer,
};
use crate::numkit::{Adam, Linear, ParamSet, Tape, Tensor, Var};
use crate::recommender::{item_encodings, recommend, ActionDistribution, ModelDims, Recommender, StepRecord, TextCache, TextEncoder};
use crate::rng::{self, streams, Rng};
use crate::user_sim::{count_violations, is_success, sample_goal, Feedback, FeedbackEvent, Goal, Slot, UserSimulator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Unconstrained policy gradient: no gate, no discriminator, `λ ≡ 0`.
    Rl,
    /// Policy gradient with retrieval restricted to items matching every stated attribute.
    Naive,
    #[default]
    Rcr,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Rl => "RL",
            Mode::Naive => "RL+Naive",
            Mode::Rcr => "RCR",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl core::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rl" => Ok(Mode::Rl),
            "naive" | "rl+naive" => Ok(Mode::Naive),
            "rcr" => Ok(Mode::Rcr),
            other => Err(Error::InvalidArgument(alloc::format!("unknown mode `{other}`"))),
        }
    }
}

/// Learning-rate schedule indexed by episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant { rate: f64 },
    /// `rate / (1 + k / half_life)`.
    InverseTime { rate: f64, half_life: f64 },
}

impl Schedule {
    pub fn constant(rate: f64) -> Self {
        Schedule::Constant { rate }
    }

    pub fn at(&self, k: usize) -> f64 {
        match *self {
            Schedule::Constant { rate } => rate,
            Schedule::InverseTime { rate, half_life } => rate / (1.0 + k as f64 / half_life),
        }
    }
}

/// Fails unless `η1(k) > η2(k) > η3(k)`.
pub fn check_rate_ordering(policy: &Schedule, disc: &Schedule, lambda: &Schedule, k: usize) -> Result<()> {
    let (a, b, c) = (policy.at(k), disc.at(k), lambda.at(k));
    if a > b && b > c && c > 0.0 {
        Ok(())
    } else {
        Err(Error::RateOrdering(a, b, c))
    }
}

/// The multiplier and its projection bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
    pub alpha: f64,
    pub lambda_max: f64,
}

impl LagrangeState {
    /// `λ ← clip(λ + η3 (mean_penalty − α), 0, λ_max)`.
    pub fn update(&mut self, mean_penalty: f64, rate: f64) {
        self.lambda = lambda_update(self.lambda, mean_penalty, self.alpha, self.lambda_max, rate);
    }
}

pub fn lambda_update(lambda: f64, mean_penalty: f64, alpha: f64, lambda_max: f64, rate: f64) -> f64 {
    (lambda + rate * (mean_penalty - alpha)).clamp(0.0, lambda_max)
}

/// `−‖e_item − e_goal‖ − λ_att · mismatches(item, goal)`, counting
/// mismatches on the predicted (retrieval) attributes.
pub fn step_reward(catalog: &Catalog, item: usize, goal: usize, lambda_att: f64) -> f64 {
    let (a, b) = (catalog.item(item), catalog.item(goal));
    let mismatches = attr_mismatch_count(catalog.retrieval_attrs(item), catalog.retrieval_attrs(goal));
    -embed_distance(&a.embedding, &b.embedding) - lambda_att * mismatches as f64
}

pub fn penalized_return(r: f64, c: f64, lambda: f64) -> f64 {
    r - lambda * c
}

/// Undiscounted return-to-go of `r_t − λ c_t`.
pub fn returns_to_go(rewards: &[f64], penalties: &[f64], lambda: f64) -> Vec<f64> {
    discounted_returns(rewards, penalties, lambda, 1.0)
}

pub fn discounted_returns(rewards: &[f64], penalties: &[f64], lambda: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = gamma * acc + penalized_return(rewards[t], penalties[t], lambda);
        out[t] = acc;
    }
    out
}

/// Exponential running mean of the return-to-go observed at each step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub values: Vec<f64>,
    pub seen: Vec<bool>,
    pub rate: f64,
}

impl Baseline {
    pub fn new(rate: f64, max_steps: usize) -> Self {
        Self {
            values: vec![0.0; max_steps],
            seen: vec![false; max_steps],
            rate,
        }
    }

    /// Advantages against the current values, then folds the returns in.
    pub fn advantages(&mut self, returns: &[f64]) -> Vec<f64> {
        let mut adv = Vec::with_capacity(returns.len());
        for (t, &r) in returns.iter().enumerate() {
            if !self.seen[t] {
                self.values[t] = r;
                self.seen[t] = true;
            }
            adv.push(r - self.values[t]);
            self.values[t] += self.rate * (r - self.values[t]);
        }
        adv
    }
}

/// `−Σ_t A_t log π(a_t | s_t)`.
pub fn policy_loss(tape: &mut Tape, log_probs: &[Var], advantages: &[f64]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&lp, &a) in log_probs.iter().zip(advantages) {
        let term = tape.scale(lp, -a)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("empty episode".into()))
}

/// Subtracts `β · Σ_t H_t` from `loss`; `β = 0` leaves it untouched.
pub fn with_entropy_bonus(tape: &mut Tape, loss: Var, entropies: &[Var], beta: f64) -> Result<Var> {
    if beta == 0.0 {
        return Ok(loss);
    }
    let mut total = loss;
    for &h in entropies {
        let term = tape.scale(h, -beta)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub episodes: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub k: usize,
    pub lambda_att: f64,
    /// Extra reward added to the last step when a session hits the cap.
    pub terminal_reward: f64,
    pub alpha: f64,
    pub lambda_max: f64,
    pub initial_lambda: f64,
    pub policy_rate: Schedule,
    pub discriminator_rate: Schedule,
    pub lambda_rate: Schedule,
    /// Discriminator rejection at retrieval time (RCR only).
    pub gate: bool,
    pub max_rejects: usize,
    pub discriminator_batch: usize,
    pub discriminator_steps: usize,
    pub discriminator_hidden: usize,
    pub buffer_capacity: usize,
    pub grad_clip: f64,
    pub baseline_rate: f64,
    /// Return discount: 0 scores each action by its own penalised reward,
    /// 1 by the undiscounted return-to-go.
    pub discount: f64,
    /// Weight of the policy-entropy bonus.
    pub entropy_bonus: f64,
    pub dims: ModelDims,
    pub text_pretrain_steps: usize,
    pub text_pretrain_batch: usize,
    pub text_pretrain_rate: f64,
    /// Keep training the text encoder during RL instead of freezing it.
    pub finetune_text: bool,
    /// Replace the discriminator's penalty with a constant (diagnostics).
    pub stub_penalty: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rcr,
            episodes: 20_000,
            seed: 0,
            max_steps: 50,
            k: 1,
            lambda_att: 0.5,
            terminal_reward: -3.0,
            alpha: 0.5,
            lambda_max: 1.0,
            initial_lambda: 0.0,
            policy_rate: Schedule::constant(1e-3),
            discriminator_rate: Schedule::constant(5e-4),
            lambda_rate: Schedule::constant(1e-4),
            gate: true,
            max_rejects: 10,
            discriminator_batch: 32,
            discriminator_steps: 4,
            discriminator_hidden: 128,
            buffer_capacity: 50_000,
            grad_clip: 5.0,
            baseline_rate: 0.01,
            discount: 0.0,
            entropy_bonus: 0.1,
            dims: ModelDims::default(),
            text_pretrain_steps: 400,
            text_pretrain_batch: 32,
            text_pretrain_rate: 5e-3,
            finetune_text: false,
            stub_penalty: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate_ordering(&self.policy_rate, &self.discriminator_rate, &self.lambda_rate, 0)?;
        let bad = |what: &str| Err(Error::InvalidArgument(alloc::format!("invalid {what}")));
        if self.max_steps == 0 {
            return bad("max_steps");
        }
        if self.k == 0 {
            return bad("k");
        }
        if !(self.lambda_max >= 0.0) || !(0.0..=self.lambda_max).contains(&self.initial_lambda) {
            return bad("lambda bounds");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha");
        }
        if self.stub_penalty.is_some_and(|c| !(0.0..=1.0).contains(&c)) {
            return bad("stub_penalty");
        }
        if self.discriminator_batch < 2 || self.buffer_capacity == 0 || self.discriminator_hidden == 0 {
            return bad("discriminator settings");
        }
        if !(self.grad_clip > 0.0) || !(0.0..=1.0).contains(&self.baseline_rate) {
            return bad("optimizer settings");
        }
        Ok(())
    }

    pub fn uses_discriminator(&self) -> bool {
        self.mode == Mode::Rcr && self.stub_penalty.is_none()
    }

    pub fn gated(&self) -> bool {
        self.mode == Mode::Rcr && self.gate
    }

    /// Rollout settings for this configuration with the given discriminator.
    pub fn rollout_settings<'d>(&self, disc: Option<&'d Discriminator>, greedy: bool) -> RolloutSettings<'d> {
        RolloutSettings {
            mode: self.mode,
            k: self.k,
            max_steps: self.max_steps,
            lambda_att: self.lambda_att,
            terminal_reward: self.terminal_reward,
            alpha: self.alpha,
            max_rejects: self.max_rejects,
            gate: if self.gated() { disc } else { None },
            penalty: match (self.mode, self.stub_penalty) {
                (Mode::Rcr, Some(c)) => Some(PenaltySource::Constant(c)),
                (Mode::Rcr, None) => disc.map(PenaltySource::Discriminator),
                _ => None,
            },
            greedy,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub steps: usize,
    pub success: bool,
    pub nv: usize,
    pub lambda: f64,
    pub mean_reward: f64,
    pub mean_penalty: f64,
    pub disc_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<EpisodeMetrics>,
}

/// Catalog view shared by every rollout: item encodings and the retrieval pool.
#[derive(Debug, Clone)]
pub struct Environment<'a> {
    pub catalog: &'a Catalog,
    pub sim: &'a UserSimulator,
    pub items: Vec<Vec<f64>>,
    pub split: Split,
}

impl<'a> Environment<'a> {
    pub fn new(catalog: &'a Catalog, sim: &'a UserSimulator, split: Split) -> Self {
        Self {
            catalog,
            sim,
            items: item_encodings(catalog),
            split,
        }
    }

    pub fn pool(&self) -> &[usize] {
        self.catalog.ids(self.split)
    }
}

/// How a rollout turns an action into items.
#[derive(Debug, Clone, Copy)]
pub struct RolloutSettings<'d> {
    pub mode: Mode,
    pub k: usize,
    pub max_steps: usize,
    pub lambda_att: f64,
    pub terminal_reward: f64,
    pub alpha: f64,
    pub max_rejects: usize,
    pub gate: Option<&'d Discriminator>,
    /// Source of `c_t`; `None` gives zero penalties.
    pub penalty: Option<PenaltySource<'d>>,
    /// Take the most likely class per head instead of sampling.
    pub greedy: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum PenaltySource<'d> {
    Discriminator(&'d Discriminator),
    Constant(f64),
}

pub enum TextSource<'c> {
    /// Frozen encoder with memoised encodings.
    Cached(&'c mut TextCache),
    /// Encoder recorded on the tape so it receives gradients.
    OnTape,
}

/// A finished session plus the tape handles needed for the policy update.
pub struct Episode {
    pub goal: Goal,
    pub steps: Vec<StepRecord>,
    pub log_probs: Vec<Var>,
    /// Policy entropy per step, summed over heads.
    pub entropies: Vec<Var>,

    pub success: bool,
}

fn text_encoding(
    tape: &mut Tape,
    model: &Recommender,
    sim: &UserSimulator,
    text: &mut TextSource,
    event: FeedbackEvent,
) -> Result<(Var, Vec<f64>)> {
    match text {
        TextSource::Cached(cache) => {
            let v = cache.get(model, sim, event)?.to_vec();
            let var = tape.constant(Tensor::vector(v.clone()))?;
            Ok((var, v))
        }
        TextSource::OnTape => {
            let u = sim.utterance(event.template, event.slot)?;
            let ids = sim.vocabulary().ids(&u.tokens)?;
            let var = model.text.encode(tape, &ids)?;
            let v = tape.value(var).data().to_vec();
            Ok((var, v))
        }
    }
}

/// Plays one session against the simulator, recording every policy step on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    tape: &mut Tape,
    model: &Recommender,
    env: &Environment,
    settings: &RolloutSettings,
    text: &mut TextSource,
    goal: Goal,
    policy_rng: &mut Rng,
    feedback_rng: &mut Rng,
) -> Result<Episode> {
    let catalog = env.catalog;
    let pool = env.pool();
    let d_txt = model.dims.d_txt;
    let mut s = tape.constant(Tensor::zeros(&[model.dims.d_s]))?;
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut log_probs = Vec::new();
    let mut entropies = Vec::new();
    let mut history: Vec<FeedbackEvent> = Vec::new();
    let mut slots: Vec<Slot> = Vec::new();
    let mut encodings: Vec<Vec<f64>> = Vec::new();
    let mut tracker = HardConstraintTracker::new();
    let mut success = false;

    for t in 1..=settings.max_steps {
        let heads = model.policy.forward(tape, s)?;
        let dist = ActionDistribution::from_log_probs(tape, &heads);
        let action = if settings.greedy {
            dist.mode()
        } else {
            dist.sample(policy_rng)
        };
        log_probs.push(model.policy.log_prob_var(tape, &heads, &action)?);
        entropies.push(entropy(tape, &heads)?);

        let hist = history_encoding(encodings.iter().map(Vec::as_slice), d_txt);
        let (items, rejects, relaxed) = match (settings.mode, settings.gate) {
            (Mode::Naive, _) => {
                let r = crate::constraint::hard_filter(&tracker, catalog, &action, settings.k, pool)?;
                (r.items.iter().map(|n| n.id).collect::<Vec<_>>(), 0, r.relaxed)
            }
            (_, Some(disc)) => {
                let mut gate = |id: usize| disc.violation_prob(&hist, &env.items[id]);
                let r = recommend(&action, catalog, settings.k, pool, Some(&mut gate), settings.alpha, settings.max_rejects)?;
                (r.items, r.rejects, 0)
            }
            _ => (recommend(&action, catalog, settings.k, pool, None, settings.alpha, 0)?.items, 0, 0),
        };

        let penalty = match settings.penalty {
            None => 0.0,
            Some(PenaltySource::Constant(c)) => c,
            // nothing has been said yet, so nothing can be contradicted
            Some(PenaltySource::Discriminator(_)) if history.is_empty() => 0.0,
            Some(PenaltySource::Discriminator(disc)) => {
                let mut total = 0.0;
                for &id in &items {
                    total += disc.violation_prob(&hist, &env.items[id])?;
                }
                total / items.len() as f64
            }
        };

        let mut reward = items
            .iter()
            .map(|&id| step_reward(catalog, id, goal.item, settings.lambda_att))
            .fold(f64::NEG_INFINITY, f64::max);
        let violations = items.iter().map(|&id| count_violations(&catalog.item(id).attrs, &slots)).sum();
        success = is_success(catalog, &items, &goal);
        let capped = !success && t == settings.max_steps;
        if capped {
            reward += settings.terminal_reward;
        }
        let mut record = StepRecord {
            action,
            items,
            rejects,
            relaxed,
            reward,
            penalty,
            violations,
            feedback: None,
        };
        if success || capped {
            steps.push(record);
            break;
        }
        let first = record.items[0];
        let event = match env.sim.give_feedback(&catalog.item(first).attrs, &goal, feedback_rng) {
            Feedback::Comment(u) => u.event(),
            Feedback::Satisfied => unreachable!("unsuccessful item draws a comment"),
        };
        record.feedback = Some(event);
        steps.push(record);
        history.push(event);
        slots.push(event.slot);
        tracker.update(event.slot);

        let (c_txt, enc) = text_encoding(tape, model, env.sim, text, event)?;
        encodings.push(enc);
        let c_vis = tape.constant(Tensor::vector(env.items[first].clone()))?;
        s = model.tracker.advance(tape, s, c_vis, c_txt)?;
    }
    Ok(Episode {
        goal,
        steps,
        log_probs,
        entropies,
        success,
    })
}

/// `−Σ p log p` summed over the heads.
fn entropy(tape: &mut Tape, heads: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &h in heads {
        let p = tape.exp(h)?;
        let plogp = tape.mul(p, h)?;
        let s = tape.sum(plogp)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    tape.scale(total.expect("policy has heads"), -1.0)
}

/// Supervised warm-up of the text encoder: predict the (attribute, value)
/// slot of random templated utterances. Returns final-batch accuracy.
pub fn pretrain_text_encoder(model: &mut Recommender, sim: &UserSimulator, config: &TrainConfig) -> Result<f64> {
    if config.text_pretrain_steps == 0 {
        return Ok(f64::NAN);
    }
    let schema = sim.schema();
    let mut rng = rng::stream(config.seed, streams::PRETRAIN);
    let mut params: ParamSet = model.params.subset("text_encoder.");
    let encoder = TextEncoder::bind(&params)?;
    let head = Linear::new(&mut params, "slot_head", model.dims.d_txt, schema.one_hot_len(), &mut rng)?;
    let offsets = schema.offsets();
    let adam = Adam::with_clip(5.0);
    let mut accuracy = 0.0;
    use rand::Rng as _;
    for _ in 0..config.text_pretrain_steps {
        let mut batch = Vec::with_capacity(config.text_pretrain_batch);
        for _ in 0..config.text_pretrain_batch.max(1) {
            let attr = rng.random_range(0..schema.num_attributes());
            let value = rng.random_range(0..schema.cardinality(attr));
            let templates: Vec<usize> = sim.templates().iter().filter(|t| t.applies_to(attr)).map(|t| t.id).collect();
            let template = templates[rng.random_range(0..templates.len())];
            let u = sim.utterance(template, Slot { attr, value })?;
            batch.push((sim.vocabulary().ids(&u.tokens)?, offsets[attr] + value));
        }
        let grads = {
            let mut tape = Tape::new(&params);
            let mut total: Option<Var> = None;
            let mut hits = 0;
            for (ids, target) in &batch {
                let c = encoder.encode(&mut tape, ids)?;
                let logits = head.forward(&mut tape, c)?;
                let ls = tape.log_softmax(logits)?;
                if crate::catalog::argmax(tape.value(ls).data()) == *target {
                    hits += 1;
                }
                let p = tape.pick(ls, &[*target])?;
                let p = tape.sum(p)?;
                total = Some(match total {
                    None => p,
                    Some(t) => tape.add(t, p)?,
                });
            }
            accuracy = hits as f64 / batch.len() as f64;
            let loss = tape.scale(total.expect("non-empty batch"), -1.0 / batch.len() as f64)?;
            tape.backward(loss)?
        };
        params.accumulate(&grads);
        adam.step(&mut params, config.text_pretrain_rate)?;
    }
    model.params.load_from(&params.subset("text_encoder."))?;
    Ok(accuracy)
}

pub struct TrainOutcome {
    pub model: Recommender,
    pub discriminator: Option<Discriminator>,
    pub log: MetricsLog,
    pub lagrange: LagrangeState,
    pub buffer: PairBuffer,
    pub text_accuracy: f64,
}

/// Discriminator input for a stored pair: mean history encoding then item encoding.
pub fn pair_input(
    model: &Recommender,
    sim: &UserSimulator,
    catalog: &Catalog,
    cache: &mut TextCache,
    sample: &crate::constraint::PairSample,
) -> Result<Vec<f64>> {
    let mut encs = Vec::with_capacity(sample.history.len());
    for e in &sample.history {
        encs.push(cache.get(model, sim, *e)?.to_vec());
    }
    let mut x = history_encoding(encs.iter().map(Vec::as_slice), model.dims.d_txt);
    x.extend(sample_item_encoding(catalog, sample));
    Ok(x)
}

/// Trains for `config.episodes` sessions with goals and retrieval on the seen split.
pub fn run_training(config: &TrainConfig, catalog: &Catalog, sim: &UserSimulator) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = Recommender::new(catalog, sim, config.dims, config.seed)?;
    let text_accuracy = pretrain_text_encoder(&mut model, sim, config)?;
    model.params.reset_optimizer();
    let env = Environment::new(catalog, sim, Split::Seen);
    if env.pool().is_empty() {
        return Err(Error::EmptyPool);
    }
    let item_dim = env.items[0].len();
    let mut disc = if config.mode == Mode::Rcr {
        Some(Discriminator::new(
            config.dims.d_txt,
            item_dim,
            config.discriminator_hidden,
            config.seed,
        )?)
    } else {
        None
    };
    let mut lagrange = LagrangeState {
        lambda: if config.mode == Mode::Rcr { config.initial_lambda } else { 0.0 },
        alpha: config.alpha,
        lambda_max: config.lambda_max,
    };
    let mut buffer = PairBuffer::new(config.buffer_capacity);
    let mut goal_rng = rng::stream(config.seed, streams::GOALS);
    let mut feedback_rng = rng::stream(config.seed, streams::FEEDBACK);
    let mut policy_rng = rng::stream(config.seed, streams::POLICY);
    let mut disc_rng = rng::stream(config.seed, streams::DISCRIMINATOR);
    let policy_opt = Adam::with_clip(config.grad_clip);
    let disc_opt = Adam::default();
    let disc_cfg = DiscriminatorConfig {
        batch_size: config.discriminator_batch,
        steps: config.discriminator_steps,
        learning_rate: config.discriminator_rate.at(0),
    };
    let mut baseline = Baseline::new(config.baseline_rate, config.max_steps);
    let mut cache = TextCache::new(sim);
    let mut log = MetricsLog::default();

    for k in 0..config.episodes {
        check_rate_ordering(&config.policy_rate, &config.discriminator_rate, &config.lambda_rate, k)?;
        let goal = sample_goal(catalog, Split::Seen, &mut goal_rng)?;
        let settings = config.rollout_settings(disc.as_ref(), false);
        let (episode, grads) = {
            let mut tape = Tape::new(&model.params);
            let mut text = if config.finetune_text {
                TextSource::OnTape
            } else {
                TextSource::Cached(&mut cache)
            };
            let ep = rollout(&mut tape, &model, &env, &settings, &mut text, goal, &mut policy_rng, &mut feedback_rng)?;
            let rewards: Vec<f64> = ep.steps.iter().map(|s| s.reward).collect();
            let penalties: Vec<f64> = ep.steps.iter().map(|s| s.penalty).collect();
            let returns = discounted_returns(&rewards, &penalties, lagrange.lambda, config.discount);
            let adv = baseline.advantages(&returns);
            let grads = if adv.iter().all(|&a| a == 0.0) && config.entropy_bonus == 0.0 {
                None
            } else {
                let loss = policy_loss(&mut tape, &ep.log_probs, &adv)?;
                let loss = with_entropy_bonus(&mut tape, loss, &ep.entropies, config.entropy_bonus)?;
                Some(tape.backward(loss)?)
            };
            (ep, grads)
        };
        if let Some(g) = grads {
            model.params.accumulate(&g);
            policy_opt
                .step(&mut model.params, config.policy_rate.at(k))
                .map_err(|e| Error::Divergence(alloc::format!("policy update at episode {k}: {e}")))?;
        }
        if config.finetune_text {
            cache.clear();
        }

        let mut disc_loss = None;
        if let (Some(d), true) = (disc.as_mut(), config.uses_discriminator()) {
            harvest_pairs(catalog, &episode.steps, &episode.goal, &mut buffer);
            if !buffer.violations().is_empty() && !buffer.clean().is_empty() {
                let cfg = DiscriminatorConfig {
                    learning_rate: config.discriminator_rate.at(k),
                    ..disc_cfg
                };
                let mut enc = |s: &crate::constraint::PairSample| pair_input(&model, sim, catalog, &mut cache, s);
                let l = train_discriminator(d, &disc_opt, &buffer, &cfg, &mut enc, &mut disc_rng)?;
                if !l.is_finite() {
                    return Err(Error::Divergence(alloc::format!("discriminator loss at episode {k}")));
                }
                disc_loss = Some(l);
            }
        }

        let n = episode.steps.len() as f64;
        let mean_penalty = episode.steps.iter().map(|s| s.penalty).sum::<f64>() / n;
        if config.mode == Mode::Rcr {
            lagrange.update(mean_penalty, config.lambda_rate.at(k));
        }
        log.rows.push(EpisodeMetrics {
            episode: k,
            steps: episode.steps.len(),
            success: episode.success,
            nv: episode.steps.iter().map(|s| s.violations).sum(),
            lambda: lagrange.lambda,
            mean_reward: episode.steps.iter().map(|s| s.reward).sum::<f64>() / n,
            mean_penalty,
            disc_loss,
        });
    }
    Ok(TrainOutcome {
        model,
        discriminator: disc,
        log,
        lagrange,
        buffer,
        text_accuracy,
    })
}

/// Short human-readable summary of the last `window` rows.
pub fn summarize(log: &MetricsLog, window: usize) -> String {
    let rows = &log.rows[log.rows.len().saturating_sub(window)..];
    if rows.is_empty() {
        return String::from("no episodes");
    }
    let n = rows.len() as f64;
    let sr = rows.iter().filter(|r| r.success).count() as f64 / n;
    let ni = rows.iter().map(|r| r.steps as f64).sum::<f64>() / n;
    let nv = rows.iter().map(|r| r.nv as f64).sum::<f64>() / n;
    let lambda = rows.iter().map(|r| r.lambda).sum::<f64>() / n;
    alloc::format!("last {} episodes: SR {sr:.3} NI {ni:.2} NV {nv:.2} lambda {lambda:.4}", rows.len())
}
