//! The learned violation discriminator, pair harvesting and the naive
//! hard-constraint baseline.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::catalog::{nearest_items, Catalog, Neighbor};
use crate::numkit::{sigmoid, Adam, Linear, ParamSet, Tape, Tensor, Var};
use crate::recommender::StepRecord;
use crate::rng::{self, streams};
use crate::user_sim::{count_violations, FeedbackEvent, Goal, Slot};
use crate::{Error, Result};

/// Mean of the per-utterance encodings; zeros for an empty history.
pub fn history_encoding<'a>(encodings: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let mut n = 0usize;
    for e in encodings {
        for (o, x) in out.iter_mut().zip(e) {
            *o += x;
        }
        n += 1;
    }
    if n > 0 {
        out.iter_mut().for_each(|o| *o /= n as f64);
    }
    out
}

/// Three-layer network mapping `[history encoding, item encoding]` to the
/// probability that the item contradicts the history.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub params: ParamSet,
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub out: Linear,
}

impl Discriminator {
    pub fn new(history_dim: usize, item_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::DISCRIMINATOR_INIT);
        let mut params = ParamSet::new();
        let hidden1 = Linear::new(&mut params, "discriminator.hidden1", history_dim + item_dim, hidden, &mut rng)?;
        let hidden2 = Linear::new(&mut params, "discriminator.hidden2", hidden, hidden, &mut rng)?;
        let out = Linear::new(&mut params, "discriminator.out", hidden, 1, &mut rng)?;
        Ok(Self {
            params,
            hidden1,
            hidden2,
            out,
        })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        Ok(Self {
            hidden1: Linear::bind(&params, "discriminator.hidden1")?,
            hidden2: Linear::bind(&params, "discriminator.hidden2")?,
            out: Linear::bind(&params, "discriminator.out")?,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden1.inputs
    }

    /// Pre-sigmoid scores for a `[batch, input_dim]` block.
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden1.forward(tape, x)?;
        let h = tape.tanh(h)?;
        let h = self.hidden2.forward(tape, h)?;
        let h = tape.tanh(h)?;
        self.out.forward(tape, h)
    }

    fn dense(&self, layer: &Linear, x: &[f64]) -> Vec<f64> {
        let w = self.params.value(layer.weight).data();
        let mut y = self.params.value(layer.bias).data().to_vec();
        let n = layer.outputs;
        for (xi, row) in x.iter().zip(w.chunks(n)) {
            if *xi == 0.0 {
                continue;
            }
            for (o, wv) in y.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        y
    }

    /// `C(history, item)` without building a graph.
    pub fn violation_prob(&self, history: &[f64], item: &[f64]) -> Result<f64> {
        if history.len() + item.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "violation_prob",
                lhs: vec![history.len(), item.len()],
                rhs: vec![self.input_dim()],
            });
        }
        if history.iter().chain(item).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("discriminator input"));
        }
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(history);
        x.extend_from_slice(item);
        let mut h = self.dense(&self.hidden1, &x);
        h.iter_mut().for_each(|v| *v = libm::tanh(*v));
        let mut h = self.dense(&self.hidden2, &h);
        h.iter_mut().for_each(|v| *v = libm::tanh(*v));
        Ok(sigmoid(self.dense(&self.out, &h)[0]))
    }

    /// `-mean log C(p_f) - mean log(1 - C(p_r))` on tape.
    pub fn loss(&self, tape: &mut Tape, violations: Tensor, clean: Tensor) -> Result<Var> {
        let f = tape.constant(violations)?;
        let r = tape.constant(clean)?;
        let zf = self.logits(tape, f)?;
        let zr = self.logits(tape, r)?;
        // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
        let nf = tape.scale(zf, -1.0)?;
        let lf = tape.softplus(nf)?;
        let lf = tape.mean(lf)?;
        let lr = tape.softplus(zr)?;
        let lr = tape.mean(lr)?;
        tape.add(lf, lr)
    }
}

/// Eq.-(4) loss from given probabilities, for reference and diagnostics.
pub fn violation_loss(p_violation: &[f64], p_clean: &[f64]) -> f64 {
    let f: f64 = p_violation.iter().map(|&c| -libm::log(c)).sum::<f64>() / p_violation.len() as f64;
    let r: f64 = p_clean.iter().map(|&c| -libm::log(1.0 - c)).sum::<f64>() / p_clean.len() as f64;
    f + r
}

/// One labelled (history, item) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub history: Vec<FeedbackEvent>,
    pub item: usize,
    pub attrs: Vec<usize>,
    pub retrieval_attrs: Vec<usize>,
    pub embedding: Vec<f64>,
    /// Oracle violation count at harvest time.
    pub violations: usize,
}

impl PairSample {
    pub fn from_item(catalog: &Catalog, history: &[FeedbackEvent], item: usize) -> Self {
        let it = catalog.item(item);
        let slots: Vec<Slot> = history.iter().map(|e| e.slot).collect();
        Self {
            history: history.to_vec(),
            item,
            attrs: it.attrs.clone(),
            retrieval_attrs: catalog.retrieval_attrs(item).to_vec(),
            embedding: it.embedding.clone(),
            violations: count_violations(&it.attrs, &slots),
        }
    }

    pub fn is_violation(&self) -> bool {
        self.violations > 0
    }
}

/// Violation (`p_f`) and non-violation (`p_r`) pools, each a FIFO ring of
/// at most `capacity` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBuffer {
    pub capacity: usize,
    violations: VecDeque<PairSample>,
    clean: VecDeque<PairSample>,
}

impl PairBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            violations: VecDeque::new(),
            clean: VecDeque::new(),
        }
    }

    /// Files the sample under its oracle label, evicting the oldest of that class when full.
    pub fn push(&mut self, sample: PairSample) {
        let pool = if sample.is_violation() {
            &mut self.violations
        } else {
            &mut self.clean
        };
        if pool.len() == self.capacity {
            pool.pop_front();
        }
        pool.push_back(sample);
    }

    pub fn violations(&self) -> &VecDeque<PairSample> {
        &self.violations
    }

    pub fn clean(&self) -> &VecDeque<PairSample> {
        &self.clean
    }

    pub fn len(&self) -> usize {
        self.violations.len() + self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Appends labelled pairs from a finished session: every step from the
/// second on against the history before it, plus the goal against the full
/// history as a non-violation.
pub fn harvest_pairs(catalog: &Catalog, steps: &[StepRecord], goal: &Goal, buffer: &mut PairBuffer) -> usize {
    let mut history: Vec<FeedbackEvent> = Vec::new();
    let mut added = 0;
    for (t, step) in steps.iter().enumerate() {
        if t >= 1 {
            for &item in &step.items {
                buffer.push(PairSample::from_item(catalog, &history, item));
                added += 1;
            }
        }
        if let Some(e) = step.feedback {
            history.push(e);
        }
    }
    buffer.push(PairSample::from_item(catalog, &history, goal.item));
    added + 1
}

/// Item encoding of a stored sample: embedding then one-hot retrieval attributes.
pub fn sample_item_encoding(catalog: &Catalog, sample: &PairSample) -> Vec<f64> {
    let mut v = sample.embedding.clone();
    v.extend(catalog.schema().one_hot(&sample.retrieval_attrs));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 4,
            learning_rate: 5e-4,
        }
    }
}

/// Gradient steps on class-balanced batches drawn with replacement;
/// returns the loss of the final batch.
pub fn train_discriminator<R: rand::Rng + ?Sized>(
    disc: &mut Discriminator,
    optimizer: &Adam,
    buffer: &PairBuffer,
    config: &DiscriminatorConfig,
    encode_input: &mut dyn FnMut(&PairSample) -> Result<Vec<f64>>,
    rng: &mut R,
) -> Result<f64> {
    if buffer.violations.is_empty() || buffer.clean.is_empty() {
        return Err(Error::SingleClass);
    }
    let half = (config.batch_size / 2).max(1);
    let dim = disc.input_dim();
    let mut last = f64::NAN;
    for _ in 0..config.steps {
        let mut block = |pool: &VecDeque<PairSample>, rng: &mut R| -> Result<Tensor> {
            let mut data = Vec::with_capacity(half * dim);
            for _ in 0..half {
                let s = &pool[rng.random_range(0..pool.len())];
                data.extend(encode_input(s)?);
            }
            Tensor::matrix(half, dim, data)
        };
        let f = block(&buffer.violations, rng)?;
        let r = block(&buffer.clean, rng)?;
        let grads = {
            let mut tape = Tape::new(&disc.params);
            let loss = disc.loss(&mut tape, f, r)?;
            last = tape.scalar(loss);
            tape.backward(loss)?
        };
        disc.params.accumulate(&grads);
        optimizer.step(&mut disc.params, config.learning_rate)?;
    }
    Ok(last)
}

/// Area under the ROC curve of `scores` for binary `labels` (ties count half).
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut i) = (0.0, 0);
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Latest stated value per attribute, oldest statement first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardConstraintTracker {
    entries: Vec<Slot>,
}

impl HardConstraintTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, slot: Slot) {
        self.entries.retain(|s| s.attr != slot.attr);
        self.entries.push(slot);
    }

    pub fn entries(&self) -> &[Slot] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredItems {
    pub items: Vec<Neighbor>,
    /// How many of the oldest constraints had to be dropped.
    pub relaxed: usize,
}

/// Nearest items among those whose retrieval attributes satisfy every
/// tracked constraint. While fewer than `k` items qualify, the oldest
/// constraint is dropped.
pub fn hard_filter(
    tracker: &HardConstraintTracker,
    catalog: &Catalog,
    query: &[usize],
    k: usize,
    pool: &[usize],
) -> Result<FilteredItems> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let k = k.min(pool.len());
    let mut relaxed = 0;
    loop {
        let active = &tracker.entries[relaxed..];
        let allowed: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&id| {
                let a = catalog.retrieval_attrs(id);
                active.iter().all(|s| a[s.attr] == s.value)
            })
            .collect();
        if allowed.len() >= k {
            return Ok(FilteredItems {
                items: nearest_items(catalog, query, k, &allowed)?,
                relaxed,
            });
        }
        relaxed += 1;
    }
}
