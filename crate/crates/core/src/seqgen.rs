//! Sentiment-constrained sequence generation on a toy review corpus.
//!
//! A recurrent generator is pretrained by maximum likelihood, then fine-tuned
//! by policy gradient against a bigram-likelihood reward while a learned
//! sentiment classifier supplies the Lagrangian penalty.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numkit::{Adam, GruCell, Linear, ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::{self, sample_categorical, streams, Rng};
use crate::trainer::lambda_update;
use crate::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

const DETERMINERS: &[&str] = &["the", "this", "that", "our", "my", "their", "every", "each"];
const NOUNS: &[&str] = &[
    "food", "service", "staff", "pizza", "burger", "pasta", "salad", "soup", "steak", "sushi",
    "coffee", "tea", "dessert", "bread", "wine", "beer", "menu", "price", "portion", "waiter",
    "waitress", "owner", "chef", "kitchen", "table", "patio", "bar", "room", "music", "atmosphere",
    "decor", "location", "parking", "restaurant", "place", "cafe", "diner", "bakery", "breakfast",
    "lunch", "dinner", "brunch", "sandwich", "taco", "burrito", "noodles", "rice", "chicken",
    "fish", "fries", "cake", "pie", "cookie", "salsa", "sauce",
];
const COPULAS: &[&str] = &[
    "was", "is", "seemed", "looked", "felt", "tasted", "smelled", "sounded", "remained", "became",
];
const INTENSIFIERS: &[&str] = &[
    "very", "really", "so", "quite", "pretty", "truly", "extremely", "rather", "incredibly",
    "super", "totally", "absolutely",
];
const SUBJECTS: &[&str] = &["i", "we", "they", "you"];
const TIMES: &[&str] = &[
    "today", "tonight", "again", "yesterday", "always", "lately", "recently", "sometimes", "here",
    "there",
];
const OPENERS: &[&str] = &["overall", "honestly", "frankly", "basically"];
const CONNECTORS: &[&str] = &["and", ",", "plus"];
const ENDINGS: &[&str] = &[".", "!"];

const POSITIVE_ADJECTIVES: &[&str] = &[
    "great", "good", "amazing", "excellent", "delicious", "fresh", "friendly", "tasty",
    "wonderful", "fantastic", "lovely", "perfect", "awesome", "superb", "pleasant", "clean",
    "cozy", "attentive", "helpful", "generous", "fair", "reasonable", "warm", "crispy", "tender",
    "flavorful", "charming", "outstanding", "impressive", "nice",
];
const NEGATIVE_ADJECTIVES: &[&str] = &[
    "bad", "terrible", "awful", "horrible", "bland", "stale", "rude", "dirty", "cold", "slow",
    "greasy", "soggy", "overpriced", "mediocre", "disappointing", "gross", "noisy", "tasteless",
    "burnt", "salty", "dry", "sloppy", "careless", "unfriendly", "poor", "nasty", "boring",
    "cramped", "weak", "pathetic",
];
const POSITIVE_VERBS: &[&str] = &["loved", "enjoyed", "liked", "adored", "recommend", "appreciated"];
const NEGATIVE_VERBS: &[&str] = &["hated", "disliked", "regretted", "avoided", "despised", "dreaded"];

/// Corpus split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSplit {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    pub negative: bool,
}

/// Sentences over a closed vocabulary, labelled by the sentiment lexicons.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
    negative_lexicon: Vec<bool>,
    positive_lexicon: Vec<bool>,
    pub sentences: Vec<Sentence>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

fn pick<'a>(rng: &mut Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn clause(rng: &mut Rng, negative: bool, out: &mut Vec<&'static str>) {
    let (adjectives, verbs) = if negative {
        (NEGATIVE_ADJECTIVES, NEGATIVE_VERBS)
    } else {
        (POSITIVE_ADJECTIVES, POSITIVE_VERBS)
    };
    let form: f64 = rng.random();
    if form < 0.25 {
        out.push(pick(rng, SUBJECTS));
        out.push(pick(rng, verbs));
        out.push(pick(rng, DETERMINERS));
        out.push(pick(rng, NOUNS));
    } else {
        if form < 0.4 {
            out.push(pick(rng, OPENERS));
            out.push(",");
        }
        if rng.random_bool(0.1) {
            out.push("everything");
        } else {
            out.push(pick(rng, DETERMINERS));
            out.push(pick(rng, NOUNS));
        }
        out.push(pick(rng, COPULAS));
        if rng.random_bool(0.4) {
            out.push(pick(rng, INTENSIFIERS));
        }
        out.push(pick(rng, adjectives));
    }
    if rng.random_bool(0.3) {
        out.push(pick(rng, TIMES));
    }
}

/// Samples `n` sentences from the positive and negative grammars, half of
/// each in expectation, and splits them 0.7 / 0.1 / 0.2.
pub fn build_corpus(seed: u64, n: usize) -> Result<ToyCorpus> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("corpus needs at least 100 sentences, got {n}")));
    }
    let mut vocab: Vec<&str> = vec![BOS, EOS, "everything"];
    for group in [
        DETERMINERS, NOUNS, COPULAS, INTENSIFIERS, SUBJECTS, TIMES, OPENERS, CONNECTORS, ENDINGS,
        POSITIVE_ADJECTIVES, NEGATIVE_ADJECTIVES, POSITIVE_VERBS, NEGATIVE_VERBS,
    ] {
        for w in group {
            if !vocab.contains(w) {
                vocab.push(w);
            }
        }
    }
    let index: BTreeMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.to_string(), i)).collect();
    let flags = |words: &[&[&str]]| -> Vec<bool> {
        vocab.iter().map(|w| words.iter().any(|g| g.contains(w))).collect()
    };
    let negative_lexicon = flags(&[NEGATIVE_ADJECTIVES, NEGATIVE_VERBS]);
    let positive_lexicon = flags(&[POSITIVE_ADJECTIVES, POSITIVE_VERBS]);

    let mut rng = rng::stream(seed, streams::CORPUS);
    let mut sentences = Vec::with_capacity(n);
    let mut words = Vec::new();
    for _ in 0..n {
        let negative = rng.random_bool(0.5);
        words.clear();
        clause(&mut rng, negative, &mut words);
        if rng.random_bool(0.4) {
            words.push(pick(&mut rng, CONNECTORS));
            clause(&mut rng, negative, &mut words);
        }
        words.push(if rng.random_bool(0.8) { "." } else { "!" });
        let tokens = words.iter().map(|w| index[*w]).collect();
        sentences.push(Sentence { tokens, negative });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 7 / 10;
    let n_valid = n / 10;
    Ok(ToyCorpus {
        vocab: vocab.into_iter().map(String::from).collect(),
        index,
        negative_lexicon,
        positive_lexicon,
        sentences,
        train: order[..n_train].to_vec(),
        valid: order[n_train..n_train + n_valid].to_vec(),
        test: order[n_train + n_valid..].to_vec(),
    })
}

impl ToyCorpus {
    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn token_id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn is_negative_word(&self, id: usize) -> bool {
        self.negative_lexicon.get(id).copied().unwrap_or(false)
    }

    pub fn is_positive_word(&self, id: usize) -> bool {
        self.positive_lexicon.get(id).copied().unwrap_or(false)
    }

    /// Ground-truth label: negative iff any negative-lexicon token occurs.
    pub fn lexicon_negative(&self, tokens: &[usize]) -> bool {
        tokens.iter().any(|&t| self.is_negative_word(t))
    }

    pub fn split(&self, split: CorpusSplit) -> impl Iterator<Item = &Sentence> + '_ {
        let ids = match split {
            CorpusSplit::Train => &self.train,
            CorpusSplit::Valid => &self.valid,
            CorpusSplit::Test => &self.test,
        };
        ids.iter().map(move |&i| &self.sentences[i])
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        let words: Vec<&str> = tokens
            .iter()
            .map(|&t| self.vocab.get(t).map_or("<unk>", String::as_str))
            .collect();
        words.join(" ")
    }

    /// Parses a space-separated line.
    pub fn encode(&self, line: &str) -> Result<Vec<usize>> {
        line.split_whitespace().map(|w| self.token_id(w)).collect()
    }
}

/// Add-k smoothed bigram model over `<bos> tokens <eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramOracle {
    vocab: usize,
    log_probs: Vec<f64>,
    pub max_len: usize,
}

impl BigramOracle {
    pub fn fit<'a, I>(sentences: I, vocab: usize, bos: usize, eos: usize, smoothing: f64, max_len: usize) -> Self
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let mut counts = vec![0.0; vocab * vocab];
        for s in sentences {
            let mut prev = bos;
            for &t in s.iter().chain(core::iter::once(&eos)) {
                counts[prev * vocab + t] += 1.0;
                prev = t;
            }
        }
        let mut log_probs = vec![0.0; vocab * vocab];
        for a in 0..vocab {
            let row = &counts[a * vocab..(a + 1) * vocab];
            let total: f64 = row.iter().sum::<f64>() + smoothing * vocab as f64;
            for b in 0..vocab {
                log_probs[a * vocab + b] = libm::log((row[b] + smoothing) / total);
            }
        }
        Self { vocab, log_probs, max_len }
    }

    pub fn from_corpus(corpus: &ToyCorpus, smoothing: f64, max_len: usize) -> Self {
        Self::fit(
            corpus.split(CorpusSplit::Train).map(|s| s.tokens.as_slice()),
            corpus.vocab_len(),
            corpus.bos(),
            corpus.eos(),
            smoothing,
            max_len,
        )
    }

    pub fn log_prob(&self, prev: usize, next: usize) -> f64 {
        self.log_probs[prev * self.vocab + next]
    }

    /// Total log-likelihood and number of transitions, end token included.
    pub fn score(&self, tokens: &[usize], bos: usize, eos: usize) -> Result<(f64, usize)> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::UnknownToken(format!("#{bad}")));
        }
        let mut prev = bos;
        let mut total = 0.0;
        for &t in tokens.iter().chain(core::iter::once(&eos)) {
            total += self.log_prob(prev, t);
            prev = t;
        }
        Ok((total, tokens.len() + 1))
    }

    pub fn perplexity<'a, I>(&self, sentences: I, bos: usize, eos: usize) -> Result<f64>
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let (mut nll, mut n) = (0.0, 0);
        for s in sentences {
            let (lp, k) = self.score(s, bos, eos)?;
            nll -= lp;
            n += k;
        }
        Ok(libm::exp(nll / n.max(1) as f64))
    }
}

/// `exp` of the per-transition bigram log-likelihood, in `(0, 1]`.
pub fn sequence_reward(tokens: &[usize], oracle: &BigramOracle, corpus: &ToyCorpus) -> Result<f64> {
    if tokens.is_empty() || tokens.len() > oracle.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            oracle.max_len
        )));
    }
    let (lp, n) = oracle.score(tokens, corpus.bos(), corpus.eos())?;
    Ok(libm::exp(lp / n as f64))
}

/// Percentage of `reference` rewards at or below `value`.
pub fn percentile_of(sorted_reference: &[f64], value: f64) -> f64 {
    let below = sorted_reference.partition_point(|&r| r <= value);
    100.0 * below as f64 / sorted_reference.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorDims {
    pub token_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
}

impl Default for GeneratorDims {
    fn default() -> Self {
        Self { token_dim: 16, hidden: 64, latent_dim: 0 }
    }
}

/// Token embedding, GRU and softmax head; with `latent_dim > 0` a Gaussian
/// seed vector sets the initial state.
#[derive(Debug, Clone)]
pub struct Generator {
    pub params: ParamSet,
    embedding: ParamId,
    cell: GruCell,
    head: Linear,
    latent: Option<Linear>,
    pub dims: GeneratorDims,
    pub vocab: usize,
    bos: usize,
    eos: usize,
}

/// Sampled sequences and their summed log-probabilities (one per row).
pub struct SampledBatch {
    pub sequences: Vec<Vec<usize>>,
    pub log_probs: Var,
}

impl Generator {
    pub fn new(vocab: usize, bos: usize, eos: usize, dims: GeneratorDims, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::GENERATOR);
        let mut params = ParamSet::new();
        let table: Vec<f64> = (0..vocab * dims.token_dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        let embedding = params.add("gen.embedding", Tensor::matrix(vocab, dims.token_dim, table)?)?;
        let cell = GruCell::new(&mut params, "gen.cell", dims.token_dim, dims.hidden, &mut rng)?;
        let head = Linear::new(&mut params, "gen.head", dims.hidden, vocab, &mut rng)?;
        let latent = if dims.latent_dim > 0 {
            Some(Linear::new(&mut params, "gen.latent", dims.latent_dim, dims.hidden, &mut rng)?)
        } else {
            None
        };
        Ok(Self { params, embedding, cell, head, latent, dims, vocab, bos, eos })
    }

    pub fn for_corpus(corpus: &ToyCorpus, dims: GeneratorDims, seed: u64) -> Result<Self> {
        Self::new(corpus.vocab_len(), corpus.bos(), corpus.eos(), dims, seed)
    }

    fn initial_state(&self, tape: &mut Tape, rows: usize, rng: Option<&mut Rng>) -> Result<Var> {
        match (self.latent, rng) {
            (Some(layer), Some(rng)) => {
                let z: Vec<f64> = (0..rows * self.dims.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
                let z = tape.constant(Tensor::matrix(rows, self.dims.latent_dim, z)?)?;
                let h = layer.forward(tape, z)?;
                tape.tanh(h)
            }
            _ => tape.constant(Tensor::zeros(&[rows, self.dims.hidden])),
        }
    }

    fn step(&self, tape: &mut Tape, inputs: &[usize], h: Var) -> Result<(Var, Var)> {
        let table = tape.param(self.embedding);
        let x = tape.gather(table, inputs)?;
        let h = self.cell.forward(tape, x, h)?;
        let logits = self.head.forward(tape, h)?;
        Ok((h, tape.log_softmax(logits)?))
    }

    /// Summed next-token log-likelihood of `batch` (end token included) and
    /// the number of predicted tokens. The latent seed, if any, is zero.
    pub fn log_likelihood(&self, tape: &mut Tape, batch: &[&[usize]]) -> Result<(Var, usize)> {
        if batch.is_empty() || batch.iter().any(|s| s.iter().any(|&t| t >= self.vocab)) {
            return Err(Error::InvalidArgument("empty batch or out-of-vocabulary token".to_string()));
        }
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by_key(|&i| core::cmp::Reverse(batch[i].len()));
        let rows: Vec<&[usize]> = order.iter().map(|&i| batch[i]).collect();
        let steps = rows[0].len() + 1;
        let mut h = match self.latent {
            Some(layer) => {
                let z = tape.constant(Tensor::zeros(&[rows.len(), self.dims.latent_dim]))?;
                let h = layer.forward(tape, z)?;
                tape.tanh(h)?
            }
            None => tape.constant(Tensor::zeros(&[rows.len(), self.dims.hidden]))?,
        };
        let mut active = rows.len();
        let mut total: Option<Var> = None;
        let mut count = 0;
        for t in 0..steps {
            let live = rows.iter().take_while(|s| s.len() + 1 > t).count();
            if live < active {
                let keep: Vec<usize> = (0..live).collect();
                h = tape.gather(h, &keep)?;
                active = live;
            }
            let inputs: Vec<usize> = rows[..live]
                .iter()
                .map(|s| if t == 0 { self.bos } else { s[t - 1] })
                .collect();
            let targets: Vec<usize> = rows[..live]
                .iter()
                .map(|s| if t < s.len() { s[t] } else { self.eos })
                .collect();
            let (next, ls) = self.step(tape, &inputs, h)?;
            h = next;
            let picked = tape.pick(ls, &targets)?;
            let s = tape.sum(picked)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            count += live;
        }
        Ok((total.expect("at least one step"), count))
    }

    /// Samples `rows` sequences in lockstep; a row stops at the end token or
    /// after `max_len` tokens. The end token is not part of the sequence.
    pub fn sample_batch(&self, tape: &mut Tape, rng: &mut Rng, rows: usize, max_len: usize) -> Result<SampledBatch> {
        let mut h = self.initial_state(tape, rows, Some(&mut *rng))?;
        let mut inputs = vec![self.bos; rows];
        let mut done = vec![false; rows];
        let mut sequences = vec![Vec::new(); rows];
        let mut total = tape.constant(Tensor::zeros(&[rows]))?;
        for _ in 0..=max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let (next, ls) = self.step(tape, &inputs, h)?;
            h = next;
            let dist = tape.value(ls).data().to_vec();
            let mut chosen = vec![0; rows];
            let mut mask = vec![0.0; rows];
            for r in 0..rows {
                if done[r] {
                    continue;
                }
                let probs: Vec<f64> = dist[r * self.vocab..(r + 1) * self.vocab].iter().map(|&l| libm::exp(l)).collect();
                if sequences[r].len() == max_len {
                    chosen[r] = self.eos;
                    done[r] = true;
                    continue;
                }
                let tok = sample_categorical(rng, &probs);
                chosen[r] = tok;
                mask[r] = 1.0;
                if tok == self.eos {
                    done[r] = true;
                } else {
                    sequences[r].push(tok);
                }
            }
            let picked = tape.pick(ls, &chosen)?;
            let mask = tape.constant(Tensor::vector(mask))?;
            let picked = tape.mul(picked, mask)?;
            total = tape.add(total, picked)?;
            inputs = chosen;
        }
        Ok(SampledBatch { sequences, log_probs: total })
    }

    /// Samples without recording gradients.
    pub fn sample(&self, rng: &mut Rng, n: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(n);
        let chunk = 64;
        while out.len() < n {
            let rows = chunk.min(n - out.len());
            let mut tape = Tape::new(&self.params);
            out.extend(self.sample_batch(&mut tape, rng, rows, max_len)?.sequences);
        }
        Ok(out)
    }

    /// Per-token perplexity over `sentences`.
    pub fn perplexity<'a, I>(&self, sentences: I) -> Result<f64>
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let all: Vec<&[usize]> = sentences.into_iter().collect();
        let (mut nll, mut n) = (0.0, 0);
        for chunk in all.chunks(128) {
            let mut tape = Tape::new(&self.params);
            let (ll, k) = self.log_likelihood(&mut tape, chunk)?;
            nll -= tape.scalar(ll);
            n += k;
        }
        Ok(libm::exp(nll / n.max(1) as f64))
    }
}

/// Bag-of-embeddings sentiment classifier giving P(negative).
#[derive(Debug, Clone)]
pub struct SentimentClassifier {
    pub params: ParamSet,
    embedding: ParamId,
    hidden: Linear,
    out: Linear,
    vocab: usize,
}

impl SentimentClassifier {
    pub fn new(vocab: usize, embed_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::CLASSIFIER);
        let mut params = ParamSet::new();
        let table: Vec<f64> = (0..vocab * embed_dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        let embedding = params.add("cls.embedding", Tensor::matrix(vocab, embed_dim, table)?)?;
        let hidden = Linear::new(&mut params, "cls.hidden", embed_dim, hidden, &mut rng)?;
        let out = Linear::new(&mut params, "cls.out", hidden.outputs, 1, &mut rng)?;
        Ok(Self { params, embedding, hidden, out, vocab })
    }

    /// Logits for a batch of token sequences.
    pub fn logits(&self, tape: &mut Tape, batch: &[&[usize]]) -> Result<Var> {
        let mut bag = vec![0.0; batch.len() * self.vocab];
        for (r, s) in batch.iter().enumerate() {
            if s.is_empty() {
                continue;
            }
            let w = 1.0 / s.len() as f64;
            for &t in s.iter() {
                if t >= self.vocab {
                    return Err(Error::UnknownToken(format!("#{t}")));
                }
                bag[r * self.vocab + t] += w;
            }
        }
        let bag = tape.constant(Tensor::matrix(batch.len(), self.vocab, bag)?)?;
        let table = tape.param(self.embedding);
        let x = tape.matmul(bag, table)?;
        let h = self.hidden.forward(tape, x)?;
        let h = tape.tanh(h)?;
        self.out.forward(tape, h)
    }

    pub fn prob_negative(&self, batch: &[&[usize]]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let z = self.logits(&mut tape, batch)?;
        Ok(tape.value(z).data().iter().map(|&z| crate::numkit::sigmoid(z)).collect())
    }

    /// Mean `-ln c` over negative sentences plus mean `-ln(1-c)` over
    /// positive ones.
    pub fn loss(&self, tape: &mut Tape, batch: &[&[usize]], negative: &[bool]) -> Result<Var> {
        let z = self.logits(tape, batch)?;
        classifier_loss(tape, z, negative)
    }
}

/// Two-class loss on logits `z`: mean softplus(-z) over violations plus mean
/// softplus(z) over clean rows.
pub fn classifier_loss(tape: &mut Tape, z: Var, negative: &[bool]) -> Result<Var> {
    let n_neg = negative.iter().filter(|&&b| b).count();
    let n_pos = negative.len() - n_neg;
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::SingleClass);
    }
    let sign: Vec<f64> = negative.iter().map(|&b| if b { -1.0 } else { 1.0 }).collect();
    let weight: Vec<f64> = negative
        .iter()
        .map(|&b| if b { 1.0 / n_neg as f64 } else { 1.0 / n_pos as f64 })
        .collect();
    let n = negative.len();
    let sign = tape.constant(Tensor::matrix(n, 1, sign)?)?;
    let weight = tape.constant(Tensor::matrix(n, 1, weight)?)?;
    let s = tape.mul(z, sign)?;
    let s = tape.softplus(s)?;
    let s = tape.mul(s, weight)?;
    tape.sum(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqGenConfig {
    pub seed: u64,
    pub corpus_size: usize,
    pub max_len: usize,
    pub bigram_smoothing: f64,
    pub generator: GeneratorDims,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_rate: f64,
    pub classifier_embed: usize,
    pub classifier_hidden: usize,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_rate: f64,
    pub finetune_updates: usize,
    pub finetune_batch: usize,
    pub policy_rate: f64,
    pub multiplier_rate: f64,
    pub alpha: f64,
    pub lambda_max: f64,
    pub initial_lambda: f64,
    pub clip_norm: f64,
    pub eval_samples: usize,
    /// Replaces the classifier penalty by a constant (testing aid).
    pub stub_penalty: Option<f64>,
}

impl Default for SeqGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_size: 6000,
            max_len: 20,
            bigram_smoothing: 0.01,
            generator: GeneratorDims::default(),
            pretrain_epochs: 15,
            pretrain_batch: 32,
            pretrain_rate: 5e-3,
            classifier_embed: 16,
            classifier_hidden: 32,
            classifier_epochs: 6,
            classifier_batch: 32,
            classifier_rate: 5e-4,
            finetune_updates: 200,
            finetune_batch: 16,
            policy_rate: 1e-3,
            multiplier_rate: 2e-4,
            alpha: 0.1,
            lambda_max: 1.0,
            initial_lambda: 0.0,
            clip_norm: 5.0,
            eval_samples: 1000,
            stub_penalty: None,
        }
    }
}

impl SeqGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.policy_rate > self.classifier_rate && self.classifier_rate > self.multiplier_rate && self.multiplier_rate > 0.0) {
            return Err(Error::RateOrdering(self.policy_rate, self.classifier_rate, self.multiplier_rate));
        }
        if self.max_len == 0 || self.finetune_batch < 2 || self.pretrain_batch == 0 || self.classifier_batch == 0 {
            return Err(Error::InvalidArgument("lengths and batch sizes must be positive".to_string()));
        }
        if !(self.lambda_max >= 0.0) || !(0.0..=self.lambda_max).contains(&self.initial_lambda) {
            return Err(Error::InvalidArgument(format!(
                "initial multiplier {} outside [0, {}]",
                self.initial_lambda, self.lambda_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_perplexity: f64,
    pub valid_perplexity: f64,
    pub bigram_perplexity: f64,
}

pub fn pretrain_generator(corpus: &ToyCorpus, config: &SeqGenConfig) -> Result<(Generator, PretrainReport)> {
    let train: Vec<&[usize]> = corpus.split(CorpusSplit::Train).map(|s| s.tokens.as_slice()).collect();
    let valid: Vec<&[usize]> = corpus.split(CorpusSplit::Valid).map(|s| s.tokens.as_slice()).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".to_string()));
    }
    let mut gen = Generator::for_corpus(corpus, config.generator, config.seed)?;
    let initial_perplexity = gen.perplexity(valid.iter().copied())?;
    let mut rng = rng::stream(config.seed, streams::PRETRAIN);
    let adam = Adam::with_clip(config.clip_norm);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.pretrain_batch) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| train[i]).collect();
            let grads = {
                let mut tape = Tape::new(&gen.params);
                let (ll, n) = gen.log_likelihood(&mut tape, &batch)?;
                let loss = tape.scale(ll, -1.0 / n as f64)?;
                if !tape.scalar(loss).is_finite() {
                    return Err(Error::Divergence("generator likelihood".to_string()));
                }
                tape.backward(loss)?
            };
            gen.params.accumulate(&grads);
            adam.step(&mut gen.params, config.pretrain_rate)?;
        }
    }
    let valid_perplexity = gen.perplexity(valid.iter().copied())?;
    if !valid_perplexity.is_finite() {
        return Err(Error::Divergence("validation perplexity".to_string()));
    }
    let oracle = BigramOracle::from_corpus(corpus, config.bigram_smoothing, config.max_len);
    let bigram_perplexity = oracle.perplexity(valid.iter().copied(), corpus.bos(), corpus.eos())?;
    Ok((gen, PretrainReport { initial_perplexity, valid_perplexity, bigram_perplexity }))
}

/// Fraction of `batch` the classifier labels correctly at threshold 0.5.
pub fn classifier_accuracy(classifier: &SentimentClassifier, batch: &[&[usize]], negative: &[bool]) -> Result<f64> {
    let p = classifier.prob_negative(batch)?;
    let hits = p.iter().zip(negative).filter(|(&p, &n)| (p > 0.5) == n).count();
    Ok(hits as f64 / negative.len().max(1) as f64)
}

pub fn train_constraint_classifier(corpus: &ToyCorpus, config: &SeqGenConfig) -> Result<(SentimentClassifier, f64)> {
    let train: Vec<&Sentence> = corpus.split(CorpusSplit::Train).collect();
    let labels: Vec<bool> = train.iter().map(|s| s.negative).collect();
    if labels.iter().all(|&b| b) || labels.iter().all(|&b| !b) {
        return Err(Error::SingleClass);
    }
    let mut cls = SentimentClassifier::new(corpus.vocab_len(), config.classifier_embed, config.classifier_hidden, config.seed)?;
    let mut rng = rng::stream(config.seed, streams::CLASSIFIER);
    let adam = Adam::with_clip(config.clip_norm);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.classifier_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.classifier_batch) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| train[i].tokens.as_slice()).collect();
            let neg: Vec<bool> = chunk.iter().map(|&i| labels[i]).collect();
            if neg.iter().all(|&b| b) || neg.iter().all(|&b| !b) {
                continue;
            }
            let grads = {
                let mut tape = Tape::new(&cls.params);
                let loss = cls.loss(&mut tape, &batch, &neg)?;
                tape.backward(loss)?
            };
            cls.params.accumulate(&grads);
            adam.step(&mut cls.params, config.classifier_rate)?;
        }
    }
    let valid: Vec<&Sentence> = corpus.split(CorpusSplit::Valid).collect();
    let batch: Vec<&[usize]> = valid.iter().map(|s| s.tokens.as_slice()).collect();
    let neg: Vec<bool> = valid.iter().map(|s| s.negative).collect();
    let acc = classifier_accuracy(&cls, &batch, &neg)?;
    Ok((cls, acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqGenLogEntry {
    pub update: usize,
    pub reward: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub violation_rate: f64,
}

/// Policy-gradient fine-tuning on complete sequences with the penalised
/// reward `R - λ c`. With `constrained == false` the multiplier stays at 0.
pub fn train_constrained_generator(
    pretrained: &Generator,
    classifier: &SentimentClassifier,
    oracle: &BigramOracle,
    corpus: &ToyCorpus,
    config: &SeqGenConfig,
    constrained: bool,
) -> Result<(Generator, Vec<SeqGenLogEntry>)> {
    config.validate()?;
    let mut gen = pretrained.clone();
    gen.params.reset_optimizer();
    let mut rng = rng::stream(config.seed, streams::SEQ_POLICY);
    let adam = Adam::with_clip(config.clip_norm);
    let mut lambda = if constrained { config.initial_lambda } else { 0.0 };
    let b = config.finetune_batch;
    let mut log = Vec::with_capacity(config.finetune_updates);
    for update in 0..config.finetune_updates {
        let grads = {
            let mut tape = Tape::new(&gen.params);
            let batch = gen.sample_batch(&mut tape, &mut rng, b, config.max_len)?;
            let refs: Vec<&[usize]> = batch.sequences.iter().map(Vec::as_slice).collect();
            let rewards: Vec<f64> = refs
                .iter()
                .map(|s| if s.is_empty() { Ok(0.0) } else { sequence_reward(s, oracle, corpus) })
                .collect::<Result<_>>()?;
            let penalties = match config.stub_penalty {
                Some(c) => vec![c; b],
                None => classifier.prob_negative(&refs)?,
            };
            let shaped: Vec<f64> = rewards.iter().zip(&penalties).map(|(r, c)| r - lambda * c).collect();
            let total: f64 = shaped.iter().sum();
            // leave-one-out baseline
            let adv: Vec<f64> = shaped.iter().map(|&x| x - (total - x) / (b - 1) as f64).collect();
            let violations = refs.iter().filter(|s| corpus.lexicon_negative(s)).count();
            if constrained {
                for &c in &penalties {
                    lambda = lambda_update(lambda, c, config.alpha, config.lambda_max, config.multiplier_rate);
                }
            }
            log.push(SeqGenLogEntry {
                update,
                reward: rewards.iter().sum::<f64>() / b as f64,
                penalty: penalties.iter().sum::<f64>() / b as f64,
                lambda,
                violation_rate: violations as f64 / b as f64,
            });
            let w = tape.constant(Tensor::vector(adv.iter().map(|a| -a / b as f64).collect()))?;
            let loss = tape.mul(batch.log_probs, w)?;
            let loss = tape.sum(loss)?;
            tape.backward(loss)?
        };
        gen.params.accumulate(&grads);
        adam.step(&mut gen.params, config.policy_rate)?;
    }
    Ok((gen, log))
}

/// Percentage of `samples` whose lexicon label is negative.
pub fn violation_rate_of(corpus: &ToyCorpus, samples: &[Vec<usize>]) -> f64 {
    let bad = samples.iter().filter(|s| corpus.lexicon_negative(s)).count();
    100.0 * bad as f64 / samples.len().max(1) as f64
}

/// Samples `n` sequences and scores them with the lexicon rule.
pub fn violation_rate(gen: &Generator, corpus: &ToyCorpus, n: usize, max_len: usize, seed: u64) -> Result<(f64, Vec<Vec<usize>>)> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 samples, got {n}")));
    }
    let mut rng = rng::stream(seed, streams::SEQ_EVAL);
    let samples = gen.sample(&mut rng, n, max_len)?;
    Ok((violation_rate_of(corpus, &samples), samples))
}

/// Mean percentile of sample rewards within the test-split reward distribution.
pub fn reward_percentile(samples: &[Vec<usize>], oracle: &BigramOracle, corpus: &ToyCorpus) -> Result<f64> {
    let mut reference: Vec<f64> = corpus
        .split(CorpusSplit::Test)
        .map(|s| sequence_reward(&s.tokens, oracle, corpus))
        .collect::<Result<_>>()?;
    reference.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for s in samples {
        let r = if s.is_empty() { 0.0 } else { sequence_reward(s, oracle, corpus)? };
        acc += percentile_of(&reference, r);
    }
    Ok(acc / samples.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub violation_rate: f64,
    pub reward_percentile: f64,
    pub final_lambda: f64,
    pub log: Vec<SeqGenLogEntry>,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub pretrain: PretrainReport,
    pub classifier_accuracy: f64,
    pub pretrained_violation_rate: f64,
    pub baseline: VariantReport,
    pub constrained: VariantReport,
}

/// Corpus, pretraining, classifier, then unconstrained and constrained
/// fine-tuning from the same pretrained generator.
pub fn run_demo(config: &SeqGenConfig) -> Result<(ToyCorpus, DemoReport)> {
    config.validate()?;
    let corpus = build_corpus(config.seed, config.corpus_size)?;
    let (gen, pretrain) = pretrain_generator(&corpus, config)?;
    let (cls, classifier_accuracy) = train_constraint_classifier(&corpus, config)?;
    let oracle = BigramOracle::from_corpus(&corpus, config.bigram_smoothing, config.max_len);
    let (pretrained_violation_rate, _) = violation_rate(&gen, &corpus, config.eval_samples, config.max_len, config.seed)?;
    let variant = |constrained: bool| -> Result<VariantReport> {
        let (tuned, log) = train_constrained_generator(&gen, &cls, &oracle, &corpus, config, constrained)?;
        let (vr, samples) = violation_rate(&tuned, &corpus, config.eval_samples, config.max_len, config.seed)?;
        Ok(VariantReport {
            violation_rate: vr,
            reward_percentile: reward_percentile(&samples, &oracle, &corpus)?,
            final_lambda: log.last().map_or(0.0, |e| e.lambda),
            log,
            samples: samples.iter().map(|s| corpus.decode(s)).collect(),
        })
    };
    let baseline = variant(false)?;
    let constrained = variant(true)?;
    Ok((
        corpus,
        DemoReport { pretrain, classifier_accuracy, pretrained_violation_rate, baseline, constrained },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_labelled_by_lexicon() {
        let c = build_corpus(3, 500).unwrap();
        for s in &c.sentences {
            assert!(s.tokens.iter().any(|&t| c.is_negative_word(t) || c.is_positive_word(t)));
            assert_eq!(c.lexicon_negative(&s.tokens), s.negative);
        }
        assert_eq!(c.train.len() + c.valid.len() + c.test.len(), 500);
        assert!(c.vocab_len() > 150 && c.vocab_len() < 250, "{}", c.vocab_len());
    }

    #[test]
    fn encode_round_trips() {
        let c = build_corpus(1, 100).unwrap();
        let s = &c.sentences[0].tokens;
        assert_eq!(&c.encode(&c.decode(s)).unwrap(), s);
        assert!(matches!(c.encode("the zzz"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn bigram_rows_normalise() {
        let c = build_corpus(2, 300).unwrap();
        let o = BigramOracle::from_corpus(&c, 0.5, 20);
        for a in [0, 5, 40] {
            let s: f64 = (0..c.vocab_len()).map(|b| libm::exp(o.log_prob(a, b))).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_rows_terminate() {
        let c = build_corpus(2, 200).unwrap();
        let g = Generator::for_corpus(&c, GeneratorDims { token_dim: 4, hidden: 8, latent_dim: 3 }, 0).unwrap();
        let mut rng = rng::stream(0, streams::SEQ_EVAL);
        let s = g.sample(&mut rng, 70, 5).unwrap();
        assert_eq!(s.len(), 70);
        assert!(s.iter().all(|x| x.len() <= 5 && !x.contains(&c.eos())));
    }

    #[test]
    fn rate_ordering_is_checked() {
        let cfg = SeqGenConfig { multiplier_rate: 1.0, ..SeqGenConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::RateOrdering(..))));
    }
}
