//! Feedback and item encoders, the recurrent state tracker, the
//! multi-discrete policy and gated top-K retrieval.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::catalog::{nearest_items, AttributePredictor, Catalog};
use crate::numkit::{GruCell, Linear, ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::{self, sample_categorical, streams};
use crate::user_sim::{FeedbackEvent, UserSimulator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub token_dim: usize,
    pub text_hidden: usize,
    pub d_txt: usize,
    pub fusion: usize,
    pub d_s: usize,
    pub trunk: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            token_dim: 16,
            text_hidden: 32,
            d_txt: 32,
            fusion: 64,
            d_s: 64,
            trunk: 64,
        }
    }
}

/// Embedding, gated recurrent cell and linear read-out over token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub cell: GruCell,
    pub out: Linear,
}

impl TextEncoder {
    pub fn bind(params: &ParamSet) -> Result<Self> {
        Ok(Self {
            embedding: params.id("text_encoder.embedding")?,
            cell: GruCell::bind(params, "text_encoder.cell")?,
            out: Linear::bind(params, "text_encoder.out")?,
        })
    }

    pub fn encode(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let hidden = self.cell.hidden;
        let mut h = tape.constant(Tensor::zeros(&[hidden]))?;
        if !tokens.is_empty() {
            let table = tape.param(self.embedding);
            for &tok in tokens {
                let x = tape.gather(table, &[tok])?;
                h = self.cell.forward(tape, x, h)?;
            }
        }
        let y = self.out.forward(tape, h)?;
        tape.tanh(y)
    }
}

/// Fusion network `g` followed by the recurrent cell `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tracker {
    pub fuse_in: Linear,
    pub fuse_out: Linear,
    pub cell: GruCell,
}

impl Tracker {
    /// `s_t = f(g([c_vis, c_txt]), s_prev)`.
    pub fn advance(&self, tape: &mut Tape, s_prev: Var, c_vis: Var, c_txt: Var) -> Result<Var> {
        let x = tape.concat(&[c_vis, c_txt])?;
        let g = self.fuse_in.forward(tape, x)?;
        let g = tape.tanh(g)?;
        let g = self.fuse_out.forward(tape, g)?;
        let g = tape.tanh(g)?;
        let s = self.cell.forward(tape, g, s_prev)?;
        if !tape.value(s).is_finite() {
            return Err(Error::NonFinite("tracker state"));
        }
        Ok(s)
    }
}

/// Three-layer trunk whose last layer is split into one softmax per attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub heads: Linear,
    pub cardinalities: Vec<usize>,
}

impl Policy {
    /// Log-probabilities, one vector per head.
    pub fn forward(&self, tape: &mut Tape, s: Var) -> Result<Vec<Var>> {
        let h = self.hidden1.forward(tape, s)?;
        let h = tape.tanh(h)?;
        let h = self.hidden2.forward(tape, h)?;
        let h = tape.tanh(h)?;
        let logits = self.heads.forward(tape, h)?;
        let mut out = Vec::with_capacity(self.cardinalities.len());
        let mut off = 0;
        for &c in &self.cardinalities {
            let head = tape.slice_cols(logits, off, c)?;
            out.push(tape.log_softmax(head)?);
            off += c;
        }
        Ok(out)
    }

    /// Sum of the picked log-probabilities of `action` as a tape scalar.
    pub fn log_prob_var(&self, tape: &mut Tape, heads: &[Var], action: &[usize]) -> Result<Var> {
        check_action(&self.cardinalities, action)?;
        let mut total: Option<Var> = None;
        for (&h, &a) in heads.iter().zip(action) {
            let p = tape.pick(h, &[a])?;
            total = Some(match total {
                None => p,
                Some(t) => tape.add(t, p)?,
            });
        }
        let total = total.expect("policy has heads");
        tape.sum(total)
    }
}

fn check_action(cardinalities: &[usize], action: &[usize]) -> Result<()> {
    if action.len() != cardinalities.len() || action.iter().zip(cardinalities).any(|(&a, &c)| a >= c) {
        return Err(Error::InvalidArgument(alloc::format!("action {action:?} outside {cardinalities:?}")));
    }
    Ok(())
}

/// Independent categorical distributions, one per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub heads: Vec<Vec<f64>>,
}

impl ActionDistribution {
    pub fn from_log_probs(tape: &Tape, heads: &[Var]) -> Self {
        Self {
            heads: heads
                .iter()
                .map(|&h| tape.value(h).data().iter().map(|&l| libm::exp(l)).collect())
                .collect(),
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.heads.iter().map(|p| sample_categorical(rng, p)).collect()
    }

    pub fn log_prob(&self, action: &[usize]) -> Result<f64> {
        let cards: Vec<usize> = self.heads.iter().map(Vec::len).collect();
        check_action(&cards, action)?;
        Ok(self.heads.iter().zip(action).map(|(p, &a)| libm::log(p[a])).sum())
    }

    /// Most likely class per head.
    pub fn mode(&self) -> Vec<usize> {
        self.heads.iter().map(|p| crate::catalog::argmax(p)).collect()
    }
}

/// Encoder, tracker and policy sharing one parameter set `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recommender {
    pub params: ParamSet,
    pub text: TextEncoder,
    pub tracker: Tracker,
    pub policy: Policy,
    pub dims: ModelDims,
}

impl Recommender {
    pub fn new(catalog: &Catalog, sim: &UserSimulator, dims: ModelDims, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::MODEL_INIT);
        let mut params = ParamSet::new();
        let vocab = sim.vocabulary().len();
        let embedding = params.add(
            "text_encoder.embedding",
            crate::numkit::init_matrix(&mut rng, vocab, dims.token_dim),
        )?;
        let cell = GruCell::new(&mut params, "text_encoder.cell", dims.token_dim, dims.text_hidden, &mut rng)?;
        let out = Linear::new(&mut params, "text_encoder.out", dims.text_hidden, dims.d_txt, &mut rng)?;
        let c_vis = item_encoding_len(catalog);
        let fuse_in = Linear::new(&mut params, "tracker.fuse_in", c_vis + dims.d_txt, dims.fusion, &mut rng)?;
        let fuse_out = Linear::new(&mut params, "tracker.fuse_out", dims.fusion, dims.fusion, &mut rng)?;
        let tcell = GruCell::new(&mut params, "tracker.cell", dims.fusion, dims.d_s, &mut rng)?;
        let hidden1 = Linear::new(&mut params, "policy.hidden1", dims.d_s, dims.trunk, &mut rng)?;
        let hidden2 = Linear::new(&mut params, "policy.hidden2", dims.trunk, dims.trunk, &mut rng)?;
        let heads = Linear::new(&mut params, "policy.heads", dims.trunk, catalog.schema().one_hot_len(), &mut rng)?;
        Ok(Self {
            params,
            text: TextEncoder { embedding, cell, out },
            tracker: Tracker {
                fuse_in,
                fuse_out,
                cell: tcell,
            },
            policy: Policy {
                hidden1,
                hidden2,
                heads,
                cardinalities: catalog.schema().cardinalities(),
            },
            dims,
        })
    }

    /// Rebinds the layer handles to a loaded parameter set.
    pub fn from_params(params: ParamSet, catalog: &Catalog) -> Result<Self> {
        let text = TextEncoder::bind(&params)?;
        let tracker = Tracker {
            fuse_in: Linear::bind(&params, "tracker.fuse_in")?,
            fuse_out: Linear::bind(&params, "tracker.fuse_out")?,
            cell: GruCell::bind(&params, "tracker.cell")?,
        };
        let policy = Policy {
            hidden1: Linear::bind(&params, "policy.hidden1")?,
            hidden2: Linear::bind(&params, "policy.hidden2")?,
            heads: Linear::bind(&params, "policy.heads")?,
            cardinalities: catalog.schema().cardinalities(),
        };
        if policy.heads.outputs != catalog.schema().one_hot_len() {
            return Err(Error::InvalidArgument("policy heads do not match the schema".into()));
        }
        if tracker.fuse_in.inputs != item_encoding_len(catalog) + text.out.outputs {
            return Err(Error::InvalidArgument("tracker input does not match the catalog".into()));
        }
        let dims = ModelDims {
            token_dim: params.value(text.embedding).cols(),
            text_hidden: text.cell.hidden,
            d_txt: text.out.outputs,
            fusion: tracker.fuse_out.outputs,
            d_s: tracker.cell.hidden,
            trunk: policy.hidden1.outputs,
        };
        Ok(Self {
            params,
            text,
            tracker,
            policy,
            dims,
        })
    }

    /// Encodes a token-id sequence to `c_txt` outside any training graph.
    pub fn encode_text(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let v = self.text.encode(&mut tape, tokens)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn advance_state(&self, s_prev: &[f64], c_vis: &[f64], c_txt: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let s = tape.constant(Tensor::vector(s_prev.to_vec()))?;
        let v = tape.constant(Tensor::vector(c_vis.to_vec()))?;
        let t = tape.constant(Tensor::vector(c_txt.to_vec()))?;
        let s = self.tracker.advance(&mut tape, s, v, t)?;
        Ok(tape.value(s).data().to_vec())
    }

    pub fn action_distribution(&self, s: &[f64]) -> Result<ActionDistribution> {
        let mut tape = Tape::new(&self.params);
        let s = tape.constant(Tensor::vector(s.to_vec()))?;
        let heads = self.policy.forward(&mut tape, s)?;
        Ok(ActionDistribution::from_log_probs(&tape, &heads))
    }

    pub fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.dims.d_s]
    }
}

/// Memoised `c_txt` per (template, slot) for a frozen text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCache {
    entries: Vec<Option<Vec<f64>>>,
}

impl TextCache {
    pub fn new(sim: &UserSimulator) -> Self {
        Self {
            entries: vec![None; sim.num_utterance_keys()],
        }
    }

    pub fn get(&mut self, model: &Recommender, sim: &UserSimulator, event: FeedbackEvent) -> Result<&[f64]> {
        let key = sim.utterance_key(event.template, event.slot);
        if self.entries[key].is_none() {
            let u = sim.utterance(event.template, event.slot)?;
            let ids = sim.vocabulary().ids(&u.tokens)?;
            self.entries[key] = Some(model.encode_text(&ids)?);
        }
        Ok(self.entries[key].as_deref().expect("filled above"))
    }

    pub fn clear(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
    }
}

pub fn item_encoding_len(catalog: &Catalog) -> usize {
    catalog.embed_dim() + catalog.schema().one_hot_len()
}

/// `c_vis`: the item embedding followed by one-hot predicted attributes.
pub fn encode_item(catalog: &Catalog, predictor: &AttributePredictor, item: usize) -> Vec<f64> {
    let it = catalog.item(item);
    let mut v = it.embedding.clone();
    v.extend(catalog.schema().one_hot(&predictor.predict(&it.embedding)));
    v
}

/// `c_vis` for every item using the catalog's installed retrieval attributes.
pub fn item_encodings(catalog: &Catalog) -> Vec<Vec<f64>> {
    catalog
        .items()
        .iter()
        .map(|it| {
            let mut v = it.embedding.clone();
            v.extend(catalog.schema().one_hot(catalog.retrieval_attrs(it.id)));
            v
        })
        .collect()
}

/// What happened at one turn of a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Vec<usize>,
    pub items: Vec<usize>,
    pub rejects: usize,
    /// Hard-filter constraints dropped to find a match.
    #[serde(default)]
    pub relaxed: usize,
    pub reward: f64,
    pub penalty: f64,
    /// Oracle count summed over the recommended items.
    pub violations: usize,
    /// The user's reply to this turn; `None` on success or at the cap.
    pub feedback: Option<FeedbackEvent>,
}

/// Live state of one session: tracker state, step counter and log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub s: Vec<f64>,
    pub t: usize,
    pub history: Vec<FeedbackEvent>,
    pub log: Vec<StepRecord>,
}

impl SessionState {
    pub fn new(d_s: usize) -> Self {
        Self {
            s: vec![0.0; d_s],
            t: 0,
            history: Vec::new(),
            log: Vec::new(),
        }
    }
}

/// One candidate the gate looked at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub item: usize,
    pub violation_prob: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub items: Vec<usize>,
    pub rejects: usize,
    pub trace: Vec<GateDecision>,
}

/// Top-`k` retrieval for `query`. With a gate, candidates whose violation
/// probability exceeds `alpha` are skipped in favour of the next-nearest, at
/// most `max_rejects` times; after that the remaining candidates are taken
/// as ranked.
pub fn recommend(
    query: &[usize],
    catalog: &Catalog,
    k: usize,
    pool: &[usize],
    gate: Option<&mut dyn FnMut(usize) -> Result<f64>>,
    alpha: f64,
    max_rejects: usize,
) -> Result<Recommendation> {
    let Some(gate) = gate else {
        let items = nearest_items(catalog, query, k, pool)?.iter().map(|n| n.id).collect();
        return Ok(Recommendation {
            items,
            rejects: 0,
            trace: Vec::new(),
        });
    };
    let depth = (k + max_rejects).min(pool.len());
    let ranked = nearest_items(catalog, query, depth.max(k.min(pool.len())), pool)?;
    let mut items = Vec::with_capacity(k);
    let mut trace = Vec::new();
    let mut rejects = 0;
    for n in &ranked {
        if items.len() == k {
            break;
        }
        if rejects == max_rejects {
            items.push(n.id);
            continue;
        }
        let p = gate(n.id)?;
        let rejected = p > alpha;
        trace.push(GateDecision {
            item: n.id,
            violation_prob: p,
            rejected,
        });
        if rejected {
            rejects += 1;
        } else {
            items.push(n.id);
        }
    }
    if items.len() < k {
        // the pool ran out: readmit the best-ranked rejected candidates
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        let mut missing = k - items.len();
        for n in &ranked {
            if items.contains(&n.id) {
                chosen.push(n.id);
            } else if missing > 0 {
                chosen.push(n.id);
                missing -= 1;
            }
        }
        items = chosen;
    }
    Ok(Recommendation { items, rejects, trace })
}
