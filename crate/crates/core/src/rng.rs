//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! a run seed, so adding draws in one component never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers.
pub mod streams {
    pub const CATALOG: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PREDICTOR: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const GOALS: u64 = 5;
    pub const FEEDBACK: u64 = 6;
    pub const POLICY: u64 = 7;
    pub const DISCRIMINATOR: u64 = 8;
    pub const PRETRAIN: u64 = 9;
    pub const CORPUS: u64 = 10;
    pub const GENERATOR: u64 = 11;
    pub const EVAL: u64 = 12;
    pub const DISCRIMINATOR_INIT: u64 = 13;
    pub const EVAL_FEEDBACK: u64 = 14;
    pub const EVAL_POLICY: u64 = 15;
    pub const CLASSIFIER: u64 = 16;
    pub const SEQ_POLICY: u64 = 17;
    pub const SEQ_EVAL: u64 = 18;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform categorical draw from a probability vector.
pub fn sample_categorical<R: rand::Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last class with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
