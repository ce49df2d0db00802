//! Reward-constrained interactive recommendation.
//!
//! A recommender policy proposes attribute values, a catalog retrieves the
//! nearest items, and a simulated user answers with templated feedback. A
//! violation discriminator learned from the session logs is folded into the
//! policy objective through a Lagrange multiplier, and is also used to gate
//! retrieval. The same constrained policy-gradient machinery drives a small
//! sentiment-constrained sequence generator.
//!
//! The crate is `no_std` (it needs `alloc`); file formats, the HTTP service and
//! the command line live in the companion `rcr` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod catalog;
pub mod constraint;
mod error;
pub mod eval;
pub mod numkit;
pub mod recommender;
pub mod rng;
pub mod seqgen;
pub mod trainer;
pub mod user_sim;

pub use error::{Error, Result};
