//! Timbre-preserving adversarial attack laboratory for speaker identification.
//!
//! A synthetic multi-speaker corpus is turned into log-mel features, speaker
//! classifiers are trained on them, and a conditional generator is trained to
//! produce mels that fool a target classifier while staying close to the
//! speaker's own reconstruction. A black-box variant distils a substitute
//! classifier from posterior queries and attacks that instead.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advconstraint;
pub mod audiofeat;
pub mod error;
pub mod generator;
pub mod harness;
pub mod numkernel;
pub mod optim;
pub mod parallel;
pub mod seed;
pub mod speakernet;
pub mod substitute;

pub use error::{Error, Result};
