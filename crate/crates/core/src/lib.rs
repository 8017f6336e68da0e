//! Forecasting from causally masked information with outcome-resolved rewards.
//!
//! The crate is organised as a pipeline:
//!
//! - [`timeline`]: timestamped documents, resolved events, the causal mask and
//!   the JSONL dataset format.
//! - [`synthworld`]: seeded synthetic worlds with known conditional outcome
//!   probabilities, plus the frozen resolver that sees the unmasked corpus.
//! - [`scoring`]: log score, Brier score, ECE, median ensembling and
//!   bootstrap intervals.
//! - [`policy`]: a small stochastic trajectory policy (evidence selection
//!   followed by a probability-bin emission) with exact log-probabilities and
//!   score-function gradients.
//! - [`grpo`]: group-relative advantages, the policy-gradient update, the
//!   training loop and the evaluation harness.

pub mod grpo;
pub mod policy;
pub mod rng;
pub mod scoring;
pub mod synthworld;
pub mod timeline;

pub use grpo::{evaluate, train, EvalMode, Group, TrainConfig, TrainLog};
pub use policy::{PolicyParams, Trajectory};
pub use scoring::{MetricsReport, Probability};
pub use synthworld::{generate_world, resolve, WorldConfig};
pub use timeline::{
    mask_state, validate_no_leakage, Dataset, EventRecord, MaskedState, SourceDoc, Timestamp,
};
