//! Desk-scale laboratory for studying post-training dynamics of small
//! autoregressive sequence policies.
//!
//! The crate provides:
//!
//! - [`policy`] — a tabular order-n sequence policy with exact log-probs,
//!   sampling, exact enumeration of the completion distribution, analytic
//!   NLL gradients, and sequence-level KL between policies.
//! - [`tasks`] — deterministic generators and verifiers for a
//!   micro-Countdown target task and copy/reverse/parity retention tasks.
//! - [`trajectory`] — checkpoint harvesting, the trajectory buffer, and the
//!   checkpoint/reference mixture distributions used for trajectory-mixed
//!   supervision (TMS).
//! - [`trainers`] — standard SFT, self/final distillation, REINFORCE, GRPO,
//!   and the TMS student, all sharing one optimizer path.
//! - [`metrics`] — policy-label divergence, KL-to-base, total variation,
//!   Pinsker and KL-drift bound checks, forgetting/transfer scores, and the
//!   Pass@K / SC-Acc / answer-entropy diversity suite.
//!
//! Everything is deterministic: all randomness flows through named streams
//! derived from `(seed, tag, indices)` (see [`rng`]).

pub mod checkpoint;
pub mod error;
pub mod expr;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod tasks;
pub mod trainers;
pub mod trajectory;
pub mod vocab;

pub use error::{LabError, Result};
pub use policy::{DecodePolicy, GradTable, KlMode, Policy, PromptSet, SeqDist};
pub use vocab::{TokenId, TokenSeq, Vocab};
