use crate::policy::Policy;
use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure modes of
/// the public operations.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    VocabError { id: u32, vocab_size: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("enumeration budget exceeded: {leaves:.3e} leaves > budget {budget:.3e}")]
    EnumerationBudget { leaves: f64, budget: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty benchmark")]
    EmptyBenchmark,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible task spec: no valid instance found in {attempts} attempts")]
    InfeasibleSpec { attempts: usize },

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize, last_good: Box<Policy> },

    #[error("incomplete trajectory buffer: missing entry (t={t}, prompt={prompt_id})")]
    IncompleteBuffer { t: usize, prompt_id: u32 },

    #[error("duplicate prompt id {0}")]
    DuplicatePrompt(u32),

    #[error("infeasible checkpoint window: {0}")]
    InfeasibleWindow(String),

    #[error("benchmark key mismatch: {0}")]
    KeyMismatch(String),

    #[error("estimator domain error: k={k} exceeds sample count n={n}")]
    EstimatorDomain { k: usize, n: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    BadFormat(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
