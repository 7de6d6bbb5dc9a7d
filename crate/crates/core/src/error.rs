//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Variants carry
//! enough context (tensor names, shapes, indices) for a CLI diagnostic
//! without a backtrace.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ---- I/O and serialization ----
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    // ---- tensor container ----
    #[error("bad tensor file {path}: {reason}")]
    BadTensorFile { path: PathBuf, reason: String },
    #[error("missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("tensor `{name}` shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor `{name}` contains non-finite entries")]
    NonFiniteTensor { name: String },

    // ---- token data ----
    #[error("bad token dataset {path}: {reason}")]
    BadTokenFile { path: PathBuf, reason: String },
    #[error("token id {id} out of range (vocab size {vocab_size})")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("empty token sequence")]
    EmptyTokenSequence,
    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    // ---- model / hooks ----
    #[error("invalid model config: {0}")]
    BadModelConfig(String),
    #[error("hook {hook} not resolvable (n_layers {n_layers}, seq len {seq_len})")]
    UnresolvableHook {
        hook: String,
        n_layers: usize,
        seq_len: usize,
    },

    // ---- sae ----
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("latent index {index} out of range (n_latents {n_latents})")]
    InvalidLatent { index: usize, n_latents: usize },
    #[error("decoder row {index} has zero norm")]
    ZeroNormRow { index: usize },
    #[error("activation equals the decoder bias; cosine about the bias is undefined")]
    ZeroNormAboutBias,
    #[error("invalid latent vector: {0}")]
    BadLatentVector(String),
    #[error("no activations supplied")]
    NoActivations,

    // ---- composer ----
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("base latent vector has no active latents")]
    EmptyBaseCode,
    #[error("cholesky factorization failed (degenerate covariance even after ridge)")]
    CholeskyFailure,
    #[error("need {needed} candidate latents, only {available} available")]
    InsufficientCandidates { needed: usize, available: usize },
    #[error("candidate pool exhausted while assigning replacement latents")]
    EmptyCandidatePool,

    // ---- perturb ----
    #[error("perturbation direction has zero norm (base equals target)")]
    ZeroDirection,
    #[error("invalid sweep spec: {0}")]
    BadSweepSpec(String),
    #[error("non-finite readout at sweep step {step}")]
    NonFiniteReadout { step: usize },

    // ---- metrics ----
    #[error("curve too short: length {len}, need at least {min}")]
    CurveTooShort { len: usize, min: usize },
    #[error("curve contains non-finite values")]
    NonFiniteCurve,
    #[error("curve is identically zero; ratio metric undefined")]
    AllZeroCurve,
    #[error("curve starts at {first} which is not below the threshold {threshold}")]
    ApPrecondition { first: f64, threshold: f64 },
    #[error("empty step distribution")]
    EmptyDistribution,
    #[error("all detections censored; no statistics available")]
    AllCensored,

    // ---- harness ----
    #[error("invalid experiment config: {0}")]
    BadExperimentConfig(String),
    #[error("target types must include model_generated (the KS reference distribution)")]
    MissingReferenceType,
    #[error("no target types requested")]
    EmptyTargetTypes,
    #[error("could not draw a base activation with active latents after {attempts} attempts")]
    NoUsableBase { attempts: usize },
    #[error("output {path} missing or unreadable: {reason}")]
    BadRunArtifact { path: PathBuf, reason: String },
}

impl Error {
    /// Coarse diagnostic category; the CLI maps this to its exit code.
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Io(_) | Csv(_) => ErrorCategory::Io,
            Json(_)
            | BadTensorFile { .. }
            | MissingTensor { .. }
            | ShapeMismatch { .. }
            | NonFiniteTensor { .. }
            | BadTokenFile { .. }
            | BadRunArtifact { .. } => ErrorCategory::Data,
            TomlParse(_)
            | BadModelConfig(_)
            | BadExperimentConfig(_)
            | BadSweepSpec(_)
            | BadParameter(_)
            | MissingReferenceType
            | EmptyTargetTypes => ErrorCategory::Config,
            TokenOutOfRange { .. }
            | EmptyTokenSequence
            | SequenceTooLong { .. }
            | UnresolvableHook { .. }
            | DimensionMismatch { .. }
            | InvalidLatent { .. }
            | BadLatentVector(_)
            | NoActivations
            | EmptyBaseCode
            | CurveTooShort { .. }
            | ApPrecondition { .. }
            | EmptyDistribution
            | NoUsableBase { .. } => ErrorCategory::Usage,
            ZeroNormRow { .. }
            | ZeroNormAboutBias
            | CholeskyFailure
            | InsufficientCandidates { .. }
            | EmptyCandidatePool
            | ZeroDirection
            | NonFiniteReadout { .. }
            | NonFiniteCurve
            | AllZeroCurve
            | AllCensored => ErrorCategory::Numeric,
        }
    }
}

/// Diagnostic categories, each with a stable process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Malformed or inconsistent configuration (exit 2).
    Config,
    /// Filesystem failure (exit 3).
    Io,
    /// Malformed input or output data files (exit 4).
    Data,
    /// Precondition violation on an operation (exit 5).
    Usage,
    /// Numerical failure: degenerate inputs, non-finite values (exit 6).
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Usage => 5,
            ErrorCategory::Numeric => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Data => "data",
            ErrorCategory::Usage => "usage",
            ErrorCategory::Numeric => "numeric",
        }
    }
}
