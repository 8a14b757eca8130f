//! Dual-branch compositional reasoning network for visual question
//! answering over a synthetic scene corpus.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major tensors, a define-by-run reverse-mode
//!   autodiff tape, an Adam optimizer, and the binary checkpoint format.
//! - [`vocab`]: vocabulary construction and word-embedding tables, with a
//!   loader for GloVe-style text vector files.
//! - [`encode`]: question bi-LSTM encoding and the two knowledge-base
//!   builders (object-region features and scene-graph text features).
//! - [`cell`]: one reasoning step — reason, extract, and update gates,
//!   including the super-diagonal bilinear fusion used by the
//!   object-region branch.
//! - [`model`]: the full two-branch network, answer classifier, and
//!   cross-entropy loss.
//! - [`data`]: synthetic scene/question generation, region features, and
//!   the JSONL dataset format.
//! - [`harness`]: training loop, evaluation, ablation/sweep suite, and
//!   attention-trace dumping.

pub mod cell;
pub mod data;
pub mod encode;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod vocab;

use thiserror::Error;

/// Element type for all tensor arithmetic. The default build uses 64-bit
/// floats so gradient checks have headroom; enable the `f32` feature to
/// train in 32-bit.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: String, detail: String },
    #[error("degenerate attention: row {row} has no valid entries")]
    DegenerateAttention { row: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op}")]
    Numeric { op: String },
    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}, step {step}")]
    TrainAbort { epoch: usize, batch: usize, step: u64 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("graph validation error: {0}")]
    Graph(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    fn dimension(op: &str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    /// Exit code the CLI maps this error to: numeric aborts are 3,
    /// everything else is a validation failure (2).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::TrainAbort { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
