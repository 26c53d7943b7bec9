use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("unknown {what} literal {literal:?}")]
    UnknownLiteral { what: &'static str, literal: String },

    #[error("cannot parse operand {text:?}: {reason}")]
    Operand { text: String, reason: String },

    #[error("unknown register {0:?}")]
    UnknownRegister(String),

    #[error("instruction {index}: {source}")]
    Instruction {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid operand: {0}")]
    InvalidOperand(String),

    #[error("sequence of {len} tokens does not fit max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, dataset {dataset}")]
    VocabMismatch { checkpoint: String, dataset: String },

    #[error("no masked positions in batch")]
    NoMaskedPositions,

    #[error("training diverged at epoch {epoch} step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn schema(line: usize, msg: impl Into<String>) -> Self {
        Error::Schema {
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 1 for input/validation problems, 2 for
    /// failures while running a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Divergence { .. } | Error::Checkpoint { .. } => 2,
            _ => 1,
        }
    }
}
