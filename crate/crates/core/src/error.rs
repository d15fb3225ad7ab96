// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.
//!
//! Variants are grouped so the CLI can map them onto exit codes:
//! data/format problems exit with 2, numeric or degenerate-contrast
//! problems exit with 3.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("degenerate contrast: {0}")]
    DegenerateContrast(String),

    #[error("invalid tape handle {0}")]
    InvalidHandle(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("incomplete donor trace: {0}")]
    IncompleteDonor(String),

    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),

    #[error("invalid patch spec: {0}")]
    PatchSpec(String),

    #[error("invalid contrastive pair: {0}")]
    Pair(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("no valid pairs for emotion {emotion:?} at threshold {tau}: hit rates {hit_rates:?}")]
    NoValidPairs {
        emotion: String,
        tau: f64,
        hit_rates: Vec<(u64, f64)>,
    },

    #[error("change ratio undefined: baseline hit rate is zero (raw new hit rate {h_new})")]
    UndefinedRatio { h_new: f64 },

    #[error("label {0:?} is not covered by every wheel")]
    LabelCoverage(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("planted model failed its construction gates: {0}")]
    PlantGate(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error (see the CLI contract).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateVector(_)
            | Error::DegenerateContrast(_)
            | Error::UndefinedRatio { .. }
            | Error::NoValidPairs { .. }
            | Error::PlantGate(_)
            | Error::Internal(_)
            | Error::InvalidHandle(_) => 3,
            _ => 2,
        }
    }
}
