//! Desk-scale wavelet-domain masked autoencoders.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense row-major tensors with the hand-written forward/backward
//!   pairs everything else composes.
//! * [`rng`] — counter-based deterministic random streams.
//! * [`gradcheck`] — central-difference verification of every backward pass.
//! * [`wavelet`] — filter banks, strided analysis matrices, 1D/2D/3D DWT and inverse.
//! * [`embed`] — wavelet patch embedding, sub-band reduction, tube masking.
//! * [`attention`] — plain, low-pass and inverse-transform attention variants.
//! * [`model`] — encoder/decoder assembly, pretrain/finetune losses, manual backprop.
//! * [`optim`] — decoupled weight-decay Adam with warmup + cosine schedule.
//! * [`corrupt`] — deterministic corruption generators and perturbation sequences.
//! * [`metrics`] — corruption error, flip probability, robustness scores.
//! * [`io`] — RFTN tensor files, RFCK checkpoints, IDX datasets.

pub mod attention;
pub mod corrupt;
pub mod embed;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod wavelet;

/// Crate-wide error type. Variants mirror the failure classes of the public
/// contracts: shape mismatches, violated call contracts, bad configuration,
/// malformed data or files, and runtime training failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
