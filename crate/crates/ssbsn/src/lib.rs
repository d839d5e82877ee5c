//! Self-similarity blind-spot network (SS-BSN) for self-supervised image
//! denoising, built on a from-scratch reverse-mode tensor core.
//!
//! The crate is organized around the verification story: exact blind-spot
//! gradients, receptive-field probes, bijective pixel-shuffle/grid
//! rearrangements, finite-difference gradient checks, and closed-form FLOP
//! accounting, plus a desk-scale training loop and CLI.

pub mod analysis;
pub mod config;
pub mod data;
pub mod layers;
pub mod net;
pub mod pd;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

/// Crate-wide error type for fallible, user-facing operations. Violations of
/// internal tensor contracts (shape mismatches and the like) panic instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(
        "training aborted at step {step}: {msg} (lr={lr:e}, parameter norm {param_norm:.3e})"
    )]
    TrainAbort {
        step: u64,
        lr: f64,
        param_norm: f64,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
