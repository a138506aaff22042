//! Multi-task adversarial perturbation toolkit.
//!
//! One generator with a shared encoder and per-task decoders is trained to
//! fool several frozen victim models at once, under an L2 or Linf budget.
//! The crate bundles the tensor/autodiff engine, synthetic data suites,
//! victim training, the generator and its training objectives, evaluation
//! metrics, and a CLI for running experiments end to end.

#![forbid(unsafe_code)]

pub mod archive;
pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod victim;

pub use error::{MtaError, Result};
pub use rng::DetRng;
pub use tensor::{backward, cross_entropy, AdamConfig, AdamState, NormKind, ParamSet, Tensor};

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    eprintln!("CLI not wired up yet");
    1
}
