//! Intervention-aware distillation on a synthetic perturbational
//! microscopy world.
//!
//! The crate builds the full desk-scale pipeline: a generative causal
//! world producing paired image/transcriptome readouts, a frozen
//! expression surrogate, a chemistry-aware prototype codebook, a
//! teacher-student distiller with self-supervised baselines, two
//! evaluation protocols, and a brute-force numerical verifier for the
//! guided-learning bound that motivates the training objective.

#![deny(unsafe_code)]

pub mod codebook;
pub mod distiller;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod rng;
pub mod surrogate;
pub mod synthworld;
pub mod theory;

pub use error::{Result, TideError};
