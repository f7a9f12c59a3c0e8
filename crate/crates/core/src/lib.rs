//! Bridge-domain adaptation toolkit.
//!
//! Domain adaptation through an intermediate "bridge" domain: a prototype
//! and adversarial alignment trainer (PADA), a two-hop cycle-consistent
//! translation trainer (CFGAN), and divergence estimators used to check that
//! a candidate bridge really sits between source and target.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`tensor`]) in
//! 64-bit floats over synthetic benchmarks ([`synthdata`]).

pub mod cli;
pub mod dataset;
pub mod divergence;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod pipelines;
pub mod plot;
pub mod prototypes;
pub mod report;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
