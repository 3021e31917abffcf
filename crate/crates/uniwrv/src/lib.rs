//! Unified removal of hybrid adverse weather from video, at desk scale.
//!
//! The crate bundles everything needed to run the full mechanism end to end
//! on a CPU: a small reverse-mode tensor core, prior-bank guided feature
//! extraction, dynamic routing aggregation with deformable multi-frame
//! attention, a procedural hybrid-weather clip generator, training, and an
//! analysis suite (metrics, complexity accounting, specialization reports).
//!
//! Start with the runnable examples (`cargo run --release --example ...`) or
//! the `uniwrv` binary (`generate`, `train`, `eval`, `gradcheck`,
//! `bench-routing`, `inspect`).

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dra;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod weathergen;
pub mod wpgm;

pub use error::{Error, Result};

/// Every registered primitive plus the composite losses, ready for
/// finite-difference verification.
pub fn full_gradcheck_registry() -> tensor::gradcheck::Registry {
    let mut reg = tensor::gradcheck::Registry::standard();
    model::extend_registry_with_losses(&mut reg);
    reg
}
