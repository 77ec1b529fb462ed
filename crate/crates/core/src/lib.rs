//! Metric embedding learning with triplet-style losses.
//!
//! The crate covers the whole desk-scale pipeline: synthetic identity data
//! ([`datagen`]), PK / triplet batch sampling and offline hard mining
//! ([`sampling`]), a small fully connected embedding network with a
//! hand-written backward pass ([`mlp`]), the loss family with analytic
//! embedding gradients ([`losses`]), Adam with an exponential decay schedule
//! ([`optim`]), training-dynamics logging ([`diagnostics`]) and retrieval
//! evaluation with mAP / CMC ([`evalkit`]).
//!
//! Data-parallel inner loops (query evaluation, mining, dataset generation,
//! grid cells) run on rayon when the `parallel` feature is enabled (the
//! default) and fall back to plain iterators otherwise. Results are identical
//! either way.

pub mod bench;
pub mod datagen;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod par;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
