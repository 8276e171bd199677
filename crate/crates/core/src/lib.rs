//! Multi-label video classification with mixtures of residual and
//! hypercolumn experts, a late-fired latent-concept head, attentive frame
//! pooling, temporal-segment augmentation, GAP/mAP/PERR metrics and
//! leave-one-out ensembling.
//!
//! Everything runs on a small reverse-mode differentiator in [`tensor`], in
//! 64-bit floats, so every model can be checked against finite differences.

pub mod cli;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
