//! Post-hoc provider-fairness adaptation for frozen recommenders.
//!
//! A matrix-factorization backbone is pretrained with BPR and frozen. A small
//! MLP adapter then learns additive score corrections, trained through a
//! differentiable sorting network so that provider exposure approaches a
//! hierarchical (inter-group / intra-group) target while a differentiable
//! NDCG term preserves accuracy.

pub mod adapter;
pub mod backbone;
pub mod config;
pub mod data;
pub mod diffsort;
pub mod error;
pub mod exposure;
pub mod grad;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
