//! Invariant graph learning toolkit.
//!
//! A featurizer GNN scores edges and keeps the top fraction as the estimated
//! invariant subgraph; a classifier GNN predicts from it, with a second head
//! on the complement. Training combines cross-entropy with a supervised
//! contrastive term over same-class subgraph representations and a hinge
//! term on the complement's risk. The crate also ships a motif-on-base
//! synthetic benchmark generator with structural and attribute spurious
//! correlations, a trainer, and a multi-seed evaluation harness.

pub mod error;
pub mod numerics;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
pub mod graphdata;
pub mod scmgen;
pub mod model;
pub mod objectives;
pub mod trainer;
pub mod harness;
