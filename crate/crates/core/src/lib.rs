#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Recommendation unlearning with influence functions.
//!
//! A matrix-factorization recommender is trained on explicit ratings; users
//! then withdraw their data and the model is updated either by retraining or
//! by a single second-order step (influence removal or replacement, over all
//! parameters or only the withdrawn users' rows). Completeness is audited by
//! a membership-inference oracle, utility by ranking metrics, and
//! representation drift by linear CKA.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod influence;
pub mod metrics;
pub mod mio;
pub mod model;
pub mod seed;
pub mod synthetic;
pub mod unlearner;

pub use error::{Error, Result};
