//! Risk-adjusted incidence modeling for hierarchical recurrent-event data.
//!
//! The crate covers the whole pipeline: counting-process data and at-risk
//! interval construction, missing-value filling and imputation stacks, Cox and
//! frailty fitting by penalized partial likelihood, Breslow hazards and
//! expected counts per program, block-jackknife and imputation variances,
//! Rubin pooling with step-down selection, a synthetic data generator and the
//! simulation study harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cox;
pub mod data;
pub mod error;
pub mod imputation;
pub mod intervals;
pub mod pooling;
pub mod pipeline;
pub mod risk;
pub mod sim;
pub mod stats;
pub mod variance;

pub use error::{Error, Result};
