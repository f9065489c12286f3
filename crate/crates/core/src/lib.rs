//! Differentially-private federated learning over spiking neural networks.
//!
//! The crate simulates LIF networks trained with surrogate-gradient BPTT,
//! privatizes local training with DP-SGD, and measures how clipping and noise
//! move the firing-rate statistics that rate-aware federated coordination
//! (rate-weighted asynchronous aggregation, rate-change client selection)
//! relies on.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod accountant;
pub mod bptt;
pub mod data;
pub mod dp;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fed;
pub mod lif;
pub mod network;
pub mod params;
pub mod rates;
pub mod rng;
pub mod sensitivity;

pub use error::{Error, Result};
