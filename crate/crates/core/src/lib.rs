// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ad;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod error;
pub mod decoders;
pub mod encoder;
pub mod harness;
pub mod baselines;
pub mod metrics;
