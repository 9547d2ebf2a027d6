//! Price-based load balancing for networks of EV charging stations.
//!
//! The crate covers the whole pipeline: loading and aggregating occupancy and
//! price series, turning a region table into a station graph, demand models
//! that predict how load shifts under new prices, the pricing environment and
//! its reward, and a factorized deep Q-learning agent with its training loop.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agent;
pub mod data;
pub mod demand;
pub mod env;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod optim;
pub mod params_io;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
