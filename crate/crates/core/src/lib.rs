//! Bootstrap-calibrated prediction intervals for clustered historical data.
//!
//! Supported models: quasi-binomial, beta-binomial, quasi-Poisson and linear
//! random-intercept models. Intervals have the form
//! `ŷ* ± δ · √(var̂(ŷ*) + var̂(Y*))`, where the coefficient `δ` is found by
//! bisection so that the coverage of all `M` future observations on
//! parametric bootstrap replicates matches `1 - α`.

pub mod calibration;
pub mod cli;
pub mod coverage_lab;
pub mod data;
pub mod design;
pub mod error;
pub mod fitting;
pub mod input;
pub mod intervals;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampling;

pub use data::{Alternative, CalibrationSettings, ClusteredBinomial, ClusteredCounts, MixedModelData};
pub use error::{Error, Result};
pub use rng::RandomStream;
