//! Causal numerical differentiation by retrospective cost input estimation
//! (RCIE) with an adaptive Kalman filter.
//!
//! The measured signal is modeled as the output of an integrator chain
//! driven by an unknown input; estimating that input online gives a causal
//! estimate of the signal's n-th derivative. The Kalman filter's forecast
//! covariance carries an unknown term for the input-estimation error, which
//! [`adaptation`] tunes online by matching the filter-predicted innovation
//! variance to its sample variance.

pub mod adaptation;
pub mod error;
pub mod experiment;
pub mod kalman;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rcie;
pub mod signals;

pub use error::{Error, Result};
