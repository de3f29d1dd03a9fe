//! Longitudinal reference-centile workbench.
//!
//! Simulates blood-pressure cohorts from a lognormal AR(1) model, fits
//! marginal and conditional centiles by quantile regression, the LMS method
//! and Gaussian maximum likelihood, and evaluates conditional charts as
//! screening tools.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cohort;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod lms;
pub mod model;
pub mod mvn;
pub mod numerics;
mod optim;
pub mod qr;
pub mod screening;
pub mod spline;

pub use error::{Error, Result};
