//! Optimal single- and multi-stage treatment regimes from observational data
//! with nonignorably missing covariates.
//!
//! The estimators combine covariate-functional balancing weights in a Sobolev
//! RKHS, weighted smoothing-spline Q-functions, a semiparametric missingness
//! propensity with nonresponse instruments, and logistic-surrogate rule search.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balancing;
pub mod baselines;
pub mod data_model;
pub mod dtr;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod missingness;
pub mod qreg;
pub mod rule_search;
pub mod simgen;
pub mod value;

pub use error::{RegimeError, Result};
