//! Causal average treatment effect curves for competing risks.
//!
//! The estimator plugs cause-specific Cox models into the g-formula to obtain
//! counterfactual cumulative incidence curves for cause 1 under treatment and
//! control, averaged over the empirical covariate distribution. Uncertainty is
//! quantified through the asymptotic covariance of the process
//! `sqrt(n) (ATE_hat - ATE)` and three resampling schemes built on it.

#![allow(clippy::needless_range_loop)]

pub mod asymptotics;
pub mod coxfit;
pub mod data;
pub mod error;
pub mod gformula;
pub mod resampling;
pub mod simulate;
pub mod stats;
pub mod step;

pub use coxfit::{fit_cause_specific_cox, CoxFit, CoxOptions};
pub use data::{parse_dataset, parse_dataset_with, DataOptions, Dataset, Subject, ValidationReport};
pub use error::{Error, Result};
pub use gformula::{ate_estimate, AteCurve};
pub use simulate::{generate_dataset, true_ate, Scenario};
pub use step::StepFunction;
