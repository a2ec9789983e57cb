//! Cause-specific Cox regression.
//!
//! Each cause `k` gets its own proportional-hazards model with linear predictor
//! `beta_kA * A + beta_kZ' Z`; failures from other causes act as censorings.
//! Coefficients maximise the log partial likelihood by Newton-Raphson with
//! step halving, and the cumulative baseline hazard is the Breslow estimator
//! at the maximiser.
//!
//! All risk-set sums are accumulated in a single pass over subjects in
//! decreasing time order. Exponentials are taken relative to the running
//! maximum of the linear predictor, so the sums never overflow; the ratios
//! `S1/S0`, `S2/S0` and the likelihood do not depend on that shift.
//!
//! Optional nonnegative case weights represent a bootstrap resample of the
//! original rows: a weight of `m` stands for `m` tied copies of the row, which
//! the Breslow convention handles exactly.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::step::StepFunction;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Converged once the score max-norm drops below this (and the Newton step is small).
    pub score_tol: f64,
    /// Converged once the Newton step max-norm drops below this.
    pub step_tol: f64,
    /// `max |beta|` beyond which the likelihood is declared monotone.
    pub beta_cap: f64,
    /// Starting point; zero when absent.
    pub start: Option<Vec<f64>>,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions { max_iter: 50, max_halvings: 20, score_tol: 1e-8, step_tol: 1e-10, beta_cap: 50.0, start: None }
    }
}

/// Weighted risk-set averages at a single time point, normalised by `1/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSums {
    pub s0: f64,
    pub s1: DVector<f64>,
    pub s2: DMatrix<f64>,
    /// `s1 / s0`.
    pub e: DVector<f64>,
}

/// `S^(r)(beta, t) = (1/n) sum_i Y_i(t) exp(beta' x_i) x_i^{(r)}` for `r = 0, 1, 2`.
pub fn weighted_sums(ds: &Dataset, beta: &[f64], t: f64) -> Result<WeightedSums> {
    check_beta(ds, beta)?;
    let d = ds.p() + 1;
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(d);
    let mut s2 = DMatrix::zeros(d, d);
    for i in 0..ds.n() {
        if !ds.at_risk(i, t) {
            continue;
        }
        let x = DVector::from_column_slice(ds.design_row(i));
        let r = beta.iter().zip(x.iter()).map(|(b, v)| b * v).sum::<f64>().exp();
        s0 += r;
        s1 += r * &x;
        s2 += r * &x * x.transpose();
    }
    if s0 == 0.0 {
        return Err(Error::EmptyRiskSet { time: t });
    }
    let n = ds.n() as f64;
    let e = &s1 / s0;
    Ok(WeightedSums { s0: s0 / n, s1: s1 / n, s2: s2 / n, e })
}

/// Log partial likelihood, score and information in one sweep.
#[derive(Debug, Clone)]
pub(crate) struct Sweep {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub information: DMatrix<f64>,
    /// Event subjects in increasing time order.
    pub events: Vec<usize>,
    /// Breslow increments at `events`.
    pub increments: Vec<f64>,
    /// `S^(0)` (normalised by total weight) at `events`.
    pub s0: Vec<f64>,
    /// `E(beta, t)` at `events`, row-major `events.len() x (p + 1)`.
    pub e: Vec<f64>,
}

pub(crate) fn sweep(ds: &Dataset, cause: usize, beta: &[f64], weights: Option<&[f64]>) -> Sweep {
    let d = ds.p() + 1;
    let total_weight = weights.map(|w| w.iter().sum()).unwrap_or(ds.n() as f64);
    let mut shift = f64::NEG_INFINITY;
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d * d];
    let mut loglik = 0.0;
    let mut score = vec![0.0; d];
    let mut info = vec![0.0; d * d];
    let mut events = Vec::new();
    let mut increments = Vec::new();
    let mut s0_at = Vec::new();
    let mut e_at = Vec::new();
    let mut e = vec![0.0; d];

    for &i in ds.order_desc() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let x = ds.design_row(i);
        let eta: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
        if eta > shift {
            if shift.is_finite() {
                let f = (shift - eta).exp();
                s0 *= f;
                s1.iter_mut().for_each(|v| *v *= f);
                s2.iter_mut().for_each(|v| *v *= f);
            }
            shift = eta;
        }
        let r = w * (eta - shift).exp();
        s0 += r;
        for a in 0..d {
            s1[a] += r * x[a];
            for b in 0..d {
                s2[a * d + b] += r * x[a] * x[b];
            }
        }
        if ds.is_event(i, cause) {
            for a in 0..d {
                e[a] = s1[a] / s0;
            }
            loglik += w * (eta - shift - s0.ln());
            for a in 0..d {
                score[a] += w * (x[a] - e[a]);
                for b in 0..d {
                    info[a * d + b] += w * (s2[a * d + b] / s0 - e[a] * e[b]);
                }
            }
            events.push(i);
            // w copies fail together; Breslow divides their count by the full sum
            increments.push(w * (-shift).exp() / s0);
            s0_at.push(s0 * shift.exp() / total_weight);
            e_at.extend_from_slice(&e);
        }
    }
    events.reverse();
    increments.reverse();
    s0_at.reverse();
    let e_rev: Vec<f64> = e_at.chunks(d.max(1)).rev().flatten().copied().collect();
    Sweep {
        loglik,
        score: DVector::from_vec(score),
        information: DMatrix::from_row_slice(d, d, &info),
        events,
        increments,
        s0: s0_at,
        e: if d == 0 { Vec::new() } else { e_rev },
    }
}

fn check_beta(ds: &Dataset, beta: &[f64]) -> Result<()> {
    if beta.len() != ds.p() + 1 {
        return Err(Error::InvalidInput(format!("coefficient vector has length {}, expected {}", beta.len(), ds.p() + 1)));
    }
    Ok(())
}

fn check_cause(ds: &Dataset, cause: usize) -> Result<()> {
    if cause == 0 || cause > ds.causes() {
        return Err(Error::InvalidInput(format!("cause {cause} outside 1..={}", ds.causes())));
    }
    Ok(())
}

/// Log partial likelihood `sum_events [beta' x_i - log sum_{j in R(t_i)} exp(beta' x_j)]`.
pub fn log_partial_likelihood(ds: &Dataset, cause: usize, beta: &[f64]) -> Result<f64> {
    check_cause(ds, cause)?;
    check_beta(ds, beta)?;
    if ds.event_count(cause) == 0 {
        return Err(Error::NoEvents { cause });
    }
    Ok(sweep(ds, cause, beta, None).loglik)
}

/// Score vector and observed information of the log partial likelihood.
pub fn score_and_information(ds: &Dataset, cause: usize, beta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_cause(ds, cause)?;
    check_beta(ds, beta)?;
    if ds.event_count(cause) == 0 {
        return Err(Error::NoEvents { cause });
    }
    let s = sweep(ds, cause, beta, None);
    Ok((s.score, s.information))
}

/// Breslow cumulative baseline hazard at `beta`; the zero function when
/// there are no cause-`cause` events.
pub fn breslow_baseline(ds: &Dataset, cause: usize, beta: &[f64]) -> Result<StepFunction> {
    check_cause(ds, cause)?;
    check_beta(ds, beta)?;
    let s = sweep(ds, cause, beta, None);
    baseline_from_sweep(ds, &s)
}

fn baseline_from_sweep(ds: &Dataset, s: &Sweep) -> Result<StepFunction> {
    let times = s.events.iter().map(|&i| ds.time(i)).collect();
    StepFunction::from_jumps(times, &s.increments, 0.0)
}

/// Fitted cause-specific model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CoxFitRecord", try_from = "CoxFitRecord")]
pub struct CoxFit {
    pub cause: usize,
    /// `(beta_kA, beta_kZ')`.
    pub beta: Vec<f64>,
    /// Breslow `Lambda_0k`.
    pub baseline: StepFunction,
    /// Observed information at `beta` (not divided by n).
    pub information: DMatrix<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl CoxFit {
    /// Model evaluated at a fixed coefficient vector without optimisation.
    pub fn at_beta(ds: &Dataset, cause: usize, beta: &[f64]) -> Result<CoxFit> {
        check_cause(ds, cause)?;
        check_beta(ds, beta)?;
        let s = sweep(ds, cause, beta, None);
        Ok(CoxFit {
            cause,
            beta: beta.to_vec(),
            baseline: baseline_from_sweep(ds, &s)?,
            information: s.information,
            log_likelihood: s.loglik,
            iterations: 0,
            converged: false,
        })
    }

    /// `exp(beta_kA a + beta_kZ' z)`.
    pub fn relative_risk(&self, a: u8, z: &[f64]) -> f64 {
        let lp = self.beta[0] * f64::from(a) + self.beta[1..].iter().zip(z).map(|(b, v)| b * v).sum::<f64>();
        lp.exp()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BaselineRecord {
    times: Vec<f64>,
    jumps: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CoxFitRecord {
    cause: usize,
    beta: Vec<f64>,
    baseline: BaselineRecord,
    information: Vec<Vec<f64>>,
    log_likelihood: f64,
    iterations: usize,
    converged: bool,
}

impl From<CoxFit> for CoxFitRecord {
    fn from(f: CoxFit) -> Self {
        let information = f.information.row_iter().map(|r| r.iter().copied().collect()).collect();
        CoxFitRecord {
            cause: f.cause,
            baseline: BaselineRecord { times: f.baseline.times().to_vec(), jumps: f.baseline.jump_sizes() },
            beta: f.beta,
            information,
            log_likelihood: f.log_likelihood,
            iterations: f.iterations,
            converged: f.converged,
        }
    }
}

impl TryFrom<CoxFitRecord> for CoxFit {
    type Error = Error;

    fn try_from(r: CoxFitRecord) -> Result<Self> {
        let d = r.beta.len();
        if r.information.len() != d || r.information.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidInput("information matrix does not match beta".into()));
        }
        let flat: Vec<f64> = r.information.into_iter().flatten().collect();
        Ok(CoxFit {
            cause: r.cause,
            beta: r.beta,
            baseline: StepFunction::from_jumps(r.baseline.times, &r.baseline.jumps, 0.0)?,
            information: DMatrix::from_row_slice(d, d, &flat),
            log_likelihood: r.log_likelihood,
            iterations: r.iterations,
            converged: r.converged,
        })
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Condition number estimate from the symmetric eigenvalues.
pub(crate) fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Maximises the cause-specific partial likelihood.
pub fn fit_cause_specific_cox(ds: &Dataset, cause: usize, options: &CoxOptions) -> Result<CoxFit> {
    fit_weighted(ds, cause, None, options)
}

/// As [`fit_cause_specific_cox`] with case weights (bootstrap multiplicities).
pub fn fit_weighted(ds: &Dataset, cause: usize, weights: Option<&[f64]>, options: &CoxOptions) -> Result<CoxFit> {
    check_cause(ds, cause)?;
    let d = ds.p() + 1;
    let has_events = (0..ds.n()).any(|i| ds.is_event(i, cause) && weights.is_none_or(|w| w[i] > 0.0));
    if !has_events {
        return Err(Error::NoEvents { cause });
    }
    let mut beta = DVector::from_vec(options.start.clone().unwrap_or_else(|| vec![0.0; d]));
    if beta.len() != d {
        return Err(Error::InvalidInput(format!("start vector has length {}, expected {d}", beta.len())));
    }
    let mut current = sweep(ds, cause, beta.as_slice(), weights);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_gain = f64::INFINITY;
    let mut last_step = 0.0;

    while iterations < options.max_iter {
        let step = match current.information.clone().cholesky() {
            Some(ch) => ch.solve(&current.score),
            None => {
                if iterations > 0 {
                    return Err(Error::Separation { cause, norm: max_abs(&beta) });
                }
                if max_abs(&current.score) < options.score_tol {
                    converged = true;
                    break;
                }
                return Err(Error::Singular {
                    what: format!("information matrix for cause {cause}"),
                    condition: condition_estimate(&current.information),
                });
            }
        };
        let step_norm = max_abs(&step);
        let score_norm = max_abs(&current.score);
        // A small score alone is not enough: along a monotone likelihood the
        // score decays while Newton steps stay of order one.
        if step_norm < options.step_tol || (score_norm < options.score_tol && step_norm < 1e-4) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let candidate = &beta + scale * &step;
            let s = sweep(ds, cause, candidate.as_slice(), weights);
            if s.loglik.is_finite() && s.loglik >= current.loglik - 1e-12 * current.loglik.abs() {
                accepted = Some((candidate, s));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, s)) = accepted else {
            if score_norm < options.score_tol.sqrt() {
                converged = true;
                break;
            }
            return Err(Error::NonConvergence { cause, iterations });
        };
        last_gain = s.loglik - current.loglik;
        last_step = scale * step_norm;
        beta = candidate;
        current = s;
        let norm = max_abs(&beta);
        if norm > options.beta_cap {
            return Err(Error::Separation { cause, norm });
        }
    }
    if !converged {
        let norm = max_abs(&beta);
        if last_step > 0.1 && last_gain.abs() < 1e-6 {
            return Err(Error::Separation { cause, norm });
        }
        return Err(Error::NonConvergence { cause, iterations });
    }
    Ok(CoxFit {
        cause,
        beta: beta.as_slice().to_vec(),
        baseline: baseline_from_sweep(ds, &current)?,
        information: current.information,
        log_likelihood: current.loglik,
        iterations,
        converged,
    })
}

/// Fits causes `1..=K`, in parallel.
pub fn fit_all(ds: &Dataset, options: &CoxOptions) -> Result<Vec<CoxFit>> {
    (1..=ds.causes()).into_par_iter().map(|k| fit_cause_specific_cox(ds, k, options)).collect()
}

/// `Sigma_hat_k = (1/n) sum_i int [S2/S0 - (S1/S0)^{x2}](beta_hat, u) dN_ki(u)`,
/// i.e. the information at `beta_hat` divided by `n`.
pub fn sigma_hat(ds: &Dataset, fit: &CoxFit) -> Result<DMatrix<f64>> {
    check_beta(ds, &fit.beta)?;
    let s = sweep(ds, fit.cause, &fit.beta, None);
    let sigma = s.information / ds.n() as f64;
    check_nonsingular(&sigma, &format!("Sigma_hat for cause {}", fit.cause))?;
    Ok(sigma)
}

/// Errors unless the smallest eigenvalue exceeds `1e-12 x trace`.
pub(crate) fn check_nonsingular(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let trace: f64 = m.trace();
    let min = eig.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if trace.is_nan() || trace <= 0.0 || min < 1e-12 * trace {
        return Err(Error::Singular { what: what.to_string(), condition: condition_estimate(m) });
    }
    Ok(())
}

/// Inverse of a symmetric positive definite matrix via its eigendecomposition.
pub(crate) fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    check_nonsingular(m, what)?;
    let eig = SymmetricEigen::new(m.clone());
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let q = &eig.eigenvectors;
    let inv = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    // symmetrise away rounding
    Ok((&inv + inv.transpose()) * 0.5)
}
