//! Counterfactual cumulative incidence and the g-formula ATE.
//!
//! For treatment level `a` and covariates `z` the fitted models give
//! `Lambda_k(t | a, z) = Lambda_0k(t) exp(beta_kA a + beta_kZ' z)`,
//! `S(t | a, z) = exp(-sum_k Lambda_k(t | a, z))` and
//! `F_1(t | a, z) = int_0^t S(u- | a, z) dLambda_1(u | a, z)`.
//! The ATE at `t` is the sample mean of `F_1(t | 1, Z_j) - F_1(t | 0, Z_j)`.

use crate::coxfit::CoxFit;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::stats::par_chunked_sum;
use crate::step::{curve_csv, StepFunction};
use serde::{Deserialize, Serialize};

/// `Lambda_0k(t) exp(beta_kA a + beta_kZ' z)`.
pub fn cumulative_hazard(fit: &CoxFit, a: u8, z: &[f64]) -> StepFunction {
    fit.baseline.scaled(fit.relative_risk(a, z))
}

/// `exp(-sum_k Lambda_k(t | a, z))` on the union of all jump times.
pub fn survival_curve(fits: &[CoxFit], a: u8, z: &[f64]) -> StepFunction {
    let engine = Engine::new(fits);
    let mut values = Vec::with_capacity(engine.times.len());
    engine.scan(a, z, |_, _, s, _| values.push(s));
    StepFunction::new(engine.times.clone(), values, 1.0).expect("union of sorted knots")
}

/// Plug-in cumulative incidence of cause 1, jumping only at cause-1 knots.
pub fn cif1(fits: &[CoxFit], a: u8, z: &[f64]) -> StepFunction {
    let engine = Engine::new(fits);
    let mut times = Vec::new();
    let mut values = Vec::new();
    engine.scan(a, z, |j, _, _, f1| {
        if engine.is_cause1[j] {
            times.push(engine.times[j]);
            values.push(f1);
        }
    });
    StepFunction::new(times, values, 0.0).expect("cause-1 knots are sorted")
}

/// ATE curve on an evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteCurve {
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub n: usize,
}

impl AteCurve {
    pub fn to_csv(&self) -> String {
        curve_csv(&self.grid, &self.estimate)
    }

    pub fn to_step(&self) -> StepFunction {
        StepFunction::new(self.grid.clone(), self.estimate.clone(), 0.0).expect("grid is sorted")
    }
}

/// `{0}` together with every cause-1 event time in `(0, tau]`.
pub fn default_grid(ds: &Dataset) -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend(ds.event_times(1).into_iter().filter(|&t| t > 0.0));
    grid
}

/// Checks that the grid is strictly increasing and inside `[0, tau]`.
pub fn check_grid(grid: &[f64], tau: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("evaluation grid is empty".into()));
    }
    if let Some(&t) = grid.iter().find(|&&t| !t.is_finite() || t < 0.0) {
        return Err(Error::InvalidInput(format!("grid time {t} is not a finite nonnegative number")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("grid must be strictly increasing".into()));
    }
    if let Some(&t) = grid.iter().find(|&&t| t > tau) {
        return Err(Error::GridBeyondTau { time: t, tau });
    }
    Ok(())
}

/// `(1/n) sum_i [F_1(t | 1, Z_i) - F_1(t | 0, Z_i)]` at each grid time.
pub fn ate_estimate(fits: &[CoxFit], ds: &Dataset, grid: &[f64]) -> Result<AteCurve> {
    check_fits(fits, ds)?;
    check_grid(grid, ds.tau())?;
    let engine = Engine::new(fits);
    Ok(AteCurve { grid: grid.to_vec(), estimate: engine.ate(ds, None, grid), n: ds.n() })
}

pub(crate) fn check_fits(fits: &[CoxFit], ds: &Dataset) -> Result<()> {
    if fits.len() != ds.causes() {
        return Err(Error::InvalidInput(format!("expected {} fitted causes, got {}", ds.causes(), fits.len())));
    }
    for (k, f) in fits.iter().enumerate() {
        if f.cause != k + 1 || f.beta.len() != ds.p() + 1 {
            return Err(Error::InvalidInput(format!("fit {} does not match cause {} with {} coefficients", k, k + 1, ds.p() + 1)));
        }
    }
    Ok(())
}

/// Flattened view of the K fitted models on the union of their jump times.
#[derive(Debug, Clone)]
pub(crate) struct Engine {
    pub times: Vec<f64>,
    /// Row-major `times.len() x K` baseline increments.
    pub inc: Vec<f64>,
    pub is_cause1: Vec<bool>,
    pub causes: usize,
    pub betas: Vec<Vec<f64>>,
}

impl Engine {
    pub fn new(fits: &[CoxFit]) -> Engine {
        let causes = fits.len();
        let mut times: Vec<f64> = fits.iter().flat_map(|f| f.baseline.times().iter().copied()).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut inc = vec![0.0; times.len() * causes];
        let mut is_cause1 = vec![false; times.len()];
        for (k, f) in fits.iter().enumerate() {
            for (t, d) in f.baseline.jumps() {
                let j = times.partition_point(|&s| s < t);
                inc[j * causes + k] = d;
                if k == 0 {
                    is_cause1[j] = true;
                }
            }
        }
        Engine { times, inc, is_cause1, causes, betas: fits.iter().map(|f| f.beta.clone()).collect() }
    }

    pub fn relative_risk(&self, k: usize, a: f64, z: &[f64]) -> f64 {
        let b = &self.betas[k];
        (b[0] * a + b[1..].iter().zip(z).map(|(x, y)| x * y).sum::<f64>()).exp()
    }

    pub fn risks(&self, a: u8, z: &[f64]) -> Vec<f64> {
        (0..self.causes).map(|k| self.relative_risk(k, f64::from(a), z)).collect()
    }

    /// Walks the knots in order, reporting `(index, S(u-), S(u), F_1(u))`.
    pub fn scan(&self, a: u8, z: &[f64], mut f: impl FnMut(usize, f64, f64, f64)) {
        let rr = self.risks(a, z);
        self.scan_with(&rr, self.times.len(), &mut f);
    }

    pub fn scan_with(&self, rr: &[f64], upto: usize, f: &mut impl FnMut(usize, f64, f64, f64)) {
        let mut cum = 0.0;
        let mut s_left = 1.0;
        let mut f1 = 0.0;
        for j in 0..upto {
            let row = &self.inc[j * self.causes..(j + 1) * self.causes];
            f1 += s_left * rr[0] * row[0];
            cum += rr.iter().zip(row).map(|(r, d)| r * d).sum::<f64>();
            let s = (-cum).exp();
            f(j, s_left, s, f1);
            s_left = s;
        }
    }

    /// Number of knots `<= t` for each grid time.
    pub fn counts(&self, grid: &[f64]) -> Vec<usize> {
        grid.iter().map(|&t| self.times.partition_point(|&s| s <= t)).collect()
    }

    /// `F_1(t | a, z)` at the grid described by `counts`.
    pub fn f1_on(&self, rr: &[f64], counts: &[usize], out: &mut [f64]) {
        let upto = counts.last().copied().unwrap_or(0);
        let mut g = 0;
        while g < counts.len() && counts[g] == 0 {
            out[g] = 0.0;
            g += 1;
        }
        self.scan_with(rr, upto, &mut |j, _, _, f1| {
            while g < counts.len() && counts[g] == j + 1 {
                out[g] = f1;
                g += 1;
            }
        });
    }

    /// Weighted g-formula mean over the subjects of `ds`; weights default to one.
    pub fn ate(&self, ds: &Dataset, weights: Option<&[f64]>, grid: &[f64]) -> Vec<f64> {
        let counts = self.counts(grid);
        let g = grid.len();
        let total: f64 = weights.map_or(ds.n() as f64, |w| w.iter().sum());
        let sums = par_chunked_sum(ds.n(), g, |j, acc| {
            let w = weights.map_or(1.0, |w| w[j]);
            if w == 0.0 {
                return;
            }
            let z = &ds.subject(j).covariates;
            let mut f1 = vec![0.0; g];
            let mut f0 = vec![0.0; g];
            self.f1_on(&self.risks(1, z), &counts, &mut f1);
            self.f1_on(&self.risks(0, z), &counts, &mut f0);
            for (a, (x, y)) in acc.iter_mut().zip(f1.iter().zip(&f0)) {
                *a += w * (x - y);
            }
        });
        sums.into_iter().map(|s| s / total).collect()
    }
}
