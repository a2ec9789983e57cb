//! Known-truth scenarios: data generation, the population ATE curve and the
//! Monte-Carlo coverage experiment.

use crate::coxfit::{fit_all, CoxOptions};
use crate::data::{DataOptions, Dataset, Subject};
use crate::error::{Error, Result};
use crate::gformula::{ate_estimate, default_grid, AteCurve};
use crate::resampling::{check_band_request, pointwise_ci, replicate_rng, resample, simultaneous_band, Method, MultiplierKind};
use crate::stats::par_chunked_sum;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Quasi-Monte-Carlo nodes used to integrate over the covariate law.
pub const TRUTH_NODES: usize = 100_000;
/// Absolute tolerance of the Weibull cumulative-incidence quadrature.
pub const QUADRATURE_TOL: f64 = 1e-6;
/// Points of the interpolation table used for the truth in coverage runs.
pub const TRUTH_TABLE_POINTS: usize = 513;
/// Monte-Carlo replications below which coverage estimates are unreliable.
pub const MIN_RELIABLE_REPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Baseline {
    /// `lambda_0k(t) = rate_k`.
    Exponential { rates: Vec<f64> },
    /// `Lambda_0k(t) = rate_k * t^shape_k`.
    Weibull { rates: Vec<f64>, shapes: Vec<f64> },
}

impl Baseline {
    fn rates(&self) -> &[f64] {
        match self {
            Baseline::Exponential { rates } | Baseline::Weibull { rates, .. } => rates,
        }
    }
}

/// Independent uniform covariates on `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateLaw {
    pub low: f64,
    pub high: f64,
}

impl Default for CovariateLaw {
    fn default() -> Self {
        CovariateLaw { low: -1.0, high: 1.0 }
    }
}

/// `logit P(A = 1 | Z) = intercept + coefficients . Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub causes: usize,
    pub p: usize,
    /// Per cause, `(beta_A, beta_Z1, ..., beta_Zp)`.
    pub betas: Vec<Vec<f64>>,
    pub baseline: Baseline,
    #[serde(default)]
    pub covariates: CovariateLaw,
    pub treatment: TreatmentModel,
    /// Rate of the exponential censoring time; zero disables censoring.
    pub censoring_rate: f64,
    pub tau: f64,
}

impl Default for Scenario {
    /// Two causes, two covariates, treatment confounded through `z1`.
    fn default() -> Self {
        Scenario {
            causes: 2,
            p: 2,
            betas: vec![vec![-0.6, 0.5, -0.3], vec![0.3, -0.4, 0.2]],
            baseline: Baseline::Exponential { rates: vec![0.9, 0.6] },
            covariates: CovariateLaw::default(),
            treatment: TreatmentModel { intercept: 0.0, coefficients: vec![1.0, 0.0] },
            censoring_rate: 0.35,
            tau: 2.0,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario> {
        let sc: Scenario = serde_json::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("scenario: {m}")));
        if self.causes == 0 {
            return bad("at least one cause is required".into());
        }
        if self.betas.len() != self.causes || self.betas.iter().any(|b| b.len() != self.p + 1) {
            return bad(format!("betas must hold {} rows of {} coefficients", self.causes, self.p + 1));
        }
        let rates = self.baseline.rates();
        if rates.len() != self.causes || rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad(format!("baseline needs {} positive finite rates", self.causes));
        }
        if let Baseline::Weibull { shapes, .. } = &self.baseline {
            if shapes.len() != self.causes || shapes.iter().any(|s| !(s.is_finite() && *s >= 1.0)) {
                return bad(format!("weibull baseline needs {} finite shapes >= 1", self.causes));
            }
        }
        if !(self.covariates.low.is_finite() && self.covariates.high.is_finite() && self.covariates.low < self.covariates.high) {
            return bad("covariate law needs finite low < high".into());
        }
        if self.treatment.coefficients.len() != self.p {
            return bad(format!("treatment model needs {} coefficients", self.p));
        }
        if self.betas.iter().flatten().chain(&self.treatment.coefficients).any(|b| !b.is_finite()) || !self.treatment.intercept.is_finite()
        {
            return bad("coefficients must be finite".into());
        }
        if !(self.censoring_rate.is_finite() && self.censoring_rate >= 0.0) {
            return bad("censoring rate must be finite and nonnegative".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be positive and finite".into());
        }
        Ok(())
    }

    /// `rate_k * exp(beta_k . (a, z))`.
    pub fn hazard_scale(&self, k: usize, a: u8, z: &[f64]) -> f64 {
        let b = &self.betas[k];
        let lp = b[0] * f64::from(a) + b[1..].iter().zip(z).map(|(x, y)| x * y).sum::<f64>();
        self.baseline.rates()[k] * lp.exp()
    }

    pub fn propensity(&self, z: &[f64]) -> f64 {
        let lp = self.treatment.intercept + self.treatment.coefficients.iter().zip(z).map(|(x, y)| x * y).sum::<f64>();
        1.0 / (1.0 + (-lp).exp())
    }

    /// True `F_1(t | a, z)` at each of the increasing `times`.
    pub fn f1_curve(&self, a: u8, z: &[f64], times: &[f64]) -> Vec<f64> {
        let scales: Vec<f64> = (0..self.causes).map(|k| self.hazard_scale(k, a, z)).collect();
        match &self.baseline {
            Baseline::Exponential { .. } => {
                let total: f64 = scales.iter().sum();
                let share = scales[0] / total;
                times.iter().map(|&t| share * -(-total * t).exp_m1()).collect()
            }
            Baseline::Weibull { shapes, .. } => {
                let density = |u: f64| {
                    if u <= 0.0 {
                        return if shapes[0] == 1.0 { scales[0] } else { 0.0 };
                    }
                    let h1 = scales[0] * shapes[0] * u.powf(shapes[0] - 1.0);
                    let cum: f64 = scales.iter().zip(shapes).map(|(c, s)| c * u.powf(*s)).sum();
                    h1 * (-cum).exp()
                };
                let horizon = times.last().copied().unwrap_or(0.0);
                let mut acc = 0.0;
                let mut prev = 0.0;
                times
                    .iter()
                    .map(|&t| {
                        if t > prev {
                            let tol = QUADRATURE_TOL * ((t - prev) / horizon).max(1e-3);
                            acc += adaptive_simpson(&density, prev, t, tol);
                            prev = t;
                        }
                        acc
                    })
                    .collect()
            }
        }
    }

    fn cumulative_total(&self, scales: &[f64], t: f64) -> f64 {
        match &self.baseline {
            Baseline::Exponential { .. } => scales.iter().sum::<f64>() * t,
            Baseline::Weibull { shapes, .. } => scales.iter().zip(shapes).map(|(c, s)| c * t.powf(*s)).sum(),
        }
    }

    fn hazards_at(&self, scales: &[f64], t: f64) -> Vec<f64> {
        match &self.baseline {
            Baseline::Exponential { .. } => scales.to_vec(),
            Baseline::Weibull { shapes, .. } => scales.iter().zip(shapes).map(|(c, s)| c * s * t.powf(s - 1.0)).collect(),
        }
    }

    /// Event time with cumulative hazard equal to the unit-exponential draw `e`.
    fn event_time(&self, scales: &[f64], e: f64) -> f64 {
        if let Baseline::Exponential { .. } = self.baseline {
            return e / scales.iter().sum::<f64>();
        }
        let mut hi = 1.0;
        while self.cumulative_total(scales, hi) < e {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cumulative_total(scales, mid) < e {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

fn primes(count: usize) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(count);
    let mut c = 2;
    while out.len() < count {
        if out.iter().all(|p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// Point `index` (starting at 1) of the Halton sequence in `[0, 1)^dim`.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    primes(dim).into_iter().map(|b| radical_inverse(index, b)).collect()
}

/// Population `E_Z[F_1(t | 1, Z) - F_1(t | 0, Z)]` by Halton quadrature over the covariate law.
pub fn true_ate(sc: &Scenario, grid: &[f64]) -> Result<AteCurve> {
    true_ate_with_nodes(sc, grid, TRUTH_NODES)
}

pub fn true_ate_with_nodes(sc: &Scenario, grid: &[f64], nodes: usize) -> Result<AteCurve> {
    sc.validate()?;
    check_sorted(grid)?;
    let bases = primes(sc.p);
    let (low, width) = (sc.covariates.low, sc.covariates.high - sc.covariates.low);
    let sums = par_chunked_sum(nodes, grid.len(), |j, acc| {
        let z: Vec<f64> = bases.iter().map(|&b| low + width * radical_inverse(j as u64 + 1, b)).collect();
        add_contrast(sc, &z, grid, acc);
    });
    Ok(AteCurve { grid: grid.to_vec(), estimate: sums.into_iter().map(|s| s / nodes as f64).collect(), n: nodes })
}

/// `(1/n) sum_j [F_1(t | 1, Z_j) - F_1(t | 0, Z_j)]` over the covariates of `ds`:
/// the truth that the plug-in estimator targets for a fixed covariate sample.
pub fn conditional_ate(sc: &Scenario, ds: &Dataset, grid: &[f64]) -> Result<AteCurve> {
    sc.validate()?;
    check_sorted(grid)?;
    if ds.p() != sc.p {
        return Err(Error::InvalidInput(format!("dataset has {} covariates, scenario {}", ds.p(), sc.p)));
    }
    let sums = par_chunked_sum(ds.n(), grid.len(), |j, acc| add_contrast(sc, &ds.subject(j).covariates, grid, acc));
    Ok(AteCurve { grid: grid.to_vec(), estimate: sums.into_iter().map(|s| s / ds.n() as f64).collect(), n: ds.n() })
}

fn add_contrast(sc: &Scenario, z: &[f64], grid: &[f64], acc: &mut [f64]) {
    let treated = sc.f1_curve(1, z, grid);
    let control = sc.f1_curve(0, z, grid);
    for ((a, t), c) in acc.iter_mut().zip(treated).zip(control) {
        *a += t - c;
    }
}

fn check_sorted(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("truth grid must be finite, nonnegative and strictly increasing".into()));
    }
    Ok(())
}

/// Dense evaluation of a smooth curve on `[0, tau]` with linear interpolation.
#[derive(Debug, Clone)]
pub struct TruthTable {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl TruthTable {
    pub fn new(sc: &Scenario) -> Result<TruthTable> {
        let m = TRUTH_TABLE_POINTS - 1;
        let times: Vec<f64> = (0..=m).map(|i| sc.tau * i as f64 / m as f64).collect();
        let values = true_ate(sc, &times)?.estimate;
        Ok(TruthTable { times, values })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let last = self.times.len() - 1;
        if t >= self.times[last] {
            return self.values[last];
        }
        if t <= self.times[0] {
            return self.values[0];
        }
        let j = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[j]) / (self.times[j + 1] - self.times[j]);
        self.values[j] + w * (self.values[j + 1] - self.values[j])
    }
}

/// `n` subjects from the scenario, reproducible from `seed`.
pub fn generate_dataset(sc: &Scenario, n: usize, seed: u64) -> Result<Dataset> {
    sc.validate()?;
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 subjects, got {n}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (low, high) = (sc.covariates.low, sc.covariates.high);
    let subjects = (0..n)
        .map(|i| {
            let z: Vec<f64> = (0..sc.p).map(|_| rng.random_range(low..high)).collect();
            let a = rng.random_bool(sc.propensity(&z)) as u8;
            let scales: Vec<f64> = (0..sc.causes).map(|k| sc.hazard_scale(k, a, &z)).collect();
            let e = -(1.0 - rng.random::<f64>()).ln();
            let t = sc.event_time(&scales, e);
            let hazards = sc.hazards_at(&scales, t);
            let total: f64 = hazards.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut cause = sc.causes;
            for (k, h) in hazards.iter().enumerate() {
                if u < *h {
                    cause = k + 1;
                    break;
                }
                u -= h;
            }
            let c = if sc.censoring_rate > 0.0 { -(1.0 - rng.random::<f64>()).ln() / sc.censoring_rate } else { f64::INFINITY };
            let (time, status) = if t <= c { (t, cause) } else { (c, 0) };
            Subject::new(format!("s{}", i + 1), time, status, a, z)
        })
        .collect();
    let options = DataOptions { tau: Some(sc.tau), ..DataOptions::default() };
    Dataset::with_options(subjects, sc.causes, options)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthKind {
    /// Expectation over the covariate law.
    Population,
    /// Average over the covariates of each simulated sample.
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub n: usize,
    pub reps: usize,
    pub replicates: usize,
    pub method: Method,
    pub multiplier: MultiplierKind,
    pub level: f64,
    pub seed: u64,
    pub stabilize: bool,
    pub truth: TruthKind,
    /// Times for pointwise coverage; quartiles of `[0, tau]` when absent.
    pub check_times: Option<Vec<f64>>,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            n: 300,
            reps: 1000,
            replicates: 500,
            method: Method::Wild,
            multiplier: MultiplierKind::Normal,
            level: 0.95,
            seed: 1,
            stabilize: false,
            truth: TruthKind::Population,
            check_times: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub level: f64,
    pub check_times: Vec<f64>,
    pub pointwise_coverage: Vec<f64>,
    pub simultaneous_coverage: f64,
    pub mean_band_width: f64,
    pub mean_pointwise_width: Vec<f64>,
    pub completed_reps: usize,
    pub failed_reps: usize,
    /// Efron refits excluded across all completed reps.
    pub failed_replicates: usize,
    pub config: CoverageConfig,
    pub scenario: Scenario,
}

impl fmt::Display for CoverageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "method {} ({}), level {}, n {}, B {}, seed {}", c.method, c.multiplier, self.level, c.n, c.replicates, c.seed)?;
        writeln!(
            f,
            "reps completed {} of {}, failed {}, excluded refits {}",
            self.completed_reps, c.reps, self.failed_reps, self.failed_replicates
        )?;
        writeln!(f, "{:>10}  {:>9}  {:>10}", "time", "coverage", "mean width")?;
        for ((t, cov), w) in self.check_times.iter().zip(&self.pointwise_coverage).zip(&self.mean_pointwise_width) {
            writeln!(f, "{t:>10.4}  {cov:>9.4}  {w:>10.4}")?;
        }
        writeln!(f, "simultaneous coverage {:.4}, mean band width {:.4}", self.simultaneous_coverage, self.mean_band_width)
    }
}

struct RepOutcome {
    simultaneous: bool,
    pointwise: Vec<bool>,
    band_width: f64,
    pointwise_width: Vec<f64>,
    failed_replicates: usize,
}

/// Repeats generate, fit, resample and band `reps` times and records
/// whether the bands contain the true ATE curve.
pub fn coverage_experiment(sc: &Scenario, config: &CoverageConfig) -> Result<CoverageReport> {
    sc.validate()?;
    check_band_request(config.replicates, config.level)?;
    if config.reps == 0 {
        return Err(Error::InvalidInput("coverage needs at least one Monte-Carlo rep".into()));
    }
    if config.reps < MIN_RELIABLE_REPS {
        log::warn!("{} reps is below the reliability floor of {MIN_RELIABLE_REPS}; coverage estimates are noisy", config.reps);
    }
    let check_times = config.check_times.clone().unwrap_or_else(|| vec![0.25 * sc.tau, 0.5 * sc.tau, 0.75 * sc.tau]);
    if let Some(t) = check_times.iter().find(|t| !(**t > 0.0 && **t <= sc.tau)) {
        return Err(Error::InvalidInput(format!("check time {t} is outside (0, tau]")));
    }
    let table = match config.truth {
        TruthKind::Population => Some(TruthTable::new(sc)?),
        TruthKind::Conditional => None,
    };
    let options = CoxOptions::default();
    let outcomes: Vec<Result<RepOutcome>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(config.seed, rep as u64);
            let data_seed = rng.next_u64();
            let boot_seed = rng.next_u64();
            let ds = generate_dataset(sc, config.n, data_seed)?;
            let fits = fit_all(&ds, &options)?;
            let grid = default_grid(&ds);
            let ate = ate_estimate(&fits, &ds, &grid)?;
            let ens = resample(config.method, config.multiplier, &fits, &ds, &grid, config.replicates, boot_seed, &options)?;
            let variance = if config.stabilize {
                let th = crate::asymptotics::tilde_h_curves(&fits, &ds, &grid)?;
                let xi = crate::asymptotics::xi_matrix(&th)?;
                Some(xi.diagonal().iter().copied().collect::<Vec<f64>>())
            } else {
                None
            };
            let band = simultaneous_band(&ate, &ens, config.level, variance.as_deref())?;
            let pw = pointwise_ci(&ate, &ens, config.level)?;
            let (grid_truth, check_truth) = match &table {
                Some(t) => {
                    (grid.iter().map(|&s| t.eval(s)).collect::<Vec<_>>(), check_times.iter().map(|&s| t.eval(s)).collect::<Vec<_>>())
                }
                None => (conditional_ate(sc, &ds, &grid)?.estimate, conditional_ate(sc, &ds, &check_times)?.estimate),
            };
            let mut pointwise = Vec::with_capacity(check_times.len());
            let mut pointwise_width = Vec::with_capacity(check_times.len());
            for (&t, &truth) in check_times.iter().zip(&check_truth) {
                let g = pw.index_at(t).expect("grid starts at zero");
                pointwise.push(pw.contains_at(g, truth));
                pointwise_width.push(pw.upper[g] - pw.lower[g]);
            }
            Ok(RepOutcome {
                simultaneous: band.contains(&grid_truth),
                pointwise,
                band_width: band.mean_width(),
                pointwise_width,
                failed_replicates: ens.failed_replicates.len(),
            })
        })
        .collect();

    let mut done = Vec::new();
    let mut failed = 0;
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => done.push(r),
            Err(e) if e.is_numerical() => {
                log::warn!("rep {rep} failed: {e}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if done.is_empty() {
        return Err(Error::ReplicateFailures { failed, total: config.reps });
    }
    let m = done.len() as f64;
    let share = |f: &dyn Fn(&RepOutcome) -> bool| done.iter().filter(|r| f(r)).count() as f64 / m;
    Ok(CoverageReport {
        level: config.level,
        pointwise_coverage: (0..check_times.len()).map(|j| share(&|r| r.pointwise[j])).collect(),
        mean_pointwise_width: (0..check_times.len()).map(|j| done.iter().map(|r| r.pointwise_width[j]).sum::<f64>() / m).collect(),
        check_times,
        simultaneous_coverage: share(&|r| r.simultaneous),
        mean_band_width: done.iter().map(|r| r.band_width).sum::<f64>() / m,
        completed_reps: done.len(),
        failed_reps: failed,
        failed_replicates: done.iter().map(|r| r.failed_replicates).sum(),
        config: config.clone(),
        scenario: sc.clone(),
    })
}
