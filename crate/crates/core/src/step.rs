//! Right-continuous piecewise-constant curves.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Right-continuous step function: `initial` before the first knot, `values[j]`
/// on `[times[j], times[j + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
    #[serde(default)]
    initial: f64,
}

impl StepFunction {
    pub fn new(times: Vec<f64>, values: Vec<f64>, initial: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidInput(format!("step function has {} times but {} values", times.len(), values.len())));
        }
        if times.iter().chain(values.iter()).chain(std::iter::once(&initial)).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("step function entries must be finite".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("step function times must be strictly increasing".into()));
        }
        Ok(StepFunction { times, values, initial })
    }

    /// Builds a curve from jump sizes by cumulative summation.
    pub fn from_jumps(times: Vec<f64>, jumps: &[f64], initial: f64) -> Result<Self> {
        let mut acc = initial;
        let values = jumps
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect();
        Self::new(times, values, initial)
    }

    pub fn constant(value: f64) -> Self {
        StepFunction { times: Vec::new(), values: Vec::new(), initial: value }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Value at `t`.
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.initial,
            j => self.values[j - 1],
        }
    }

    /// Value strictly before `t`.
    pub fn left_limit(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => self.initial,
            j => self.values[j - 1],
        }
    }

    /// `(time, jump size)` pairs.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().enumerate().map(move |(j, &t)| {
            let prev = if j == 0 { self.initial } else { self.values[j - 1] };
            (t, self.values[j] - prev)
        })
    }

    pub fn jump_sizes(&self) -> Vec<f64> {
        self.jumps().map(|(_, d)| d).collect()
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> StepFunction {
        StepFunction { times: self.times.clone(), values: self.values.iter().map(|&v| f(v)).collect(), initial: f(self.initial) }
    }

    pub fn scaled(&self, factor: f64) -> StepFunction {
        self.map_values(|v| v * factor)
    }

    pub fn is_nondecreasing(&self) -> bool {
        std::iter::once(&self.initial).chain(self.values.iter()).collect::<Vec<_>>().windows(2).all(|w| w[0] <= w[1])
    }

    pub fn is_nonincreasing(&self) -> bool {
        std::iter::once(&self.initial).chain(self.values.iter()).collect::<Vec<_>>().windows(2).all(|w| w[0] >= w[1])
    }

    /// Survival-curve semantics: nonincreasing with values in `[0, 1]`.
    pub fn is_survival(&self) -> bool {
        self.is_nonincreasing() && (0.0..=1.0).contains(&self.initial) && self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Evaluates the curve on a sorted grid in one merge pass.
    pub fn eval_sorted(&self, grid: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.len());
        let mut j = 0;
        for &t in grid {
            while j < self.times.len() && self.times[j] <= t {
                j += 1;
            }
            out.push(if j == 0 { self.initial } else { self.values[j - 1] });
        }
        out
    }

    pub fn to_csv(&self) -> String {
        curve_csv(&self.times, &self.values)
    }
}

/// Two-column `time,value` CSV.
pub fn curve_csv(times: &[f64], values: &[f64]) -> String {
    let mut out = String::from("time,value\n");
    for (t, v) in times.iter().zip(values) {
        out.push_str(&format!("{t:?},{v:?}\n"));
    }
    out
}
