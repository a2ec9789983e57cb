use super::ResampleEnsemble;
use crate::error::{Error, Result};
use crate::gformula::AteCurve;
use crate::stats::quantile;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandKind {
    Pointwise,
    Simultaneous,
}

/// Estimate with lower and upper envelopes on the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub method: String,
    pub kind: BandKind,
    pub stabilized: bool,
    /// Quantile of the sup statistic; absent for pointwise intervals.
    pub sup_quantile: Option<f64>,
    pub replicates: usize,
}

impl ConfidenceBand {
    /// Whether `truth` lies inside the band at every grid index.
    pub fn contains(&self, truth: &[f64]) -> bool {
        truth.iter().enumerate().all(|(g, &v)| self.contains_at(g, v))
    }

    pub fn contains_at(&self, g: usize, value: f64) -> bool {
        self.lower[g] <= value && value <= self.upper[g]
    }

    pub fn mean_width(&self) -> f64 {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).sum::<f64>() / self.grid.len() as f64
    }

    /// Grid index of the step active at `t` (last grid time `<= t`).
    pub fn index_at(&self, t: f64) -> Option<usize> {
        self.grid.partition_point(|&s| s <= t).checked_sub(1)
    }
}

/// Checks `level` and that `b` replicates suffice: at least 100 and `2 / (1 - level)`.
pub fn check_band_request(b: usize, level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidLevel(level));
    }
    let required = ((2.0 / (1.0 - level)).ceil() as usize).max(100);
    if b < required {
        return Err(Error::TooFewReplicates { replicates: b, level, required });
    }
    Ok(())
}

fn check(ate: &AteCurve, ens: &ResampleEnsemble, level: f64) -> Result<()> {
    check_band_request(ens.b(), level)?;
    if ens.grid != ate.grid {
        return Err(Error::InvalidInput("ensemble grid differs from the estimate grid".into()));
    }
    Ok(())
}

fn assemble(
    ate: &AteCurve,
    ens: &ResampleEnsemble,
    level: f64,
    half: &[f64],
    kind: BandKind,
    stabilized: bool,
    sup: Option<f64>,
) -> ConfidenceBand {
    let lower = ate.estimate.iter().zip(half).map(|(e, h)| (e - h).clamp(-1.0, 1.0)).collect();
    let upper = ate.estimate.iter().zip(half).map(|(e, h)| (e + h).clamp(-1.0, 1.0)).collect();
    ConfidenceBand {
        grid: ate.grid.clone(),
        estimate: ate.estimate.clone(),
        lower,
        upper,
        level,
        method: ens.method.to_string(),
        kind,
        stabilized,
        sup_quantile: sup,
        replicates: ens.b(),
    }
}

/// Symmetric pointwise intervals `ATE(t) +- q_level(|path(t)|) / sqrt(n)`.
pub fn pointwise_ci(ate: &AteCurve, ens: &ResampleEnsemble, level: f64) -> Result<ConfidenceBand> {
    check(ate, ens, level)?;
    let sqrt_n = (ate.n as f64).sqrt();
    let half: Vec<f64> = (0..ate.grid.len())
        .map(|g| {
            let abs: Vec<f64> = ens.paths.iter().map(|p| p[g].abs()).collect();
            quantile(&abs, level) / sqrt_n
        })
        .collect();
    Ok(assemble(ate, ens, level, &half, BandKind::Pointwise, false, None))
}

/// Sup-statistic band `ATE(t) +- c w(t) / sqrt(n)`, where `c` is the level
/// quantile of `sup_t |path(t)| / w(t)` and `w` is one, or `xi_hat(t, t)^(1/2)`
/// when `variance` (the diagonal of `xi_hat` on the grid) is given.
pub fn simultaneous_band(ate: &AteCurve, ens: &ResampleEnsemble, level: f64, variance: Option<&[f64]>) -> Result<ConfidenceBand> {
    check(ate, ens, level)?;
    let g = ate.grid.len();
    let weights: Vec<f64> = match variance {
        None => vec![1.0; g],
        Some(v) => {
            if v.len() != g {
                return Err(Error::InvalidInput("variance vector length differs from the grid".into()));
            }
            let max = v.iter().copied().fold(0.0, f64::max);
            for (&t, &x) in ate.grid.iter().zip(v) {
                if t > 0.0 && !(x > 1e-12 * max && x > 0.0) {
                    return Err(Error::VanishingVariance { time: t });
                }
            }
            v.iter().map(|x| x.max(0.0).sqrt()).collect()
        }
    };
    let sups: Vec<f64> = ens
        .paths
        .iter()
        .map(|p| {
            p.iter()
                .zip(&weights)
                .zip(&ate.grid)
                .filter(|((_, &w), &t)| w > 0.0 && (variance.is_none() || t > 0.0))
                .map(|((v, w), _)| v.abs() / w)
                .fold(0.0, f64::max)
        })
        .collect();
    let c = quantile(&sups, level);
    let sqrt_n = (ate.n as f64).sqrt();
    let half: Vec<f64> = weights.iter().map(|w| c * w / sqrt_n).collect();
    Ok(assemble(ate, ens, level, &half, BandKind::Simultaneous, variance.is_some(), Some(c)))
}
