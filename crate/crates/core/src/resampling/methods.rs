use super::{check_replicates, multiplier_draw, replicate_rng, Method, MultiplierKind, ResampleEnsemble};
use crate::asymptotics::{tilde_h_curves, wild_summands, InfluenceCurves, Summands};
use crate::coxfit::{fit_all, fit_weighted, CoxFit, CoxOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gformula::{check_grid, Engine};
use rand::Rng;
use rayon::prelude::*;

/// Martingale wild bootstrap: `U_hat(t) = sum_i G_i X_i(t)`.
pub fn wild_bootstrap(fits: &[CoxFit], ds: &Dataset, grid: &[f64], b: usize, kind: MultiplierKind, seed: u64) -> Result<ResampleEnsemble> {
    check_replicates(b)?;
    let th = tilde_h_curves(fits, ds, grid)?;
    let x = wild_summands(&th, ds)?;
    wild_from_summands(&x, ds.n(), b, kind, seed)
}

/// Wild bootstrap from precomputed summands.
pub fn wild_from_summands(x: &Summands, n: usize, b: usize, kind: MultiplierKind, seed: u64) -> Result<ResampleEnsemble> {
    check_replicates(b)?;
    if kind == MultiplierKind::None {
        return Err(Error::InvalidInput("wild bootstrap needs normal or poisson multipliers".into()));
    }
    let paths = (0..b)
        .into_par_iter()
        .map(|r| {
            let g = multiplier_draw(kind, n, &mut replicate_rng(seed, r as u64))?;
            Ok(combine(x, &g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResampleEnsemble {
        method: Method::Wild,
        multiplier: kind,
        grid: x.grid.clone(),
        paths,
        seed,
        replicates: b,
        failed_replicates: Vec::new(),
    })
}

fn combine(x: &Summands, g: &[f64]) -> Vec<f64> {
    let mut path = vec![0.0; x.grid.len()];
    for (r, &i) in x.rows.iter().enumerate() {
        let m = g[i];
        if m != 0.0 {
            for (p, v) in path.iter_mut().zip(x.row(r)) {
                *p += m * v;
            }
        }
    }
    path
}

/// Wild paths for explicitly supplied multiplier vectors (one per replicate).
pub fn wild_paths_from_multipliers(x: &Summands, multipliers: &[Vec<f64>]) -> Vec<Vec<f64>> {
    multipliers.iter().map(|g| combine(x, g)).collect()
}

/// Influence-function resampling: `(1/sqrt(n)) sum_i IF_i(t) G_i` with standard normal `G`.
pub fn if_resample(curves: &InfluenceCurves, b: usize, seed: u64) -> Result<ResampleEnsemble> {
    check_replicates(b)?;
    if curves.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("influence curves contain non-finite values".into()));
    }
    let paths = (0..b)
        .into_par_iter()
        .map(|r| {
            let g = multiplier_draw(MultiplierKind::Normal, curves.n, &mut replicate_rng(seed, r as u64))?;
            Ok(if_combine(curves, &g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResampleEnsemble {
        method: Method::Influence,
        multiplier: MultiplierKind::Normal,
        grid: curves.grid.clone(),
        paths,
        seed,
        replicates: b,
        failed_replicates: Vec::new(),
    })
}

fn if_combine(curves: &InfluenceCurves, g: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (curves.n as f64).sqrt();
    let mut path = vec![0.0; curves.grid.len()];
    for (i, &m) in g.iter().enumerate() {
        for (p, v) in path.iter_mut().zip(curves.row(i)) {
            *p += m * v;
        }
    }
    path.iter_mut().for_each(|p| *p *= scale);
    path
}

/// Influence paths for explicitly supplied multiplier vectors.
pub fn if_paths_from_multipliers(curves: &InfluenceCurves, multipliers: &[Vec<f64>]) -> Vec<Vec<f64>> {
    multipliers.iter().map(|g| if_combine(curves, g)).collect()
}

/// Multinomial(n; 1/n, ..., 1/n) resampling counts.
pub fn multinomial_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for _ in 0..n {
        w[rng.random_range(0..n)] += 1.0;
    }
    w
}

/// Efron bootstrap: resample subjects, refit every cause, recompute the ATE.
pub fn efron_bootstrap(ds: &Dataset, grid: &[f64], b: usize, seed: u64, options: &CoxOptions) -> Result<ResampleEnsemble> {
    check_replicates(b)?;
    let weights: Vec<Vec<f64>> = (0..b).map(|r| multinomial_weights(ds.n(), &mut replicate_rng(seed, r as u64))).collect();
    let mut ens = efron_from_weights(ds, grid, &weights, options)?;
    ens.seed = seed;
    Ok(ens)
}

/// Efron bootstrap with given resampling counts (one vector per replicate).
pub fn efron_from_weights(ds: &Dataset, grid: &[f64], weights: &[Vec<f64>], options: &CoxOptions) -> Result<ResampleEnsemble> {
    check_replicates(weights.len())?;
    check_grid(grid, ds.tau())?;
    let fits = fit_all(ds, options)?;
    let base = Engine::new(&fits).ate(ds, None, grid);
    let sqrt_n = (ds.n() as f64).sqrt();
    let outcomes: Vec<Option<Vec<f64>>> = weights
        .par_iter()
        .map(|w| {
            let refits: Option<Vec<CoxFit>> = fits
                .iter()
                .map(|f| {
                    let opts = CoxOptions { start: Some(f.beta.clone()), ..options.clone() };
                    fit_weighted(ds, f.cause, Some(w), &opts).ok()
                })
                .collect();
            let refits = refits?;
            let ate = Engine::new(&refits).ate(ds, Some(w), grid);
            Some(ate.iter().zip(&base).map(|(a, b)| sqrt_n * (a - b)).collect())
        })
        .collect();
    let failed: Vec<usize> = outcomes.iter().enumerate().filter(|(_, o)| o.is_none()).map(|(r, _)| r).collect();
    let total = weights.len();
    if failed.len() * 10 > total {
        return Err(Error::ReplicateFailures { failed: failed.len(), total });
    }
    if !failed.is_empty() {
        log::warn!("{} of {total} bootstrap refits failed and were excluded", failed.len());
    }
    Ok(ResampleEnsemble {
        method: Method::Efron,
        multiplier: MultiplierKind::None,
        grid: grid.to_vec(),
        paths: outcomes.into_iter().flatten().collect(),
        seed: 0,
        replicates: total,
        failed_replicates: failed,
    })
}
