//! Replicate ensembles of the centred ATE process and the bands built on them.
//!
//! Every replicate draws from its own ChaCha20 stream, keyed by the master
//! seed and the replicate index, so ensembles do not depend on how replicates
//! are scheduled across threads.

mod bands;
mod methods;

pub use bands::{check_band_request, pointwise_ci, simultaneous_band, BandKind, ConfidenceBand};
pub use methods::{
    efron_bootstrap, efron_from_weights, if_paths_from_multipliers, if_resample, multinomial_weights, wild_bootstrap, wild_from_summands,
    wild_paths_from_multipliers,
};

use crate::asymptotics::{influence_curves, tilde_h_curves};
use crate::coxfit::{CoxFit, CoxOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Efron,
    Wild,
    Influence,
}

impl Method {
    pub const ALL: [&'static str; 3] = ["efron", "wild", "influence"];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Efron => "efron",
            Method::Wild => "wild",
            Method::Influence => "influence",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efron" => Ok(Method::Efron),
            "wild" => Ok(Method::Wild),
            "influence" => Ok(Method::Influence),
            other => Err(Error::InvalidInput(format!("unknown method `{other}`; valid methods: {}", Method::ALL.join(", ")))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiplierKind {
    Normal,
    Poisson,
    None,
}

impl fmt::Display for MultiplierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MultiplierKind::Normal => "normal",
            MultiplierKind::Poisson => "poisson",
            MultiplierKind::None => "none",
        })
    }
}

impl FromStr for MultiplierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(MultiplierKind::Normal),
            "poisson" => Ok(MultiplierKind::Poisson),
            other => Err(Error::InvalidInput(format!("unknown multiplier `{other}`; valid multipliers: normal, poisson"))),
        }
    }
}

/// Random stream for replicate `index` under master `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` i.i.d. centred unit-variance multipliers.
pub fn multiplier_draw<R: Rng + ?Sized>(kind: MultiplierKind, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    match kind {
        MultiplierKind::Normal => Ok((0..n).map(|_| StandardNormal.sample(rng)).collect()),
        MultiplierKind::Poisson => {
            let p = Poisson::new(1.0).expect("unit rate is valid");
            Ok((0..n).map(|_| p.sample(rng) - 1.0).collect())
        }
        MultiplierKind::None => Err(Error::InvalidInput("multiplier draw requires normal or poisson".into())),
    }
}

/// `B` replicate paths of a centred, `sqrt(n)`-scaled process on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleEnsemble {
    pub method: Method,
    pub multiplier: MultiplierKind,
    pub grid: Vec<f64>,
    pub paths: Vec<Vec<f64>>,
    pub seed: u64,
    /// Requested number of replicates.
    pub replicates: usize,
    /// Replicates excluded because a refit failed.
    pub failed_replicates: Vec<usize>,
}

/// Ensemble description without the paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub method: Method,
    pub multiplier: MultiplierKind,
    pub seed: u64,
    pub replicates: usize,
    pub retained: usize,
    pub failed_replicates: Vec<usize>,
    pub grid: Vec<f64>,
}

impl ResampleEnsemble {
    pub fn b(&self) -> usize {
        self.paths.len()
    }

    pub fn meta(&self) -> EnsembleMeta {
        EnsembleMeta {
            method: self.method,
            multiplier: self.multiplier,
            seed: self.seed,
            replicates: self.replicates,
            retained: self.paths.len(),
            failed_replicates: self.failed_replicates.clone(),
            grid: self.grid.clone(),
        }
    }

    /// Path values at grid index `g` across replicates.
    pub fn column(&self, g: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p[g]).collect()
    }

    /// One row per replicate; the header lists the grid times.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("replicate");
        for t in &self.grid {
            out.push_str(&format!(",{t:?}"));
        }
        out.push('\n');
        for (b, p) in self.paths.iter().enumerate() {
            out.push_str(&b.to_string());
            for v in p {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `method` on fitted data. The multiplier applies to the wild bootstrap;
/// influence resampling accepts only normal multipliers and Efron ignores it.
#[allow(clippy::too_many_arguments)]
pub fn resample(
    method: Method,
    multiplier: MultiplierKind,
    fits: &[CoxFit],
    ds: &Dataset,
    grid: &[f64],
    b: usize,
    seed: u64,
    options: &CoxOptions,
) -> Result<ResampleEnsemble> {
    match method {
        Method::Wild => wild_bootstrap(fits, ds, grid, b, multiplier, seed),
        Method::Influence => {
            if multiplier == MultiplierKind::Poisson {
                return Err(Error::InvalidInput("influence resampling uses normal multipliers only".into()));
            }
            let th = tilde_h_curves(fits, ds, grid)?;
            if_resample(&influence_curves(&th, fits, ds)?, b, seed)
        }
        Method::Efron => efron_bootstrap(ds, grid, b, seed, options),
    }
}

pub(crate) fn check_replicates(b: usize) -> Result<()> {
    if b < 1 {
        return Err(Error::InvalidInput("number of replicates must be at least 1".into()));
    }
    Ok(())
}
