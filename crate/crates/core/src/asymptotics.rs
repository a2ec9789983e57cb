//! Plug-in ingredients of the martingale representation of
//! `U_n(t) = sqrt(n) (ATE_hat(t) - ATE(t))` and its covariance function.
//!
//! For every cause the bivariate weight separates as
//! `H~_k1(u, t) = alpha_k(u) - beta_k(t)` with
//!
//! ```text
//! alpha_k(u) = (1/n) sum_j [ (d_k1 S(u- | 1, Z_j) + F_1(u | 1, Z_j)) w_k(1, Z_j)
//!                          - (d_k1 S(u- | 0, Z_j) + F_1(u | 0, Z_j)) w_k(0, Z_j) ]
//! beta_k(t)  = (1/n) sum_j [ F_1(t | 1, Z_j) w_k(1, Z_j) - F_1(t | 0, Z_j) w_k(0, Z_j) ]
//! ```
//!
//! where `w_k(a, z) = exp(beta_kA a + beta_kZ' z)` and `d_k1` is 1 for cause 1
//! only. Storing the two factors costs `O(#events + |grid|)` per cause while
//! still giving `H~_k1` at every (event, grid) pair.
//!
//! The vector weights follow from `h_k(t | a, z) = w_k(a, z) [x Lambda_0k(t) - Q_k(t)]`
//! with `Q_k(t) = sum_{u <= t} E_k(u) dLambda_0k(u)`, accumulated in one pass
//! over the knots per subject and arm.

use crate::coxfit::{spd_inverse, sweep, CoxFit};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gformula::{check_fits, check_grid, Engine};
use crate::stats::par_chunked_sum;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const NONE: usize = usize::MAX;

/// Plug-in quantities for one cause.
#[derive(Debug, Clone)]
pub struct CauseTerms {
    pub cause: usize,
    /// Cause-specific event times in `(0, tau]`, increasing.
    pub event_times: Vec<f64>,
    /// Subject failing at each event time.
    pub event_subjects: Vec<usize>,
    /// Breslow increments `dLambda_0k(u)`.
    pub d_lambda0: Vec<f64>,
    /// `S^(0)(beta_hat, u)`.
    pub s0: Vec<f64>,
    /// `E(beta_hat, u)`.
    pub e: Vec<Vec<f64>>,
    /// `alpha_k(u)` at each event time up to the last grid time (zero beyond).
    pub alpha: Vec<f64>,
    /// `beta_k(t)` on the grid.
    pub beta: Vec<f64>,
    /// `H~_k2(t)` on the grid.
    pub h2: Vec<Vec<f64>>,
    /// `Sigma_hat_k`.
    pub sigma: DMatrix<f64>,
    /// Number of events at or before each grid time.
    pub grid_counts: Vec<usize>,
}

impl CauseTerms {
    /// `H~_k1(u_e, t_g)` for event index `e` and grid index `g`; `None` when `u_e > t_g`.
    pub fn h1(&self, e: usize, g: usize) -> Option<f64> {
        (e < self.grid_counts[g]).then(|| self.alpha[e] - self.beta[g])
    }

    pub fn sigma_inverse(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.sigma, &format!("Sigma_hat for cause {}", self.cause))
    }

    /// Number of events at or before `t`.
    fn count_le(&self, t: f64) -> usize {
        self.event_times.partition_point(|&u| u <= t)
    }
}

/// `H~_k1`, `H~_k2` and friends for all causes on one grid.
#[derive(Debug, Clone)]
pub struct TildeH {
    pub grid: Vec<f64>,
    pub n: usize,
    pub causes: Vec<CauseTerms>,
}

impl TildeH {
    pub fn cause(&self, k: usize) -> &CauseTerms {
        &self.causes[k - 1]
    }

    /// All stored `(u, t, H~_k1(u, t))` triples with `u <= t`.
    pub fn h1_table(&self, k: usize) -> Vec<(f64, f64, f64)> {
        let c = self.cause(k);
        let mut out = Vec::new();
        for (g, &t) in self.grid.iter().enumerate() {
            for e in 0..c.grid_counts[g] {
                out.push((c.event_times[e], t, c.alpha[e] - c.beta[g]));
            }
        }
        out
    }
}

struct Layout {
    g: usize,
    d: usize,
    alpha_off: Vec<usize>,
    beta_off: usize,
    h2_off: usize,
    dim: usize,
}

/// Computes the plug-in `H~` curves from converged fits on `ds`.
pub fn tilde_h_curves(fits: &[CoxFit], ds: &Dataset, grid: &[f64]) -> Result<TildeH> {
    check_fits(fits, ds)?;
    check_grid(grid, ds.tau())?;
    let n = ds.n();
    let causes = ds.causes();
    let d = ds.p() + 1;
    let engine = Engine::new(fits);
    let m = engine.times.len();

    let mut terms = Vec::with_capacity(causes);
    let mut ev_pos = Vec::with_capacity(causes);
    let mut lam_prefix = Vec::with_capacity(causes);
    let mut q_prefix = Vec::with_capacity(causes);
    for (k, fit) in fits.iter().enumerate() {
        let s = sweep(ds, k + 1, &fit.beta, None);
        let times: Vec<f64> = s.events.iter().map(|&i| ds.time(i)).collect();
        if times.as_slice() != fit.baseline.times() {
            return Err(Error::InvalidInput(format!("fit for cause {} was not computed from this dataset", k + 1)));
        }
        let e: Vec<Vec<f64>> = s.e.chunks(d).map(<[f64]>::to_vec).collect();
        let mut pos = vec![NONE; m];
        let mut lam = vec![0.0; m + 1];
        let mut q = vec![0.0; (m + 1) * d];
        let mut next = 0;
        for j in 0..m {
            lam[j + 1] = lam[j];
            q.copy_within(j * d..(j + 1) * d, (j + 1) * d);
            if next < times.len() && engine.times[j] == times[next] {
                pos[j] = next;
                let dl = s.increments[next];
                lam[j + 1] += dl;
                for r in 0..d {
                    q[(j + 1) * d + r] += e[next][r] * dl;
                }
                next += 1;
            }
        }
        let grid_counts = grid.iter().map(|&t| times.partition_point(|&u| u <= t)).collect();
        terms.push(CauseTerms {
            cause: k + 1,
            event_subjects: s.events.clone(),
            d_lambda0: s.increments.clone(),
            s0: s.s0.clone(),
            e,
            alpha: vec![0.0; times.len()],
            beta: vec![0.0; grid.len()],
            h2: vec![vec![0.0; d]; grid.len()],
            sigma: s.information / n as f64,
            grid_counts,
            event_times: times,
        });
        ev_pos.push(pos);
        lam_prefix.push(lam);
        q_prefix.push(q);
    }

    let g = grid.len();
    let mut alpha_off = Vec::with_capacity(causes);
    let mut off = 0;
    for t in &terms {
        alpha_off.push(off);
        off += t.event_times.len();
    }
    let layout = Layout { g, d, alpha_off, beta_off: off, h2_off: off + causes * g, dim: off + causes * g + causes * g * d };
    let counts = engine.counts(grid);
    let upto = counts.last().copied().unwrap_or(0);
    let terms_ref = &terms;

    let sums = par_chunked_sum(n, layout.dim, |j, acc| {
        let z = &ds.subject(j).covariates;
        for (a, sign) in [(1u8, 1.0), (0u8, -1.0)] {
            accumulate_arm(&engine, terms_ref, &ev_pos, &lam_prefix, &q_prefix, &layout, &counts, upto, a, z, sign, acc);
        }
    });

    let nf = n as f64;
    for (k, t) in terms.iter_mut().enumerate() {
        let a0 = layout.alpha_off[k];
        for (e, v) in t.alpha.iter_mut().enumerate() {
            *v = sums[a0 + e] / nf;
        }
        for gi in 0..g {
            t.beta[gi] = sums[layout.beta_off + k * g + gi] / nf;
            for r in 0..d {
                t.h2[gi][r] = sums[layout.h2_off + (k * g + gi) * d + r] / nf;
            }
        }
    }
    Ok(TildeH { grid: grid.to_vec(), n, causes: terms })
}

#[allow(clippy::too_many_arguments)]
fn accumulate_arm(
    engine: &Engine,
    terms: &[CauseTerms],
    ev_pos: &[Vec<usize>],
    lam_prefix: &[Vec<f64>],
    q_prefix: &[Vec<f64>],
    layout: &Layout,
    counts: &[usize],
    upto: usize,
    a: u8,
    z: &[f64],
    sign: f64,
    acc: &mut [f64],
) {
    let kk = engine.causes;
    let d = layout.d;
    let g_len = layout.g;
    let rr = engine.risks(a, z);
    let mut x = Vec::with_capacity(d);
    x.push(f64::from(a));
    x.extend_from_slice(z);

    // running sums: P_k = sum F1 dL0k, V_k = sum F1 dL0k E_k, W = sum S(u-) dL01 E_1
    let mut p = vec![0.0; kk];
    let mut v = vec![0.0; kk * d];
    let mut w = vec![0.0; d];
    let mut cum = 0.0;
    let mut s_left = 1.0;
    let mut f1 = 0.0;
    let mut g = counts.partition_point(|&c| c == 0);

    let emit = |g: usize, f1: f64, p: &[f64], v: &[f64], w: &[f64], acc: &mut [f64]| {
        let c = counts[g];
        for k in 0..kk {
            acc[layout.beta_off + k * g_len + g] += sign * rr[k] * f1;
            let lam = lam_prefix[k][c];
            let q = &q_prefix[k][c * d..(c + 1) * d];
            let base = layout.h2_off + (k * g_len + g) * d;
            for r in 0..d {
                let h = rr[k] * (x[r] * lam - q[r]);
                let psi = f1 * h - rr[k] * (x[r] * p[k] - v[k * d + r]);
                acc[base + r] += if k == 0 {
                    let phi = x[r] * f1 - rr[0] * w[r];
                    sign * (phi - psi)
                } else {
                    -sign * psi
                };
            }
        }
    };

    for j in 0..upto {
        let row = &engine.inc[j * kk..(j + 1) * kk];
        f1 += s_left * rr[0] * row[0];
        for k in 0..kk {
            let e = ev_pos[k][j];
            if e == NONE {
                continue;
            }
            let dl = row[k];
            let ek = &terms[k].e[e];
            let lead = if k == 0 { s_left } else { 0.0 };
            acc[layout.alpha_off[k] + e] += sign * rr[k] * (lead + f1);
            p[k] += f1 * dl;
            for r in 0..d {
                v[k * d + r] += f1 * dl * ek[r];
            }
            if k == 0 {
                for r in 0..d {
                    w[r] += s_left * dl * ek[r];
                }
            }
        }
        cum += rr.iter().zip(row).map(|(r, d)| r * d).sum::<f64>();
        s_left = (-cum).exp();
        while g < counts.len() && counts[g] == j + 1 {
            emit(g, f1, &p, &v, &w, acc);
            g += 1;
        }
    }
}

/// `alpha_k(u)` at an arbitrary time by direct averaging over subjects.
pub fn alpha_at(fits: &[CoxFit], ds: &Dataset, k: usize, u: f64) -> f64 {
    let engine = Engine::new(fits);
    let upto = engine.times.partition_point(|&s| s <= u);
    let total: f64 = (0..ds.n())
        .map(|j| {
            let z = &ds.subject(j).covariates;
            let mut val = 0.0;
            for (a, sign) in [(1u8, 1.0), (0u8, -1.0)] {
                let rr = engine.risks(a, z);
                let (mut s_before, mut f) = (1.0, 0.0);
                engine.scan_with(&rr, upto, &mut |j, s_left, s, f1| {
                    s_before = if engine.times[j] == u { s_left } else { s };
                    f = f1;
                });
                let lead = if k == 1 { s_before } else { 0.0 };
                val += sign * rr[k - 1] * (lead + f);
            }
            val
        })
        .sum();
    total / ds.n() as f64
}

/// `(H_k1i(T_i, t), H_k2i(T_i, t))` over the grid for subject `i` and cause `k`.
/// The first component is zero for grid times before `T_i`.
pub fn subject_h(th: &TildeH, fits: &[CoxFit], ds: &Dataset, i: usize, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = th.cause(k);
    let sinv = c.sigma_inverse()?;
    let u = ds.time(i);
    let sqrt_n = (th.n as f64).sqrt();
    let (alpha, s0, e) = match c.event_subjects.iter().position(|&s| s == i) {
        Some(pos) if pos < c.grid_counts.last().copied().unwrap_or(0) => (c.alpha[pos], c.s0[pos], c.e[pos].clone()),
        _ => {
            let ws = crate::coxfit::weighted_sums(ds, &fits[k - 1].beta, u)?;
            (alpha_at(fits, ds, k, u), ws.s0, ws.e.as_slice().to_vec())
        }
    };
    let x = DVector::from_column_slice(ds.design_row(i));
    let v = &sinv * (x - DVector::from_vec(e));
    let mut h1 = Vec::with_capacity(th.grid.len());
    let mut h2 = Vec::with_capacity(th.grid.len());
    for (g, &t) in th.grid.iter().enumerate() {
        h1.push(if u <= t { (alpha - c.beta[g]) / (sqrt_n * s0) } else { 0.0 });
        h2.push(c.h2[g].iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / sqrt_n);
    }
    Ok((h1, h2))
}

/// Plug-in covariance matrix `xi_hat(t_r, t_s)` over the grid.
pub fn xi_matrix(th: &TildeH) -> Result<DMatrix<f64>> {
    let g = th.grid.len();
    let mut out = DMatrix::zeros(g, g);
    for c in &th.causes {
        let sinv = c.sigma_inverse()?;
        // prefix sums of alpha^2 c, alpha c and c with c(u) = dLambda_0k(u) / S0(u)
        let ne = c.event_times.len();
        let mut a2 = vec![0.0; ne + 1];
        let mut a1 = vec![0.0; ne + 1];
        let mut cc = vec![0.0; ne + 1];
        for e in 0..ne {
            let w = c.d_lambda0[e] / c.s0[e];
            a2[e + 1] = a2[e] + c.alpha[e] * c.alpha[e] * w;
            a1[e + 1] = a1[e] + c.alpha[e] * w;
            cc[e + 1] = cc[e] + w;
        }
        let sh: Vec<DVector<f64>> = c.h2.iter().map(|h| &sinv * DVector::from_column_slice(h)).collect();
        for lo in 0..g {
            for hi in lo..g {
                let m = c.grid_counts[lo];
                let (b1, b2) = (c.beta[lo], c.beta[hi]);
                let part1 = a2[m] - (b1 + b2) * a1[m] + b1 * b2 * cc[m];
                let part2: f64 = c.h2[lo].iter().zip(sh[hi].iter()).map(|(a, b)| a * b).sum();
                let v = part1 + part2;
                out[(lo, hi)] += v;
                if hi != lo {
                    out[(hi, lo)] += v;
                }
            }
        }
    }
    Ok(out)
}

/// `xi_hat(t1, t2)` from fits on `ds`.
pub fn variance_xi(fits: &[CoxFit], ds: &Dataset, t1: f64, t2: f64) -> Result<f64> {
    let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    let grid: Vec<f64> = if lo == hi { vec![lo] } else { vec![lo, hi] };
    let th = tilde_h_curves(fits, ds, &grid)?;
    let m = xi_matrix(&th)?;
    Ok(m[(0, grid.len() - 1)])
}

/// Per-subject wild-bootstrap summands `X_i(t)`; only subjects with an observed
/// event contribute, so only their rows are stored.
#[derive(Debug, Clone)]
pub struct Summands {
    pub grid: Vec<f64>,
    /// Subject index of each stored row.
    pub rows: Vec<usize>,
    /// Row-major `rows.len() x grid.len()`.
    pub values: Vec<f64>,
}

impl Summands {
    pub fn row(&self, r: usize) -> &[f64] {
        let g = self.grid.len();
        &self.values[r * g..(r + 1) * g]
    }
}

/// `X_i(t) = sum_k [ H_k1i(T_i, t) N_ki(t) + H_k2i(T_i, t) N_ki(tau) ]`.
pub fn wild_summands(th: &TildeH, ds: &Dataset) -> Result<Summands> {
    let g = th.grid.len();
    let sqrt_n = (th.n as f64).sqrt();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for c in &th.causes {
        let sinv = c.sigma_inverse()?;
        for (e, &i) in c.event_subjects.iter().enumerate() {
            let x = DVector::from_column_slice(ds.design_row(i));
            let v = &sinv * (x - DVector::from_column_slice(&c.e[e]));
            rows.push(i);
            for gi in 0..g {
                let first = if e < c.grid_counts[gi] { (c.alpha[e] - c.beta[gi]) / c.s0[e] } else { 0.0 };
                let second: f64 = c.h2[gi].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                values.push((first + second) / sqrt_n);
            }
        }
    }
    Ok(Summands { grid: th.grid.clone(), rows, values })
}

/// `sum_k sum_i X_i^(k) X_i^(k)'` over the grid.
pub fn lemma2_oracle(th: &TildeH, ds: &Dataset) -> Result<DMatrix<f64>> {
    let x = wild_summands(th, ds)?;
    let g = th.grid.len();
    let mat = DMatrix::from_row_slice(x.rows.len(), g, &x.values);
    Ok(mat.transpose() * mat)
}

/// Estimated influence curves `IF_i(t)`, one row per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceCurves {
    pub method: String,
    pub grid: Vec<f64>,
    pub n: usize,
    /// Row-major `n x grid.len()`.
    pub values: Vec<f64>,
}

impl InfluenceCurves {
    pub fn row(&self, i: usize) -> &[f64] {
        let g = self.grid.len();
        &self.values[i * g..(i + 1) * g]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject");
        for t in &self.grid {
            out.push_str(&format!(",{t:?}"));
        }
        out.push('\n');
        for i in 0..self.n {
            out.push_str(&i.to_string());
            for v in self.row(i) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `IF_i(t) = sqrt(n) x` (i-th summand of the martingale representation with
/// the residuals `dM_ki = dN_ki - Y_i dLambda_k(. | A_i, Z_i)` estimated).
pub fn influence_curves(th: &TildeH, fits: &[CoxFit], ds: &Dataset) -> Result<InfluenceCurves> {
    let g = th.grid.len();
    let d = ds.p() + 1;
    struct Pre {
        sh: Vec<Vec<f64>>,
        pa: Vec<f64>,
        pc: Vec<f64>,
        lam: Vec<f64>,
        q: Vec<Vec<f64>>,
        event_of: Vec<usize>,
    }
    let mut pre = Vec::with_capacity(th.causes.len());
    for c in &th.causes {
        let sinv = c.sigma_inverse()?;
        let sh = c.h2.iter().map(|h| (&sinv * DVector::from_column_slice(h)).as_slice().to_vec()).collect();
        let ne = c.event_times.len();
        let mut pa = vec![0.0; ne + 1];
        let mut pc = vec![0.0; ne + 1];
        let mut lam = vec![0.0; ne + 1];
        let mut q = vec![vec![0.0; d]; ne + 1];
        for e in 0..ne {
            let w = c.d_lambda0[e] / c.s0[e];
            pa[e + 1] = pa[e] + c.alpha[e] * w;
            pc[e + 1] = pc[e] + w;
            lam[e + 1] = lam[e] + c.d_lambda0[e];
            for r in 0..d {
                q[e + 1][r] = q[e][r] + c.e[e][r] * c.d_lambda0[e];
            }
        }
        let mut event_of = vec![NONE; ds.n()];
        for (e, &i) in c.event_subjects.iter().enumerate() {
            event_of[i] = e;
        }
        pre.push(Pre { sh, pa, pc, lam, q, event_of });
    }

    let rows: Vec<Vec<f64>> = (0..ds.n())
        .into_par_iter()
        .map(|i| {
            let x = ds.design_row(i);
            let ti = ds.time(i);
            let mut out = vec![0.0; g];
            for (k, c) in th.causes.iter().enumerate() {
                let p = &pre[k];
                let wk = fits[k].relative_risk(x[0] as u8, &x[1..]);
                let ci = c.count_le(ti);
                // compensator part of the vector term does not depend on t
                let comp: Vec<f64> = (0..d).map(|r| wk * (x[r] * p.lam[ci] - p.q[ci][r])).collect();
                let ev = p.event_of[i];
                let resid: Option<Vec<f64>> = (ev != NONE).then(|| (0..d).map(|r| x[r] - c.e[ev][r]).collect());
                for gi in 0..g {
                    let m = ci.min(c.grid_counts[gi]);
                    let mut v = -wk * (p.pa[m] - c.beta[gi] * p.pc[m]);
                    let mut vec_part: f64 = -comp.iter().zip(&p.sh[gi]).map(|(a, b)| a * b).sum::<f64>();
                    if let Some(res) = &resid {
                        if ev < c.grid_counts[gi] {
                            v += (c.alpha[ev] - c.beta[gi]) / c.s0[ev];
                        }
                        vec_part += res.iter().zip(&p.sh[gi]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    out[gi] += v + vec_part;
                }
            }
            out
        })
        .collect();
    Ok(InfluenceCurves {
        method: "martingale-residual".into(),
        grid: th.grid.clone(),
        n: ds.n(),
        values: rows.into_iter().flatten().collect(),
    })
}

/// CSV rendering of a grid-indexed square matrix.
pub fn matrix_csv(grid: &[f64], m: &DMatrix<f64>) -> String {
    let mut out = String::from("t");
    for t in grid {
        out.push_str(&format!(",{t:?}"));
    }
    out.push('\n');
    for (r, t) in grid.iter().enumerate() {
        out.push_str(&format!("{t:?}"));
        for c in 0..grid.len() {
            out.push_str(&format!(",{:?}", m[(r, c)]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::coxfit::{fit_all, CoxOptions};
    use crate::data::Subject;
    use crate::gformula::{cif1, default_grid, survival_curve};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-cause data with two covariates.
    pub(crate) fn two_cause(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..n)
            .map(|i| {
                let z1: f64 = rng.random_range(-1.0..1.0);
                let z2: f64 = rng.random_range(-1.0..1.0);
                let a = rng.random_bool(1.0 / (1.0 + (-z1).exp())) as u8;
                let a_f = f64::from(a);
                let l1 = 0.9 * (-0.5 * a_f + 0.5 * z1 - 0.3 * z2).exp();
                let l2 = 0.6 * (0.3 * a_f - 0.4 * z1 + 0.2 * z2).exp();
                let t = -rng.random::<f64>().ln() / (l1 + l2);
                let cause = if rng.random::<f64>() < l1 / (l1 + l2) { 1 } else { 2 };
                let c = -rng.random::<f64>().ln() / 0.35;
                let (time, status) = if t <= c { (t, cause) } else { (c, 0) };
                Subject::new(i.to_string(), time, status, a, vec![z1, z2])
            })
            .collect();
        Dataset::new(subjects, 2).unwrap()
    }

    fn setup(n: usize, seed: u64) -> (Dataset, Vec<CoxFit>, Vec<f64>) {
        let ds = two_cause(n, seed);
        let fits = fit_all(&ds, &CoxOptions::default()).unwrap();
        let grid = default_grid(&ds);
        (ds, fits, grid)
    }

    /// H~ evaluated straight from the displayed definitions, one subject at a time.
    fn direct_h1(fits: &[CoxFit], ds: &Dataset, k: usize, u: f64, t: f64) -> f64 {
        let mut total = 0.0;
        for s in ds.subjects() {
            let z = &s.covariates;
            let arm = |a: u8| {
                let f = cif1(fits, a, z);
                let w = fits[k - 1].relative_risk(a, z);
                let lead = if k == 1 { survival_curve(fits, a, z).left_limit(u) } else { 0.0 };
                (lead - f.eval(t) + f.eval(u)) * w
            };
            total += arm(1) - arm(0);
        }
        total / ds.n() as f64
    }

    /// H~_k2 from the displayed phi/psi integrals, summed jump by jump.
    fn direct_h2(fits: &[CoxFit], ds: &Dataset, k: usize, t: f64) -> Vec<f64> {
        let d = ds.p() + 1;
        let mut total = vec![0.0; d];
        for s in ds.subjects() {
            for (a, sign) in [(1u8, 1.0), (0u8, -1.0)] {
                let mut x = vec![f64::from(a)];
                x.extend_from_slice(&s.covariates);
                let f = cif1(fits, a, &s.covariates);
                let surv = survival_curve(fits, a, &s.covariates);
                let dh = |kk: usize, u: f64, dl: f64| -> Vec<f64> {
                    let ws = crate::coxfit::weighted_sums(ds, &fits[kk - 1].beta, u).unwrap();
                    let w = fits[kk - 1].relative_risk(a, &s.covariates);
                    (0..d).map(|r| (x[r] - ws.e[r]) * w * dl).collect()
                };
                let psi = |kk: usize| -> Vec<f64> {
                    let mut out = vec![0.0; d];
                    for (u, dl) in fits[kk - 1].baseline.jumps().filter(|&(u, _)| u <= t) {
                        let h = dh(kk, u, dl);
                        for r in 0..d {
                            out[r] += (f.eval(t) - f.eval(u)) * h[r];
                        }
                    }
                    out
                };
                if k == 1 {
                    let mut phi = vec![0.0; d];
                    for (u, dl) in fits[0].baseline.jumps().filter(|&(u, _)| u <= t) {
                        let h = dh(1, u, dl);
                        for r in 0..d {
                            phi[r] += surv.left_limit(u) * h[r];
                        }
                    }
                    let p = psi(1);
                    for r in 0..d {
                        total[r] += sign * (phi[r] - p[r]);
                    }
                } else {
                    let p = psi(k);
                    for r in 0..d {
                        total[r] -= sign * p[r];
                    }
                }
            }
        }
        total.iter().map(|v| v / ds.n() as f64).collect()
    }

    #[test]
    fn tilde_h_matches_direct_definitions() {
        let (ds, fits, grid) = setup(40, 3);
        let sub: Vec<f64> = vec![0.0, grid[3], grid[grid.len() / 2], *grid.last().unwrap()];
        let th = tilde_h_curves(&fits, &ds, &sub).unwrap();
        for k in 1..=2 {
            let c = th.cause(k);
            for (g, &t) in sub.iter().enumerate() {
                let h2 = direct_h2(&fits, &ds, k, t);
                for r in 0..3 {
                    assert!((c.h2[g][r] - h2[r]).abs() < 1e-12, "h2 k={k} g={g} r={r}: {} vs {}", c.h2[g][r], h2[r]);
                }
                for e in 0..c.grid_counts[g] {
                    let direct = direct_h1(&fits, &ds, k, c.event_times[e], t);
                    assert!((c.h1(e, g).unwrap() - direct).abs() < 1e-12);
                }
            }
            assert!(c.h1(c.grid_counts[1], 1).is_none());
        }
    }

    #[test]
    fn alpha_at_agrees_with_bulk_values() {
        let (ds, fits, grid) = setup(50, 5);
        let th = tilde_h_curves(&fits, &ds, &grid).unwrap();
        for k in 1..=2 {
            let c = th.cause(k);
            for e in [0, c.grid_counts.last().unwrap() / 2] {
                let direct = alpha_at(&fits, &ds, k, c.event_times[e]);
                assert!((direct - c.alpha[e]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tilde_h1_vanishes_without_treatment_effect() {
        let mut subjects = Vec::new();
        for i in 0..20 {
            subjects.push(Subject::new(i.to_string(), 1.0 + i as f64 * 0.1, if i % 4 == 3 { 0 } else { 1 }, (i % 2) as u8, vec![0.5]));
        }
        let ds = Dataset::new(subjects, 1).unwrap();
        let fit = CoxFit::at_beta(&ds, 1, &[0.0, 0.0]).unwrap();
        let th = tilde_h_curves(&[fit], &ds, &default_grid(&ds)).unwrap();
        assert!(th.h1_table(1).iter().all(|&(_, _, v)| v.abs() < 1e-15));
    }

    #[test]
    fn tilde_hk1_vanishes_on_the_diagonal() {
        let (ds, fits, _) = setup(60, 7);
        let grid: Vec<f64> = std::iter::once(0.0).chain(ds.event_times(2).into_iter().take(10)).collect();
        let th = tilde_h_curves(&fits, &ds, &grid).unwrap();
        let c = th.cause(2);
        for g in 1..grid.len() {
            let e = c.grid_counts[g] - 1;
            assert_eq!(c.event_times[e], grid[g]);
            assert!(c.h1(e, g).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn h1_respects_theoretical_bound() {
        let (ds, fits, grid) = setup(120, 11);
        let th = tilde_h_curves(&fits, &ds, &grid).unwrap();
        for k in 1..=2 {
            let b = &fits[k - 1].beta;
            let maxz = ds.subjects().iter().map(|s| (b[1] * s.covariates[0] + b[2] * s.covariates[1]).exp()).fold(0.0, f64::max);
            let bound = (b[0].exp() + 1.0) * maxz;
            assert!(th.h1_table(k).iter().all(|&(_, _, v)| v.is_finite() && v.abs() <= bound));
        }
    }

    #[test]
    fn hand_case_two_subjects_one_event() {
        // one cause, one event at t = 1 (treated, z = 0.5), one censoring at t = 2
        let ds = Dataset::new(vec![Subject::new("a", 1.0, 1, 1, vec![0.5]), Subject::new("b", 2.0, 0, 0, vec![-1.0])], 1).unwrap();
        let beta = [0.4, -0.3];
        let fit = CoxFit::at_beta(&ds, 1, &beta).unwrap();
        let w = |a: f64, z: f64| (beta[0] * a + beta[1] * z).exp();
        let dl = 1.0 / (w(1.0, 0.5) + w(0.0, -1.0));
        let e = [w(1.0, 0.5) / (w(1.0, 0.5) + w(0.0, -1.0)), (0.5 * w(1.0, 0.5) - w(0.0, -1.0)) / (w(1.0, 0.5) + w(0.0, -1.0))];
        // phi1 - psi11 at t >= 1 with a single jump: S(1-) = 1 so phi = dh, psi = 0
        let mut expect = [0.0; 2];
        for z in [0.5, -1.0] {
            for (a, sign) in [(1.0, 1.0), (0.0, -1.0)] {
                let x = [a, z];
                for r in 0..2 {
                    expect[r] += sign * w(a, z) * dl * (x[r] - e[r]) / 2.0;
                }
            }
        }
        let th = tilde_h_curves(&[fit], &ds, &[0.0, 1.0, 2.0]).unwrap();
        for g in 1..3 {
            for r in 0..2 {
                assert!((th.cause(1).h2[g][r] - expect[r]).abs() < 1e-15);
            }
        }
        assert_eq!(th.cause(1).h2[0], vec![0.0, 0.0]);
    }

    #[test]
    fn xi_is_symmetric_and_zero_at_origin() {
        let (ds, fits, grid) = setup(150, 13);
        let th = tilde_h_curves(&fits, &ds, &grid).unwrap();
        let xi = xi_matrix(&th).unwrap();
        assert_eq!(xi, xi.transpose());
        for g in 0..grid.len() {
            assert_eq!(xi[(0, g)], 0.0);
            assert!(xi[(g, g)] >= -1e-10);
        }
        let eig = nalgebra::SymmetricEigen::new(xi.clone()).eigenvalues;
        assert!(eig.min() >= -1e-8 * xi.trace());
        let a = variance_xi(&fits, &ds, grid[5], grid[20]).unwrap();
        let b = variance_xi(&fits, &ds, grid[20], grid[5]).unwrap();
        assert_eq!(a, b);
        assert!((a - xi[(5, 20)]).abs() < 1e-12);
    }

    #[test]
    fn xi_diagonal_equals_direct_sum() {
        let (ds, fits, grid) = setup(60, 17);
        let t = grid[grid.len() / 2];
        let th = tilde_h_curves(&fits, &ds, &[t]).unwrap();
        let mut direct = 0.0;
        for k in 1..=2 {
            let c = th.cause(k);
            let sinv = c.sigma_inverse().unwrap();
            for e in 0..c.grid_counts[0] {
                let h = direct_h1(&fits, &ds, k, c.event_times[e], t);
                direct += h * h * c.d_lambda0[e] / c.s0[e];
            }
            let h2 = DVector::from_vec(direct_h2(&fits, &ds, k, t));
            direct += (h2.transpose() * sinv * &h2)[(0, 0)];
        }
        assert!((variance_xi(&fits, &ds, t, t).unwrap() - direct).abs() < 1e-10 * direct);
    }

    #[test]
    fn lemma2_oracle_basic_properties() {
        let (ds, fits, grid) = setup(200, 19);
        let th = tilde_h_curves(&fits, &ds, &grid).unwrap();
        let m = lemma2_oracle(&th, &ds).unwrap();
        for g in 0..grid.len() {
            assert!(m[(g, g)] >= 0.0);
            assert_eq!(m[(0, g)], 0.0);
        }
        let xi = xi_matrix(&th).unwrap();
        let diff = (&m - &xi).amax();
        let maxdiag = (0..grid.len()).map(|g| xi[(g, g)]).fold(0.0, f64::max);
        assert!(diff < 0.5 * maxdiag, "{diff} vs {maxdiag}");
    }

    #[test]
    fn subject_h_matches_summands_and_scales() {
        let (ds, fits, grid) = setup(80, 23);
        let th = tilde_h_curves(&fits, &ds, &grid).unwrap();
        let x = wild_summands(&th, &ds).unwrap();
        for (r, &i) in x.rows.iter().enumerate().take(10) {
            let k = ds.subject(i).status;
            let (h1, h2) = subject_h(&th, &fits, &ds, i, k).unwrap();
            for g in 0..grid.len() {
                assert!((h1[g] + h2[g] - x.row(r)[g]).abs() < 1e-14);
            }
        }
        // censored subject: finite values
        let censored = (0..ds.n()).find(|&i| ds.subject(i).status == 0).unwrap();
        let (h1, h2) = subject_h(&th, &fits, &ds, censored, 1).unwrap();
        assert!(h1.iter().chain(&h2).all(|v| v.is_finite()));
    }

    #[test]
    fn quadrupled_sample_halves_h1() {
        let (ds, fits, grid) = setup(200, 29);
        let t = *grid.last().unwrap();
        let th = tilde_h_curves(&fits, &ds, &[t]).unwrap();
        // subject with the largest |H_11i|
        let c = th.cause(1);
        let (e, _) = (0..c.grid_counts[0]).map(|e| (e, c.h1(e, 0).unwrap().abs())).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        let i = c.event_subjects[e];
        let (h1, _) = subject_h(&th, &fits, &ds, i, 1).unwrap();
        // four copies of every row at times shifted by tiny rank-preserving offsets
        let gap = 1e-9;
        let mut rows = Vec::new();
        for c in 0..4 {
            for s in ds.subjects() {
                rows.push(Subject { id: format!("{}-{c}", s.id), time: s.time + c as f64 * gap, ..s.clone() });
            }
        }
        let big = Dataset::new(rows, 2).unwrap();
        let big_fits: Vec<CoxFit> = fits.iter().map(|f| CoxFit::at_beta(&big, f.cause, &f.beta).unwrap()).collect();
        let th4 = tilde_h_curves(&big_fits, &big, &[t + 4.0 * gap]).unwrap();
        let (h1_big, _) = subject_h(&th4, &big_fits, &big, i, 1).unwrap();
        // copies split each jump, so agreement is up to O(1/n)
        assert!((h1_big[0] / h1[0] - 0.5).abs() < 0.02, "{}", h1_big[0] / h1[0]);
    }

    #[test]
    fn influence_columns_sum_to_score_residual() {
        let (ds, fits, grid) = setup(150, 31);
        let th = tilde_h_curves(&fits, &ds, &grid).unwrap();
        let ic = influence_curves(&th, &fits, &ds).unwrap();
        let g = grid.len();
        let mut sums = vec![0.0; g];
        for i in 0..ds.n() {
            for (s, v) in sums.iter_mut().zip(ic.row(i)) {
                *s += v;
            }
        }
        let scale = (0..ds.n()).map(|i| ic.row(i)[g - 1].abs()).fold(0.0, f64::max);
        assert!(sums.iter().all(|s| s.abs() < 1e-6 * scale * ds.n() as f64), "{sums:?}");
        assert!(ic.row(0).iter().all(|v| v.is_finite()));
        assert!(ic.row(0)[0] == 0.0);
    }

    #[test]
    fn influence_reduces_to_coefficient_term_without_effect() {
        // with beta_A = 0 and no covariates H~_11 vanishes, leaving only the
        // coefficient-estimation term h2' Sigma^-1 int (x_i - E) dM_i
        let mut subjects = Vec::new();
        for i in 0..30 {
            subjects.push(Subject::new(i.to_string(), 1.0 + i as f64 * 0.1, if i % 5 == 4 { 0 } else { 1 }, (i % 2) as u8, vec![]));
        }
        let ds = Dataset::new(subjects, 1).unwrap();
        let fit = CoxFit::at_beta(&ds, 1, &[0.0]).unwrap();
        let grid = default_grid(&ds);
        let th = tilde_h_curves(std::slice::from_ref(&fit), &ds, &grid).unwrap();
        assert!(th.h1_table(1).iter().all(|&(_, _, v)| v.abs() < 1e-15));
        let ic = influence_curves(&th, std::slice::from_ref(&fit), &ds).unwrap();
        let c = th.cause(1);
        let sinv = c.sigma_inverse().unwrap()[(0, 0)];
        for i in 0..ds.n() {
            let x = ds.design_row(i)[0];
            let mut resid = 0.0;
            for e in 0..c.event_times.len() {
                if c.event_times[e] <= ds.time(i) {
                    resid -= (x - c.e[e][0]) * c.d_lambda0[e];
                }
                if c.event_subjects[e] == i {
                    resid += x - c.e[e][0];
                }
            }
            for (g, v) in ic.row(i).iter().enumerate() {
                assert!((v - c.h2[g][0] * sinv * resid).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_beyond_tau_is_rejected() {
        let (ds, fits, _) = setup(30, 1);
        assert!(matches!(tilde_h_curves(&fits, &ds, &[0.0, ds.tau() + 1.0]), Err(Error::GridBeyondTau { .. })));
    }
}
