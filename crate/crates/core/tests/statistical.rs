//! Monte-Carlo and large-sample checks against known-truth scenarios.

#![allow(clippy::needless_range_loop)]

use crisk_core::asymptotics::{influence_curves, lemma2_oracle, tilde_h_curves, xi_matrix};
use crisk_core::coxfit::{fit_all, score_and_information, sigma_hat, CoxOptions};
use crisk_core::gformula::ate_estimate;
use crisk_core::resampling::{if_resample, wild_bootstrap, MultiplierKind};
use crisk_core::simulate::{generate_dataset, true_ate, Baseline, Scenario, TreatmentModel};
use crisk_core::stats::mean_var;
use nalgebra::DMatrix;

fn one_covariate() -> Scenario {
    Scenario {
        causes: 1,
        p: 1,
        betas: vec![vec![0.5, 0.8]],
        baseline: Baseline::Exponential { rates: vec![1.0] },
        treatment: TreatmentModel { intercept: 0.0, coefficients: vec![1.0] },
        censoring_rate: 0.3,
        tau: 2.0,
        ..Scenario::default()
    }
}

/// `Var(U(beta_0) / sqrt(n))` over independent samples.
fn monte_carlo_sigma(sc: &Scenario, cause: usize, n: usize, reps: u64) -> DMatrix<f64> {
    let beta0 = &sc.betas[cause - 1];
    let d = beta0.len();
    let mut acc = DMatrix::zeros(d, d);
    for r in 0..reps {
        let ds = generate_dataset(sc, n, 90_000 + r).unwrap();
        let (u, _) = score_and_information(&ds, cause, beta0).unwrap();
        acc += &u * u.transpose() / n as f64;
    }
    acc / reps as f64
}

fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn sigma_hat_matches_monte_carlo_score_variance() {
    let sc = one_covariate();
    let mc = monte_carlo_sigma(&sc, 1, 200, 10_000);
    let ds = generate_dataset(&sc, 500, 7).unwrap();
    let fit = &fit_all(&ds, &CoxOptions::default()).unwrap()[0];
    let small = sigma_hat(&ds, fit).unwrap();
    assert!(rel_frobenius(&small, &mc) < 0.10, "n=500: {small} vs {mc}");

    let sc = Scenario::default();
    let mc = monte_carlo_sigma(&sc, 2, 200, 10_000);
    let ds = generate_dataset(&sc, 10_000, 8).unwrap();
    let fit = &fit_all(&ds, &CoxOptions::default()).unwrap()[1];
    let large = sigma_hat(&ds, fit).unwrap();
    assert!(rel_frobenius(&large, &mc) < 0.10, "n=1e4: {large} vs {mc}");
}

#[test]
fn plug_in_ate_recovers_the_true_benefit() {
    let sc = Scenario::default();
    let grid = [0.0, 0.5, 1.0, 1.5];
    let truth = true_ate(&sc, &grid[1..]).unwrap().estimate;
    assert!(truth.iter().all(|&v| v < -0.1));
    let n = 2000;
    let ds = generate_dataset(&sc, n, 11).unwrap();
    let fits = fit_all(&ds, &CoxOptions::default()).unwrap();
    let ate = ate_estimate(&fits, &ds, &grid).unwrap().estimate;
    let xi = xi_matrix(&tilde_h_curves(&fits, &ds, &grid).unwrap()).unwrap();
    for g in 0..3 {
        let se = (xi[(g + 1, g + 1)] / n as f64).sqrt();
        assert!((ate[g + 1] - truth[g]).abs() < 4.0 * se, "t={}: {} vs {} (se {se})", grid[g + 1], ate[g + 1], truth[g]);
    }
}

fn plug_in_close_to_truth(n: usize, tol: f64) {
    let sc = Scenario::default();
    let grid = [0.0, 0.5, 1.0, 1.5];
    let truth = true_ate(&sc, &grid[1..]).unwrap().estimate;
    let ds = generate_dataset(&sc, n, 12).unwrap();
    let fits = fit_all(&ds, &CoxOptions::default()).unwrap();
    let ate = ate_estimate(&fits, &ds, &grid).unwrap().estimate;
    for g in 0..3 {
        assert!((ate[g + 1] - truth[g]).abs() < tol, "t={}: {} vs {}", grid[g + 1], ate[g + 1], truth[g]);
    }
}

#[test]
fn plug_in_is_close_to_truth_at_n20000() {
    plug_in_close_to_truth(20_000, 0.02);
}

#[test]
#[ignore = "several minutes on one core; run with --ignored"]
fn plug_in_is_close_to_truth_at_n100000() {
    plug_in_close_to_truth(100_000, 0.01);
}

#[test]
fn lemma2_oracle_tracks_xi_at_moderate_n() {
    let sc = Scenario::default();
    let grid = [0.0, 0.4, 0.8, 1.2, 1.6];
    for seed in 0..3 {
        let ds = generate_dataset(&sc, 300, 500 + seed).unwrap();
        let fits = fit_all(&ds, &CoxOptions::default()).unwrap();
        let th = tilde_h_curves(&fits, &ds, &grid).unwrap();
        let xi = xi_matrix(&th).unwrap();
        let oracle = lemma2_oracle(&th, &ds).unwrap();
        assert!((&oracle - &xi).abs().max() < 0.15 * xi.diagonal().max());
    }
}

#[test]
fn multiplier_paths_are_centred() {
    let ds = generate_dataset(&Scenario::default(), 300, 13).unwrap();
    let fits = fit_all(&ds, &CoxOptions::default()).unwrap();
    let grid = [0.0, 0.5, 1.0, 1.5];
    let th = tilde_h_curves(&fits, &ds, &grid).unwrap();
    let b = 4000;
    let ensembles = [
        wild_bootstrap(&fits, &ds, &grid, b, MultiplierKind::Normal, 1).unwrap(),
        wild_bootstrap(&fits, &ds, &grid, b, MultiplierKind::Poisson, 2).unwrap(),
        if_resample(&influence_curves(&th, &fits, &ds).unwrap(), b, 3).unwrap(),
    ];
    for ens in &ensembles {
        for g in 1..grid.len() {
            let (m, v) = mean_var(&ens.column(g));
            assert!(m.abs() <= 5.0 * v.sqrt() / (b as f64).sqrt(), "{} at {}: mean {m}", ens.method, grid[g]);
        }
    }
}

#[test]
fn wild_variance_tracks_xi_at_n400() {
    let ds = generate_dataset(&Scenario::default(), 400, 14).unwrap();
    let fits = fit_all(&ds, &CoxOptions::default()).unwrap();
    let grid = [0.0, 0.5, 1.0, 1.5];
    let xi = xi_matrix(&tilde_h_curves(&fits, &ds, &grid).unwrap()).unwrap();
    let ens = wild_bootstrap(&fits, &ds, &grid, 2000, MultiplierKind::Normal, 15).unwrap();
    for g in 1..grid.len() {
        let (_, v) = mean_var(&ens.column(g));
        assert!((v / xi[(g, g)] - 1.0).abs() < 0.15, "t={}: {v} vs {}", grid[g], xi[(g, g)]);
    }
}
