use crate::output::{RunConfig, Usage, Writer};
use crate::{BandArgs, CoverageArgs, DataArgs, FitArgs, SimulateArgs};
use anyhow::{bail, Context, Result};
use crisk_core::asymptotics::{tilde_h_curves, xi_matrix};
use crisk_core::coxfit::{fit_all, CoxFit, CoxOptions};
use crisk_core::gformula::{ate_estimate, check_grid, default_grid, AteCurve};
use crisk_core::resampling::{check_band_request, pointwise_ci, resample, simultaneous_band};
use crisk_core::simulate::{coverage_experiment, generate_dataset, true_ate, CoverageConfig, Scenario};
use crisk_core::{parse_dataset_with, DataOptions, Dataset};

#[derive(Debug, Clone, PartialEq)]
enum GridSpec {
    Default,
    Uniform(usize),
    List(Vec<f64>),
}

fn parse_grid(spec: &str) -> Result<GridSpec> {
    let spec = spec.trim();
    if spec == "default" {
        return Ok(GridSpec::Default);
    }
    if let Some(m) = spec.strip_prefix("uniform:") {
        let m: usize = m.parse().map_err(|_| Usage(format!("bad grid size in `{spec}`")))?;
        if m < 2 {
            bail!(Usage("a uniform grid needs at least 2 points".into()));
        }
        return Ok(GridSpec::Uniform(m));
    }
    let times = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|_| Usage(format!("grid must be `default`, `uniform:M` or a list of times, got `{spec}`")))?;
    Ok(GridSpec::List(times))
}

fn resolve_grid(spec: &GridSpec, ds: Option<&Dataset>, tau: f64) -> Result<Vec<f64>> {
    let grid = match spec {
        GridSpec::Default => match ds {
            Some(ds) => default_grid(ds),
            None => bail!(Usage("the default grid needs data; use `uniform:M` or a list".into())),
        },
        GridSpec::Uniform(m) => (0..*m).map(|i| tau * i as f64 / (*m - 1) as f64).collect(),
        GridSpec::List(times) => times.clone(),
    };
    check_grid(&grid, tau)?;
    Ok(grid)
}

fn load(args: &DataArgs) -> Result<Dataset> {
    if args.causes == 0 {
        bail!(Usage("--causes must be at least 1".into()));
    }
    let text = std::fs::read_to_string(&args.input).with_context(|| format!("cannot read {}", args.input.display()))?;
    let options = DataOptions { tau: args.tau, jitter_seed: args.jitter_seed, ..DataOptions::default() };
    let ds = parse_dataset_with(&text, args.causes, options).with_context(|| format!("invalid input {}", args.input.display()))?;
    for w in ds.validate().warnings {
        log::warn!("{w}");
    }
    Ok(ds)
}

fn data_config(subcommand: &str, args: &DataArgs) -> RunConfig {
    RunConfig {
        subcommand: subcommand.into(),
        input: Some(args.input.clone()),
        output: args.out.clone(),
        causes: Some(args.causes),
        grid: Some(args.grid.clone()),
        tau: args.tau,
        jitter_seed: args.jitter_seed,
        ..RunConfig::default()
    }
}

fn fit_and_estimate(ds: &Dataset, grid: &[f64]) -> Result<(Vec<CoxFit>, AteCurve)> {
    let fits = fit_all(ds, &CoxOptions::default()).context("Cox fit failed")?;
    for f in &fits {
        log::info!("cause {}: beta = {:?} after {} iterations", f.cause, f.beta, f.iterations);
    }
    let ate = ate_estimate(&fits, ds, grid)?;
    Ok((fits, ate))
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let spec = parse_grid(&args.data.grid)?;
    let config = data_config("fit", &args.data);
    let ds = load(&args.data)?;
    let grid = resolve_grid(&spec, Some(&ds), ds.tau())?;
    let (fits, ate) = fit_and_estimate(&ds, &grid)?;
    let mut out = Writer::new(&args.data.out, config)?;
    for f in &fits {
        let body: serde_json::Value = serde_json::from_str(&f.to_json()?)?;
        out.json(&format!("cox_cause{}.json", f.cause), &body)?;
    }
    out.csv("ate.csv", &ate.to_csv())?;
    out.finish()
}

pub fn cmd_band(args: &BandArgs) -> Result<()> {
    let spec = parse_grid(&args.data.grid)?;
    check_band_request(args.b, args.level)?;
    let config = RunConfig {
        method: Some(args.method),
        multiplier: Some(args.multiplier),
        replicates: Some(args.b),
        level: Some(args.level),
        seed: Some(args.seed),
        stabilize: Some(args.stabilize),
        ..data_config("band", &args.data)
    };
    let ds = load(&args.data)?;
    let grid = resolve_grid(&spec, Some(&ds), ds.tau())?;
    let (fits, ate) = fit_and_estimate(&ds, &grid)?;
    log::info!("drawing {} {} replicates", args.b, args.method);
    let ens = resample(args.method, args.multiplier, &fits, &ds, &grid, args.b, args.seed, &CoxOptions::default())?;
    let variance = if args.stabilize {
        let xi = xi_matrix(&tilde_h_curves(&fits, &ds, &grid)?)?;
        Some(xi.diagonal().iter().copied().collect::<Vec<f64>>())
    } else {
        None
    };
    let band = simultaneous_band(&ate, &ens, args.level, variance.as_deref())?;
    let pointwise = pointwise_ci(&ate, &ens, args.level)?;
    let mut out = Writer::new(&args.data.out, config)?;
    out.csv("ate.csv", &ate.to_csv())?;
    out.json("band.json", &band)?;
    out.json("pointwise.json", &pointwise)?;
    out.csv("ensemble.csv", &ens.to_csv())?;
    out.json("ensemble.json", &ens.meta())?;
    out.finish()
}

fn load_scenario(path: &std::path::Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read scenario {}", path.display()))?;
    Scenario::from_json(&text).with_context(|| format!("bad scenario {}", path.display()))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let spec = parse_grid(&args.grid)?;
    let config = RunConfig {
        subcommand: "simulate".into(),
        output: args.out.clone(),
        scenario: Some(args.scenario.clone()),
        n: Some(args.n),
        seed: Some(args.seed),
        grid: Some(args.grid.clone()),
        ..RunConfig::default()
    };
    let sc = load_scenario(&args.scenario)?;
    if args.n < 2 {
        bail!(Usage("--n must be at least 2".into()));
    }
    let grid = resolve_grid(&spec, None, sc.tau)?;
    let ds = generate_dataset(&sc, args.n, args.seed)?;
    let truth = true_ate(&sc, &grid)?;
    let mut out = Writer::new(&args.out, config)?;
    out.csv("data.csv", &ds.to_csv())?;
    out.csv("truth.csv", &truth.to_csv())?;
    out.finish()
}

pub fn cmd_coverage(args: &CoverageArgs) -> Result<()> {
    check_band_request(args.b, args.level)?;
    let run_config = RunConfig {
        subcommand: "coverage".into(),
        output: args.out.clone(),
        method: Some(args.method),
        multiplier: Some(args.multiplier),
        replicates: Some(args.b),
        level: Some(args.level),
        seed: Some(args.seed),
        stabilize: Some(args.stabilize),
        scenario: Some(args.scenario.clone()),
        n: Some(args.n),
        reps: Some(args.reps),
        truth: Some(args.truth.into()),
        ..RunConfig::default()
    };
    let sc = load_scenario(&args.scenario)?;
    let config = CoverageConfig {
        n: args.n,
        reps: args.reps,
        replicates: args.b,
        method: args.method,
        multiplier: args.multiplier,
        level: args.level,
        seed: args.seed,
        stabilize: args.stabilize,
        truth: args.truth.into(),
        check_times: None,
    };
    log::info!("running {} coverage reps with n = {}", args.reps, args.n);
    let report = coverage_experiment(&sc, &config)?;
    eprint!("{report}");
    let mut out = Writer::new(&args.out, run_config)?;
    out.json("coverage.json", &report)?;
    out.finish()
}
