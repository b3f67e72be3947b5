//! Command-line surface: flag parsing, config resolution, the subcommand
//! runners and exit codes.

use crate::config::{write_atomic, write_csv, ModelSpec, RunConfig};
use crate::error::{Error, Result};
use crate::estimate::{example_experiment, ExperimentConfig};
use crate::funcalc::{BrownianAt, Coupled, Ctx, GridFunctional, LinearAndSquare};
use crate::ibp::weight_norm_scaling;
use crate::localize::LocalizerParams;
use crate::nondegen::{capital_lambda, tail_probability, CoefficientFamily, DerivativeOracle, DiffusionFamily, HeisenbergOracle};
use crate::sde::{heisenberg, scalar_linear, EulerMap, Shipped};
use crate::stats::McEstimate;
use crate::timegrid::{make_grid, NestedOpts, PathBatch, Window};
use crate::verify::*;
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

static QUIET: AtomicBool = AtomicBool::new(false);

/// Suppresses the per-row console echo; artifacts are unaffected.
pub fn set_quiet(quiet: bool) {
    QUIET.store(quiet, Ordering::Relaxed);
}

macro_rules! say {
    ($($t:tt)*) => {
        if !QUIET.load(Ordering::Relaxed) {
            println!($($t)*);
        }
    };
}

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "hormander", version, about = "Malliavin weights, non-degeneracy checks and lemma verification on a discretized Wiener space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Full lemma-verification suite.
    Verify,
    /// IBP and kernel densities of the localized diffusion law.
    Density,
    /// Λ gate, tail probabilities and approximation errors.
    Nondegen,
    /// Blow-up rate of the localized weight norms as δ shrinks.
    Weights,
    /// Laplace transform of the Brownian variance.
    Laplace,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Density => "density",
            Command::Nondegen => "nondegen",
            Command::Weights => "weights",
            Command::Laplace => "laplace",
        }
    }
}

fn parse_count(s: &str) -> std::result::Result<usize, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v < 1.0 || v.fract() != 0.0 || v > 1e15 {
        return Err(format!("'{s}' is not a positive integer"));
    }
    Ok(v as usize)
}

#[derive(clap::Args, Debug, Default, Clone)]
pub struct Flags {
    /// JSON config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Outer Monte Carlo paths (accepts 1e6).
    #[arg(long, global = true, value_parser = parse_count)]
    pub paths: Option<usize>,
    /// Inner resamplings per outer path.
    #[arg(long, global = true, value_parser = parse_count)]
    pub inner: Option<usize>,
    /// Grid cells on [0, T].
    #[arg(long, global = true, value_parser = parse_count)]
    pub m: Option<usize>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[arg(long = "delta-list", global = true, value_delimiter = ',')]
    pub delta_list: Option<Vec<f64>>,
    #[arg(long = "lambda-star", global = true)]
    pub lambda_star: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub radius: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub center: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Environment variable holding the worker count.
    #[arg(long = "threads-env", global = true, default_value = "HORMANDER_THREADS")]
    pub threads_env: String,
    /// λ values for the Laplace check.
    #[arg(long, global = true, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    /// heisenberg, scalar-linear, additive or degenerate.
    #[arg(long, global = true)]
    pub model: Option<String>,
}

/// Defaults, then the config file, then flags.
pub fn resolve(flags: &Flags) -> Result<RunConfig> {
    let mut c = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = flags.seed {
        c.seed = v;
    }
    if let Some(v) = flags.paths {
        c.paths = Some(v);
    }
    if let Some(v) = flags.inner {
        c.inner = v;
    }
    if let Some(v) = flags.m {
        c.m = Some(v);
    }
    if let Some(v) = flags.delta {
        c.delta = Some(v);
    }
    if let Some(v) = &flags.delta_list {
        c.deltas = Some(v.clone());
    }
    if let Some(v) = flags.lambda_star {
        c.lambda_star = v;
    }
    if let Some(v) = flags.gamma {
        c.gamma = v;
    }
    if let Some(v) = flags.radius {
        c.radius = v;
    }
    if let Some(v) = &flags.center {
        c.center = Some(v.clone());
    }
    if let Some(v) = &flags.out {
        c.out = v.clone();
    }
    if let Some(v) = &flags.lambda {
        c.lambdas = v.clone();
    }
    if let Some(v) = &flags.model {
        c.model = ModelSpec::from_name(v)?;
    }
    c.check()?;
    Ok(c)
}

/// Fills the per-subcommand defaults so that the manifest records every
/// value actually used.
pub fn finalize(mut c: RunConfig, cmd: Command) -> Result<RunConfig> {
    let n = c.model.build()?.n;
    let (m, paths, delta, deltas): (usize, usize, f64, Vec<f64>) = match cmd {
        Command::Laplace => (1024, 1_000_000, 1.0, vec![]),
        Command::Verify => (1024, 100_000, 1.0, vec![]),
        Command::Density => (64, 200_000, 0.125, vec![0.5, 0.25, 0.125]),
        Command::Nondegen => (64, 200_000, 0.125, vec![0.5, 0.25, 0.125]),
        Command::Weights => (160, 20_000, 0.2, vec![0.2, 0.1, 0.05, 0.025]),
    };
    c.m.get_or_insert(m);
    c.paths.get_or_insert(paths);
    c.delta.get_or_insert(delta);
    c.deltas.get_or_insert(deltas);
    c.center.get_or_insert(vec![0.0; n]);
    if c.center.as_ref().is_some_and(|y| y.len() != n) {
        return Err(Error::InvalidArgument(format!("center needs {n} entries")));
    }
    Ok(c)
}

#[derive(Serialize)]
struct CheckRow<'a> {
    check: &'a str,
    statement: &'a str,
    lhs: f64,
    lhs_se: f64,
    rhs: f64,
    rhs_se: f64,
    tolerance: f64,
    verdict: &'static str,
    seed: u64,
    config_hash: &'a str,
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::ReportedOnly => "reported-only",
    }
}

fn check_rows<'a>(reports: &'a [CheckReport], seed: u64, hash: &'a str) -> Vec<CheckRow<'a>> {
    reports
        .iter()
        .map(|r| CheckRow {
            check: &r.name,
            statement: &r.statement,
            lhs: r.lhs.mean,
            lhs_se: r.lhs.se,
            rhs: r.rhs.mean,
            rhs_se: r.rhs.se,
            tolerance: r.tolerance,
            verdict: verdict_name(r.verdict),
            seed,
            config_hash: hash,
        })
        .collect()
}

fn exact(x: f64) -> McEstimate {
    McEstimate::exact(x)
}

fn unit_family(_: &[f64], _: &Ctx, w: &Window) -> CoefficientFamily {
    CoefficientFamily::new(vec![vec![1.0]], vec![vec![vec![0.0]]], w.first_cell).expect("unit family")
}

/// The lemma-verification suite at the budget of `cfg.paths`.
pub fn verify_suite(cfg: &RunConfig) -> Result<Vec<CheckReport>> {
    let paths = cfg.paths.unwrap_or(100_000);
    let seed = cfg.seed;
    let outer = (paths / 100).max(200);
    let mut rows = Vec::new();

    let lap = laplace_check(&cfg.lambdas, paths, cfg.m.unwrap_or(1024), seed)?;
    rows.push(lap.variance);
    rows.extend(lap.rows);
    rows.extend(lap.exact);

    let variants = [EventVariant::Wide, EventVariant::Tight];
    for r in variance_lemma_check(&standard_scenarios(), &variants, 64, (paths / 10).max(1000), seed.wrapping_add(1))? {
        let tag = r.check.name.clone();
        rows.push(r.check);
        rows.push(CheckReport::identity(format!("{tag} split"), "pathwise mean/variance split of ∫(r+α+βb)²", exact(r.split_residual), exact(0.0), 1e-10));
        rows.push(CheckReport::identity(format!("{tag} scaling"), "pathwise V_μδ(b) = δV(B)", exact(r.scaling_residual), exact(0.0), 1e-10));
    }

    rows.push(CheckReport::identity("cnp C11", "C_{1,1} = 68", exact(cnp_constant(1, 1.0)?), exact(68.0), 1e-12));
    for n in 1..=3 {
        for p in [1.0, 1.5, 2.0, 2.5, 3.0] {
            let c = cnp_constant(n, p)?;
            rows.push(CheckReport::identity(format!("cnp n={n} p={p}"), "closed form = radial quadrature", exact(c), exact(cnp_quadrature(n, p)?), 1e-9 * c));
        }
    }

    let g80 = make_grid(1.0, 80)?;
    let zb = PathBatch::new(g80, 1, outer, seed.wrapping_add(2))?;
    let opts = NestedOpts::antithetic(cfg.inner);
    rows.extend(determinant_lemma_check(&BrownianAt { node: 80, driver: 0 }, &unit_family, 0.5, 1.0, &[0.1, 0.05], 1.0, &zb, opts)?);
    let hz = heisenberg();
    let hf = EulerMap { model: hz.clone(), end: 80 };
    let hfam = DiffusionFamily { model: hz.clone() };
    let hb = PathBatch::new(g80, 2, outer, seed.wrapping_add(3))?;
    rows.extend(determinant_lemma_check(&hf, &hfam, cfg.lambda_star, 1.0, &[0.05, 0.025], 1.0, &hb, opts)?.into_iter().map(|mut r| {
        r.name = format!("heisenberg {}", r.name);
        r
    }));

    let g64 = make_grid(1.0, 64)?;
    let sl = scalar_linear(1.0, 1.0);
    let sb = PathBatch::new(g64, 1, (paths / 10).max(1000), seed.wrapping_add(4))?;
    let tail = gdelta_tail(&EulerMap { model: sl.clone(), end: 64 }, &DiffusionFamily { model: sl }, 1.0, &[0.5, 0.25, 0.125, 0.0625], &sb)?;
    for r in &tail.rows {
        let p = McEstimate { mean: r.prob.estimate, se: 0.0, level: 0.95, count: r.prob.count, seed: sb.seed };
        rows.push(CheckReport::reported(format!("gdelta-tail δ={}", r.delta), "P(G_δ ≥ δ²), scalar linear model", p, exact(r.prob.hi)));
    }
    rows.push(CheckReport::reported("gdelta-tail slope", "fitted d ln P / d ln δ", exact(tail.rate.unwrap_or(f64::NAN)), exact(0.0)));

    let tb = PathBatch::new(g64, 2, (paths / 10).max(1000), seed.wrapping_add(5))?;
    let hf64 = EulerMap { model: hz.clone(), end: 64 };
    let base = LocalizerParams { y: cfg.center.clone().unwrap_or(vec![0.0; 3]), r: cfg.radius, delta: 1.0, lambda_star: cfg.lambda_star, gamma: cfg.gamma };
    let tv = tv_decomposition(&hf64, &hfam, &base, 1.0, &[0.125, 0.0625, 0.03125], &tb)?;
    rows.push(tv_trend(&tv));
    rows.extend(tv.into_iter().map(|r| r.check));

    for (n, eps, theta, want) in [(1, 1.0, 6.0, 18.0 / 17.0), (2, 10.0, 10.0, 24.0 / 23.0)] {
        let a = criterion_arithmetic(n, 0, eps, Some(theta))?;
        rows.push(CheckReport::identity(format!("p-range n={n} ε={eps} θ={theta}"), "upper end of admissible p", exact(a.p_max), exact(want), 1e-12));
    }

    let lb = PathBatch::new(make_grid(1.0, 4)?, 1, (paths / 100).max(100), seed.wrapping_add(6))?;
    let cb = PathBatch::new(make_grid(1.0, 3)?, 2, (paths / 100).max(100), seed.wrapping_add(7))?;
    let cases: [(&dyn GridFunctional, &PathBatch); 2] = [(&LinearAndSquare { node: 4 }, &lb), (&Coupled { node: 3 }, &cb)];
    for (f, b) in cases {
        let r = leibniz_identity_check(f, b)?;
        let tag = f.name();
        for mut c in [r.identity, r.inner_product_bound].into_iter().chain(r.empirical) {
            c.name = format!("{} [{tag}]", c.name);
            rows.push(c);
        }
    }
    Ok(rows)
}

fn oracle_for(spec: &ModelSpec) -> Option<&'static dyn DerivativeOracle> {
    matches!(spec, ModelSpec::Heisenberg).then_some(&HeisenbergOracle as &dyn DerivativeOracle)
}

fn unobserved_box(model: &crate::sde::DiffusionModel<Shipped>) -> (Vec<f64>, Vec<f64>) {
    let k = model.state_dim() - model.n;
    (vec![-1.0; k], vec![1.0; k])
}

struct Outcome {
    code: i32,
    artifacts: Vec<String>,
    summary: serde_json::Value,
}

fn run_laplace(c: &RunConfig, hash: &str) -> Result<Outcome> {
    let run = laplace_check(&c.lambdas, c.paths.unwrap(), c.m.unwrap(), c.seed)?;
    let mut reports = vec![run.variance];
    reports.extend(run.rows);
    reports.extend(run.exact);
    finish_checks(c, hash, "laplace", &reports)
}

fn run_verify(c: &RunConfig, hash: &str) -> Result<Outcome> {
    let reports = verify_suite(c)?;
    finish_checks(c, hash, "verify", &reports)
}

fn finish_checks(c: &RunConfig, hash: &str, name: &str, reports: &[CheckReport]) -> Result<Outcome> {
    let file = format!("{name}.csv");
    write_csv(&c.out.join(&file), &check_rows(reports, c.seed, hash))?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.ok()).map(|r| r.name.as_str()).collect();
    for r in reports {
        say!("{:<14} {:<48} lhs={:<14.6e} rhs={:.6e}", verdict_name(r.verdict), r.name, r.lhs.mean, r.rhs.mean);
    }
    Ok(Outcome {
        code: if failed.is_empty() { EXIT_PASS } else { EXIT_CHECK_FAILED },
        artifacts: vec![file],
        summary: json!({ "checks": reports.len(), "failed": failed }),
    })
}

fn run_density(c: &RunConfig, hash: &str) -> Result<Outcome> {
    let model = c.model.build()?;
    let (box_lo, box_hi) = unobserved_box(&model);
    let ec = ExperimentConfig {
        horizon: c.horizon,
        m: c.m.unwrap(),
        y: c.center.clone().unwrap(),
        radius: c.radius,
        lambda_star: c.lambda_star,
        gamma: c.gamma,
        deltas: c.deltas.clone().unwrap(),
        density_delta: c.delta.unwrap(),
        n_paths: c.paths.unwrap(),
        tail_paths: c.paths.unwrap(),
        n_inner: c.inner,
        box_lo,
        box_hi,
        seed: c.seed,
        ..Default::default()
    };
    let r = example_experiment(&model, &ec, oracle_for(&c.model))?;
    #[derive(Serialize)]
    struct Row<'a> {
        x: String,
        ibp: f64,
        ibp_se: f64,
        kde: f64,
        kde_se: f64,
        bandwidth: f64,
        seed: u64,
        config_hash: &'a str,
    }
    let d = &r.density;
    let rows: Vec<Row> = d
        .points
        .iter()
        .enumerate()
        .map(|(i, x)| Row {
            x: x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
            ibp: d.ibp.as_ref().map_or(f64::NAN, |v| v[i].mean),
            ibp_se: d.ibp.as_ref().map_or(f64::NAN, |v| v[i].se),
            kde: d.kde[i].mean,
            kde_se: d.kde[i].se,
            bandwidth: d.bandwidth[0],
            seed: c.seed,
            config_hash: hash,
        })
        .collect();
    write_csv(&c.out.join("density.csv"), &rows)?;
    for row in &rows {
        say!("x={:<8} ibp={:.5}±{:.5} kde={:.5}±{:.5}", row.x, row.ibp, row.ibp_se, row.kde, row.kde_se);
    }
    say!("Λ(ȳ)={} sup discrepancy {:.4} agreement {}", r.gate.value, r.sup_discrepancy, r.agreement);
    Ok(Outcome {
        code: if r.agreement { EXIT_PASS } else { EXIT_CHECK_FAILED },
        artifacts: vec!["density.csv".into()],
        summary: json!({
            "capital_lambda": r.gate.value,
            "tail_inverse_slope": r.tails.inverse_slope,
            "epsilon": r.epsilon.iter().map(|e| json!({"delta": e.delta, "eps": e.eps.mean, "se": e.eps.se})).collect::<Vec<_>>(),
            "eps_max_ratio": r.eps_max_ratio,
            "mass": r.density.mass.mean,
            "sup_discrepancy": r.sup_discrepancy,
            "agreement": r.agreement,
            "warnings": r.density.warnings,
        }),
    })
}

fn run_nondegen(c: &RunConfig, hash: &str) -> Result<Outcome> {
    let model = c.model.build()?;
    let y = c.center.clone().unwrap();
    let (lo, hi) = unobserved_box(&model);
    let gate = capital_lambda(&model, &y, &lo, &hi, 400, c.seed)?;
    say!("Λ(ȳ) = {} at x̂ = {:?}", gate.value, gate.xhat);
    if !(gate.value > 0.0) {
        return Err(Error::GateFailed(format!("Λ(ȳ) = {} is not positive", gate.value)));
    }
    let m = c.m.unwrap();
    let grid = make_grid(c.horizon, m)?;
    let f = EulerMap { model: model.clone(), end: m };
    let fam = DiffusionFamily { model: model.clone() };
    let batch = PathBatch::new(grid, model.drivers(), c.paths.unwrap(), c.seed)?;
    let deltas = c.deltas.clone().unwrap();
    let tails = tail_probability(&f, &fam, &y, c.radius, c.lambda_star, c.horizon, &deltas, &batch)?;
    #[derive(Serialize)]
    struct Row<'a> {
        delta: f64,
        estimate: f64,
        ci_low: f64,
        ci_high: f64,
        hits: usize,
        count: usize,
        seed: u64,
        config_hash: &'a str,
    }
    let rows: Vec<Row> = tails
        .rows
        .iter()
        .map(|r| Row { delta: r.delta, estimate: r.prob.estimate, ci_low: r.prob.lo, ci_high: r.prob.hi, hits: r.prob.hits, count: r.prob.count, seed: c.seed, config_hash: hash })
        .collect();
    write_csv(&c.out.join("nondegen.csv"), &rows)?;
    for r in &rows {
        say!("δ={:<8} P={:.6} [{:.6}, {:.6}]", r.delta, r.estimate, r.ci_low, r.ci_high);
    }
    Ok(Outcome {
        code: EXIT_PASS,
        artifacts: vec!["nondegen.csv".into()],
        summary: json!({ "capital_lambda": gate.value, "xhat": gate.xhat, "loglog_slope": tails.loglog_slope, "inverse_slope": tails.inverse_slope }),
    })
}

fn run_weights(c: &RunConfig, hash: &str) -> Result<Outcome> {
    let model = c.model.build()?;
    let m = c.m.unwrap();
    let grid = make_grid(c.horizon, m)?;
    let f = EulerMap { model: model.clone(), end: m };
    let fam = DiffusionFamily { model: model.clone() };
    let batch = PathBatch::new(grid, model.drivers(), c.paths.unwrap(), c.seed)?;
    let base = LocalizerParams { y: c.center.clone().unwrap(), r: c.radius, delta: 1.0, lambda_star: c.lambda_star, gamma: c.gamma };
    let s = weight_norm_scaling(&f, &fam, &base, c.horizon, c.deltas.as_ref().unwrap(), &[0], 2.0, &batch)?;
    #[derive(Serialize)]
    struct Row<'a> {
        delta: f64,
        norm: f64,
        se: f64,
        support: f64,
        seed: u64,
        config_hash: &'a str,
    }
    let rows: Vec<Row> = s.rows.iter().map(|r| Row { delta: r.delta, norm: r.norm.mean, se: r.norm.se, support: r.support, seed: c.seed, config_hash: hash }).collect();
    write_csv(&c.out.join("weights.csv"), &rows)?;
    for r in &rows {
        say!("δ={:<8} ‖H‖={:.5}±{:.5} support={:.4}", r.delta, r.norm, r.se, r.support);
    }
    say!("slope {:?} (bound {})", s.slope, s.bound_slope);
    let ok = s.slope.is_some_and(|v| v >= s.bound_slope - 1.0);
    Ok(Outcome {
        code: if ok { EXIT_PASS } else { EXIT_CHECK_FAILED },
        artifacts: vec!["weights.csv".into()],
        summary: json!({ "slope": s.slope, "bound_slope": s.bound_slope, "skipped": s.skipped }),
    })
}

/// Runs one subcommand on a resolved config and writes its artifacts and
/// manifest. Returns the exit code.
pub fn run(cmd: Command, cfg: RunConfig) -> i32 {
    let started = Instant::now();
    let cfg = match finalize(cfg, cmd) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let hash = cfg.hash();
    let result = match cmd {
        Command::Laplace => run_laplace(&cfg, &hash),
        Command::Verify => run_verify(&cfg, &hash),
        Command::Density => run_density(&cfg, &hash),
        Command::Nondegen => run_nondegen(&cfg, &hash),
        Command::Weights => run_weights(&cfg, &hash),
    };
    let (code, artifacts, summary, error) = match result {
        Ok(o) => (o.code, o.artifacts, o.summary, None),
        Err(e) => {
            eprintln!("error: {e}");
            (exit_code(&e), vec![], json!(null), Some(e.to_string()))
        }
    };
    let manifest = json!({
        "subcommand": cmd.name(),
        "config": cfg,
        "config_hash": hash,
        "seed": cfg.seed,
        "artifacts": artifacts,
        "summary": summary,
        "error": error,
        "exit_code": code,
        "elapsed_ms": started.elapsed().as_millis() as u64,
    });
    let path = cfg.out.join(format!("{}_manifest.json", cmd.name()));
    if let Err(e) = write_atomic(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes()) {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    code
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::UnsupportedOrder { .. } | Error::Io(_) => EXIT_USAGE,
        Error::NumericalBlowup { .. } | Error::DegenerateCovariance { .. } | Error::GateFailed(_) | Error::EmptySupport | Error::LogUndefined(_) => EXIT_DEGENERATE,
        Error::Infeasible(_) => EXIT_CHECK_FAILED,
    }
}

fn configure_threads(var: &str) -> Result<()> {
    if let Ok(v) = std::env::var(var) {
        let n: usize = v.parse().map_err(|_| Error::InvalidArgument(format!("{var} = '{v}' is not a worker count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

/// Entry point of the binary.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
        }
    };
    let cfg = match configure_threads(&cli.flags.threads_env).and_then(|_| resolve(&cli.flags)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    run(cli.command, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(args: &[&str]) -> Flags {
        Cli::try_parse_from(std::iter::once("hormander").chain(args.iter().copied())).unwrap().flags
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"seed": 5, "radius": 0.7, "paths": 100}"#).unwrap();
        let c = resolve(&flags(&["laplace", "--config", file.to_str().unwrap(), "--seed", "9", "--paths", "1e3"])).unwrap();
        assert_eq!((c.seed, c.radius, c.paths), (9, 0.7, Some(1000)));
        assert_eq!(c.gamma, RunConfig::default().gamma);
        let c = resolve(&flags(&["verify", "--delta-list", "0.1,0.05", "--center=-1,2,0", "--lambda", "1"])).unwrap();
        assert_eq!(c.deltas, Some(vec![0.1, 0.05]));
        assert_eq!(c.center, Some(vec![-1.0, 2.0, 0.0]));
        assert_eq!(c.lambdas, vec![1.0]);
    }

    #[test]
    fn usage_errors() {
        assert!(Cli::try_parse_from(["hormander", "bogus"]).is_err());
        assert!(Cli::try_parse_from(["hormander", "laplace", "--paths", "0.5"]).is_err());
        assert_eq!(main_with(["hormander", "bogus"]), EXIT_USAGE);
        assert_eq!(main_with(["hormander", "laplace", "--gamma", "0.7"]), EXIT_USAGE);
    }

    #[test]
    fn laplace_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let code = main_with(["hormander", "laplace", "--paths", "2000", "--m", "64", "--lambda", "1", "--out", out]);
        // 2λ/sinh 2λ misses the Brownian variance law by ~0.3 at λ = 1
        assert_eq!(code, EXIT_CHECK_FAILED);
        let csv = std::fs::read_to_string(dir.path().join("laplace.csv")).unwrap();
        assert!(csv.starts_with("check,statement,lhs"));
        assert!(csv.contains("laplace λ=1"));
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("laplace_manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["config"]["m"], 64);
        assert_eq!(manifest["exit_code"], 1);
    }

    #[test]
    fn degenerate_model_exits_with_degeneracy() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(main_with(["hormander", "nondegen", "--model", "degenerate", "--paths", "100", "--out", out]), EXIT_DEGENERATE);
    }
}
