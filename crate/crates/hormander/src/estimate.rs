//! Density estimation for the localized law `P_U ∘ F⁻¹`: the
//! integration-by-parts estimator, a weighted kernel baseline, and the
//! end-to-end experiment on a diffusion.

use crate::error::{invalid, Error, Result};
use crate::funcalc::{Ctx, GridFunctional};
use crate::ibp::{weights_at, DeltaLocalization};
use crate::localize::{Localization, LocalizerParams};
use crate::nondegen::{capital_lambda, epsilon_alpha, require_positive, CapitalLambda, DerivativeOracle, DiffusionFamily, EpsMode, TailReport};
use crate::sde::{DiffusionModel, EulerMap, VectorFields};
use crate::stats::{estimate_of, par_map, McEstimate};
use crate::timegrid::{make_grid, NestedOpts, PathBatch, Window};
use serde::{Deserialize, Serialize};

/// Per-path ingredients shared by both estimators.
struct Sample {
    u: f64,
    x: Vec<f64>,
    h: f64,
}

/// `p̂(x) = E(U ∏_{c} 1{F^c > x^c} H_{coords,U}(F,1))` and its kernel
/// counterpart, on the same paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGridReport {
    /// Components of `F` whose (marginal) density is estimated.
    pub coords: Vec<usize>,
    pub points: Vec<Vec<f64>>,
    /// `None` when the weights would need more derivatives than available.
    pub ibp: Option<Vec<McEstimate>>,
    pub kde: Vec<McEstimate>,
    /// Per-coordinate bandwidth of the product Gaussian kernel.
    pub bandwidth: Vec<f64>,
    /// `|ibp − kde| / kde` per point (`NaN` without IBP).
    pub discrepancy: Vec<f64>,
    /// `E U`, the total mass of the localized law.
    pub mass: McEstimate,
    pub warnings: Vec<String>,
}

impl DensityGridReport {
    /// Largest relative discrepancy, and whether every point satisfies
    /// `|ibp − kde| ≤ rel·kde + 3·SE`.
    pub fn agreement(&self, rel: f64) -> (f64, bool) {
        let Some(ibp) = &self.ibp else { return (f64::NAN, false) };
        let mut ok = true;
        for (a, b) in ibp.iter().zip(&self.kde) {
            let se = (a.se * a.se + b.se * b.se).sqrt();
            ok &= (a.mean - b.mean).abs() <= rel * b.mean.abs() + 3.0 * se;
        }
        (self.discrepancy.iter().copied().fold(0.0, f64::max), ok)
    }
}

fn check_coords(f: &dyn GridFunctional, coords: &[usize], points: &[Vec<f64>]) -> Result<()> {
    if coords.is_empty() || coords.iter().any(|&c| c >= f.dim()) {
        return invalid("coordinates must be non-empty and within the dimension of F");
    }
    let mut sorted = coords.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != coords.len() {
        return invalid("repeated coordinate");
    }
    if points.iter().any(|x| x.len() != coords.len()) {
        return invalid("every point needs one entry per coordinate");
    }
    Ok(())
}

fn collect(f: &dyn GridFunctional, loc: &dyn Localization, coords: &[usize], w: &Window, batch: &PathBatch, with_weights: bool) -> Result<Vec<Sample>> {
    batch.check_window(w)?;
    let ctx = Ctx::of(batch);
    let depth = coords.len();
    par_map(batch.n_paths, |p| {
        let dw = batch.path(p);
        if with_weights {
            Ok(match weights_at(f, None, loc, w, &ctx, &dw, depth, p)? {
                None => Sample { u: 0.0, x: vec![0.0; depth], h: 0.0 },
                Some(pw) => {
                    let h = if depth == 1 { pw.first[coords[0]] } else { pw.second[coords[0]][coords[1]] };
                    Sample { u: pw.u, x: coords.iter().map(|&c| pw.f[c]).collect(), h }
                }
            })
        } else {
            let u = loc.u(&dw, &ctx);
            let fv = f.eval(&dw, &ctx);
            Ok(Sample { u, x: coords.iter().map(|&c| fv[c]).collect(), h: 0.0 })
        }
    })
    .into_iter()
    .collect()
}

fn ibp_values(samples: &[Sample], points: &[Vec<f64>], seed: u64) -> Vec<McEstimate> {
    points
        .iter()
        .map(|x| {
            let v: Vec<f64> = samples
                .iter()
                .map(|s| if s.u > 0.0 && s.x.iter().zip(x).all(|(f, x)| f > x) { s.u * s.h } else { 0.0 })
                .collect();
            estimate_of(&v, seed)
        })
        .collect()
}

/// `(4/(k+2))^{1/(k+4)}·std·N^{−1/(k+4)}` per coordinate, with `U`-weighted
/// standard deviations and the effective count `(ΣU)²/ΣU²`.
pub fn bandwidth(samples_x: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    let k = samples_x.first().map_or(0, Vec::len);
    let su: f64 = u.iter().sum();
    let su2: f64 = u.iter().map(|x| x * x).sum();
    if su <= 0.0 {
        return vec![f64::NAN; k];
    }
    let n_eff = su * su / su2;
    let kf = k as f64;
    let factor = (4.0 / (kf + 2.0)).powf(1.0 / (kf + 4.0)) * n_eff.powf(-1.0 / (kf + 4.0));
    (0..k)
        .map(|c| {
            let mean = samples_x.iter().zip(u).map(|(x, w)| w * x[c]).sum::<f64>() / su;
            let var = samples_x.iter().zip(u).map(|(x, w)| w * (x[c] - mean).powi(2)).sum::<f64>() / su;
            factor * var.sqrt()
        })
        .collect()
}

fn kde_values(samples: &[Sample], points: &[Vec<f64>], bw: &[f64], seed: u64) -> Vec<McEstimate> {
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    points
        .iter()
        .map(|x| {
            let v: Vec<f64> = samples
                .iter()
                .map(|s| {
                    if s.u == 0.0 {
                        return 0.0;
                    }
                    s.x.iter().zip(x).zip(bw).fold(s.u, |acc, ((f, x), b)| {
                        let z = (f - x) / b;
                        acc * (-0.5 * z * z).exp() / (norm * b)
                    })
                })
                .collect();
            estimate_of(&v, seed)
        })
        .collect()
}

/// Integration-by-parts density of `(F^c)_{c ∈ coords}` under `P_U`, with
/// weights built on the window `w`. At most two coordinates.
pub fn density_ibp(
    f: &dyn GridFunctional,
    loc: &dyn Localization,
    coords: &[usize],
    points: &[Vec<f64>],
    w: &Window,
    batch: &PathBatch,
) -> Result<Vec<McEstimate>> {
    check_coords(f, coords, points)?;
    if coords.len() > 2 {
        return Err(Error::UnsupportedOrder { requested: coords.len() + 1, declared: 3 });
    }
    let samples = collect(f, loc, coords, w, batch, true)?;
    Ok(ibp_values(&samples, points, batch.seed))
}

/// `U`-weighted Gaussian kernel density; returns estimates and bandwidths.
pub fn density_kde(
    f: &dyn GridFunctional,
    loc: &dyn Localization,
    coords: &[usize],
    points: &[Vec<f64>],
    batch: &PathBatch,
) -> Result<(Vec<McEstimate>, Vec<f64>)> {
    check_coords(f, coords, points)?;
    let w = Window::new(&batch.grid, batch.grid.horizon, batch.grid.horizon)?;
    let samples = collect(f, loc, coords, &w, batch, false)?;
    Ok(kde_from(&samples, points, batch.seed))
}

fn kde_from(samples: &[Sample], points: &[Vec<f64>], seed: u64) -> (Vec<McEstimate>, Vec<f64>) {
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let us: Vec<f64> = samples.iter().map(|s| s.u).collect();
    if us.iter().all(|&u| u == 0.0) {
        let zero = McEstimate { mean: 0.0, se: 0.0, level: 0.95, count: samples.len(), seed };
        return (vec![zero; points.len()], vec![f64::NAN; points.first().map_or(0, Vec::len)]);
    }
    let bw = bandwidth(&xs, &us);
    (kde_values(samples, points, &bw, seed), bw)
}

/// Both estimators from one pass over the paths. Three or more coordinates
/// fall back to the kernel estimate alone.
pub fn density_grid(
    f: &dyn GridFunctional,
    loc: &dyn Localization,
    coords: &[usize],
    points: &[Vec<f64>],
    w: &Window,
    batch: &PathBatch,
) -> Result<DensityGridReport> {
    check_coords(f, coords, points)?;
    let mut warnings = Vec::new();
    let with_weights = coords.len() <= 2;
    if !with_weights {
        warnings.push(format!("{} coordinates need weights of depth {}; kernel estimate only", coords.len(), coords.len()));
    }
    let samples = collect(f, loc, coords, w, batch, with_weights)?;
    let ibp = with_weights.then(|| ibp_values(&samples, points, batch.seed));
    let (kde, bw) = kde_from(&samples, points, batch.seed);
    let discrepancy = match &ibp {
        Some(i) => i.iter().zip(&kde).map(|(a, b)| (a.mean - b.mean).abs() / b.mean.abs()).collect(),
        None => vec![f64::NAN; points.len()],
    };
    let us: Vec<f64> = samples.iter().map(|s| s.u).collect();
    Ok(DensityGridReport {
        coords: coords.to_vec(),
        points: points.to_vec(),
        ibp,
        kde,
        bandwidth: bw,
        discrepancy,
        mass: estimate_of(&us, batch.seed),
        warnings,
    })
}

/// Grid of `per_axis^k` points in the cube of half-side `frac·radius` about
/// `center` (restricted to the ball of that radius).
pub fn ball_grid(center: &[f64], radius: f64, per_axis: usize, frac: f64) -> Vec<Vec<f64>> {
    let k = center.len();
    let reach = frac * radius;
    let ticks: Vec<f64> = if per_axis == 1 { vec![0.0] } else { (0..per_axis).map(|i| -reach + 2.0 * reach * i as f64 / (per_axis - 1) as f64).collect() };
    let mut out = vec![vec![]];
    for _ in 0..k {
        out = out.into_iter().flat_map(|p: Vec<f64>| ticks.iter().map(move |t| [p.clone(), vec![*t]].concat())).collect();
    }
    out.into_iter()
        .filter(|p| p.iter().map(|x| x * x).sum::<f64>() <= reach * reach * (1.0 + 1e-12))
        .map(|p| p.iter().zip(center).map(|(a, c)| a + c).collect())
        .collect()
}

/// Settings of [`example_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub horizon: f64,
    pub m: usize,
    pub y: Vec<f64>,
    pub radius: f64,
    pub lambda_star: f64,
    pub gamma: f64,
    /// Windows for the tail and `ε` tables.
    pub deltas: Vec<f64>,
    /// Window of the density comparison.
    pub density_delta: f64,
    /// Components of `X̄_T` whose density is compared.
    pub coords: Vec<usize>,
    pub points_per_axis: usize,
    pub n_paths: usize,
    pub tail_paths: usize,
    pub eps_paths: usize,
    pub n_inner: usize,
    pub alpha: f64,
    pub eps_p: u32,
    /// Box for the unobserved coordinates in `Λ(ȳ)`.
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub budget: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            m: 64,
            y: vec![0.0; 3],
            radius: 1.0,
            lambda_star: 0.5,
            gamma: 0.45,
            deltas: vec![0.5, 0.25, 0.125],
            density_delta: 0.125,
            coords: vec![0],
            points_per_axis: 5,
            n_paths: 200_000,
            tail_paths: 200_000,
            eps_paths: 2_000,
            n_inner: 16,
            alpha: 0.5,
            eps_p: 1,
            box_lo: vec![],
            box_hi: vec![],
            budget: 400,
            seed: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsRow {
    pub delta: f64,
    pub eps: McEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub gate: CapitalLambda,
    pub tails: TailReport,
    pub epsilon: Vec<EpsRow>,
    /// Largest `ε(δ/2)/ε(δ)` along the δ-list.
    pub eps_max_ratio: f64,
    pub density: DensityGridReport,
    pub sup_discrepancy: f64,
    /// Every interior point within 5 % + 3 SE.
    pub agreement: bool,
}

/// The diffusion experiment: `Λ(ȳ) > 0` gate, tail table, `ε` table, then the
/// two density estimators under `U_δ` on a grid in `B_{r/2}(ȳ)`.
pub fn example_experiment<C: VectorFields>(
    model: &DiffusionModel<C>,
    cfg: &ExperimentConfig,
    oracle: Option<&dyn DerivativeOracle>,
) -> Result<ExperimentReport> {
    if cfg.y.len() != model.n {
        return invalid("y must live in the projected space");
    }
    if cfg.coords.iter().any(|&c| c >= model.n) {
        return invalid("density coordinate out of range");
    }
    let gate = capital_lambda(model, &cfg.y, &cfg.box_lo, &cfg.box_hi, cfg.budget, cfg.seed)?;
    require_positive(gate.value, "Λ(ȳ)")?;

    let grid = make_grid(cfg.horizon, cfg.m)?;
    let d = model.drivers();
    let f = EulerMap { model: model.clone(), end: cfg.m };
    let fam = DiffusionFamily { model: model.clone() };

    let tail_batch = PathBatch::new(grid, d, cfg.tail_paths, cfg.seed ^ 0x7a11)?;
    let tails = crate::nondegen::tail_probability(&f, &fam, &cfg.y, cfg.radius, cfg.lambda_star, cfg.horizon, &cfg.deltas, &tail_batch)?;

    let eps_batch = PathBatch::new(grid, d, cfg.eps_paths, cfg.seed ^ 0xe95)?;
    let mut epsilon = Vec::new();
    for &delta in &cfg.deltas {
        let w = Window::new(&grid, cfg.horizon, delta)?;
        let mode = match oracle {
            Some(o) => EpsMode::Exact(o),
            None => EpsMode::Nested(NestedOpts::antithetic(cfg.n_inner)),
        };
        let e = epsilon_alpha(&f, &fam, cfg.alpha, cfg.eps_p, &w, &eps_batch, mode)?;
        epsilon.push(EpsRow { delta, eps: e.total });
    }
    let mut by_delta: Vec<&EpsRow> = epsilon.iter().collect();
    by_delta.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    let eps_max_ratio = by_delta.windows(2).map(|p| p[1].eps.mean / p[0].eps.mean).fold(0.0, f64::max);

    let w = Window::new(&grid, cfg.horizon, cfg.density_delta)?;
    let params = LocalizerParams { y: cfg.y.clone(), r: cfg.radius, delta: cfg.density_delta, lambda_star: cfg.lambda_star, gamma: cfg.gamma };
    let loc = DeltaLocalization::new(&f, &fam, w, params)?;
    let center: Vec<f64> = cfg.coords.iter().map(|&c| cfg.y[c]).collect();
    let points = ball_grid(&center, 0.5 * cfg.radius, cfg.points_per_axis, 0.8);
    let batch = PathBatch::new(grid, d, cfg.n_paths, cfg.seed)?;
    let density = density_grid(&f, &loc, &cfg.coords, &points, &w, &batch)?;
    let (sup_discrepancy, agreement) = density.agreement(0.05);
    Ok(ExperimentReport { gate, tails, epsilon, eps_max_ratio, density, sup_discrepancy, agreement })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcalc::BrownianAt;
    use crate::localize::{NoLocalization, PsiLocalization};
    use crate::sde::degenerate;

    fn unit_batch(n: usize, seed: u64) -> PathBatch {
        PathBatch::new(make_grid(1.0, 4).unwrap(), 1, n, seed).unwrap()
    }

    #[test]
    fn gaussian_density_at_zero() {
        let b = unit_batch(100_000, 3);
        let w = Window::new(&b.grid, 1.0, 1.0).unwrap();
        let f = BrownianAt { node: 4, driver: 0 };
        let pts = vec![vec![0.0], vec![0.7], vec![-0.7]];
        let r = density_grid(&f, &NoLocalization, &[0], &pts, &w, &b).unwrap();
        let ibp = r.ibp.as_ref().unwrap();
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for (e, x) in ibp.iter().zip(&pts) {
            assert!(e.within(phi(x[0]), 3.0), "{e:?} at {x:?}");
        }
        let diff = ibp[1].mean - ibp[2].mean;
        assert!(diff.abs() <= 3.0 * (ibp[1].se.powi(2) + ibp[2].se.powi(2)).sqrt());
        assert!((r.kde[0].mean - phi(0.0)).abs() < 0.01);
        assert!(r.agreement(0.05).1);
    }

    #[test]
    fn kde_mass_and_zero_weights() {
        let b = unit_batch(20_000, 4);
        let f = BrownianAt { node: 4, driver: 0 };
        let loc = PsiLocalization { f: &f, y: vec![0.3], r: 1.0 };
        let xs: Vec<Vec<f64>> = (0..=240).map(|i| vec![-3.0 + 0.025 * i as f64]).collect();
        let w = Window::new(&b.grid, 1.0, 1.0).unwrap();
        let r = density_grid(&f, &loc, &[0], &xs, &w, &b).unwrap();
        let mass: f64 = r.kde.iter().map(|e| 0.025 * e.mean).sum();
        assert!((mass - r.mass.mean).abs() < 0.02 * r.mass.mean, "{mass} vs {:?}", r.mass);
        // far outside the localized ball
        let far = density_ibp(&f, &loc, &[0], &[vec![2.0]], &w, &b).unwrap();
        assert_eq!(far[0].mean, 0.0);
        let none = PsiLocalization { f: &f, y: vec![50.0], r: 1.0 };
        let (k, _) = density_kde(&f, &none, &[0], &[vec![0.0]], &b).unwrap();
        assert_eq!(k[0].mean, 0.0);
    }

    #[test]
    fn ball_grid_shapes() {
        assert_eq!(ball_grid(&[1.0], 1.0, 5, 0.8).len(), 5);
        let g = ball_grid(&[0.0, 0.0], 1.0, 5, 1.0);
        assert_eq!(g.len(), 13);
        assert!(g.iter().all(|p| p[0].hypot(p[1]) <= 1.0 + 1e-12));
    }

    #[test]
    fn degenerate_model_fails_the_gate() {
        let cfg = ExperimentConfig { y: vec![0.0; 2], box_lo: vec![-1.0], box_hi: vec![1.0], ..Default::default() };
        assert!(matches!(example_experiment(&degenerate(), &cfg, None), Err(Error::GateFailed(_))));
    }

    #[test]
    fn too_many_coordinates() {
        let b = PathBatch::new(make_grid(1.0, 4).unwrap(), 2, 10, 1).unwrap();
        let f = crate::sde::EulerMap { model: crate::sde::heisenberg(), end: 4 };
        let w = Window::new(&b.grid, 1.0, 1.0).unwrap();
        let r = density_grid(&f, &NoLocalization, &[0, 1, 2], &[vec![0.0; 3]], &w, &b).unwrap();
        assert!(r.ibp.is_none() && !r.warnings.is_empty());
        assert!(density_ibp(&f, &NoLocalization, &[0, 1, 2], &[vec![0.0; 3]], &w, &b).is_err());
    }
}
