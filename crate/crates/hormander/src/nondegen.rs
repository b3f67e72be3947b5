//! Order-one non-degeneracy: `λ(T,δ)`, `ā(T,δ)`, `Λ(x̄)`, the tail
//! probability of `{|F−y| ≤ r, λ(T,δ) < λ*}` and the approximation error
//! `ε_{α,p,T,δ}(a,F)`.

use crate::error::{invalid, Error, Result};
use crate::funcalc::{lift, Ctx, GridFunctional};
use crate::jet::Jet;
use crate::sde::{DiffusionModel, VectorFields};
use crate::stats::{clopper_pearson, linear_fit, loglog_slope, par_map, Accum, McEstimate, Proportion};
use crate::timegrid::{nested_for_path, NestedOpts, PathBatch, Window};
use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// `a_i ∈ ℝⁿ` and `a_{i,j} ∈ ℝⁿ` for one path. `pair[i][j]` pairs the
/// earlier driver `i` with the later driver `j`, as in the iterated integral
/// `∫(W^i_s − W^i_{T−δ})dW^j_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFamily {
    pub a: Vec<Vec<f64>>,
    pub pair: Vec<Vec<Vec<f64>>>,
    /// Last grid node the family may depend on.
    pub measurable_until: usize,
}

impl CoefficientFamily {
    pub fn new(a: Vec<Vec<f64>>, pair: Vec<Vec<Vec<f64>>>, measurable_until: usize) -> Result<Self> {
        let d = a.len();
        let n = a.first().map_or(0, Vec::len);
        if d == 0 || n == 0 {
            return invalid("family needs d ≥ 1 and n ≥ 1");
        }
        let shapes = a.iter().all(|v| v.len() == n)
            && pair.len() == d
            && pair.iter().all(|row| row.len() == d && row.iter().all(|v| v.len() == n));
        if !shapes {
            return invalid("family vectors have inconsistent shapes");
        }
        Ok(Self { a, pair, measurable_until })
    }

    /// `a_i = e_i`, no pair terms.
    pub fn basis(n: usize) -> Self {
        let a = (0..n).map(|i| (0..n).map(|k| if i == k { 1.0 } else { 0.0 }).collect()).collect();
        Self { a, pair: vec![vec![vec![0.0; n]; n]; n], measurable_until: 0 }
    }

    pub fn drivers(&self) -> usize {
        self.a.len()
    }
    pub fn dim(&self) -> usize {
        self.a[0].len()
    }

    /// `[a]_{i,j} = a_{i,j} − a_{j,i}`.
    pub fn bracket(&self, i: usize, j: usize) -> Vec<f64> {
        self.pair[i][j].iter().zip(&self.pair[j][i]).map(|(x, y)| x - y).collect()
    }

    pub fn abar(&self) -> f64 {
        let sq = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
        (self.a.iter().map(sq).sum::<f64>() + self.pair.iter().flatten().map(sq).sum::<f64>()).sqrt()
    }

    /// `M = Σ a_i a_iᵀ + Σ_{i,j} [a]_{i,j}[a]_{i,j}ᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut add = |v: &[f64]| {
            for r in 0..n {
                for c in 0..n {
                    m[(r, c)] += v[r] * v[c];
                }
            }
        };
        self.a.iter().for_each(|v| add(v));
        for i in 0..self.drivers() {
            for j in 0..self.drivers() {
                add(&self.bracket(i, j));
            }
        }
        m
    }

    pub fn map(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            a: self.a.iter().map(|v| f(v)).collect(),
            pair: self.pair.iter().map(|row| row.iter().map(|v| f(v)).collect()).collect(),
            measurable_until: self.measurable_until,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub lambda: f64,
    pub abar: f64,
    pub xi: Vec<f64>,
}

pub fn lambda_min(fam: &CoefficientFamily) -> Result<SpectrumReport> {
    let finite = fam.a.iter().flatten().chain(fam.pair.iter().flatten().flatten()).all(|x| x.is_finite());
    if !finite {
        return invalid("non-finite coefficient");
    }
    let eig = SymmetricEigen::new(fam.gram());
    let (idx, lambda) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b });
    let xi = eig.eigenvectors.column(idx).iter().copied().collect();
    Ok(SpectrumReport { lambda: lambda.max(0.0), abar: fam.abar(), xi })
}

/// Builds the family `a(T,δ)` from the part of a path before the window.
pub trait FamilyBuilder: Sync {
    fn build(&self, dw: &[f64], ctx: &Ctx, w: &Window) -> CoefficientFamily;
}

impl<F> FamilyBuilder for F
where
    F: Fn(&[f64], &Ctx, &Window) -> CoefficientFamily + Sync,
{
    fn build(&self, dw: &[f64], ctx: &Ctx, w: &Window) -> CoefficientFamily {
        self(dw, ctx, w)
    }
}

/// `a_j = σ̄_j(X_{T−δ})`, `a_{j,p} = Σ_k σ_j^k ∂_k σ̄_p (X_{T−δ})`.
pub fn family_at<C: VectorFields>(model: &DiffusionModel<C>, x: &[f64], node: usize) -> CoefficientFamily {
    let (a, pair) = model.coefficients_a(x);
    CoefficientFamily { a, pair, measurable_until: node }
}

/// The diffusion family evaluated at the Euler state at `T − δ`.
#[derive(Clone, Debug)]
pub struct DiffusionFamily<C: VectorFields> {
    pub model: DiffusionModel<C>,
}

impl<C: VectorFields> FamilyBuilder for DiffusionFamily<C> {
    fn build(&self, dw: &[f64], ctx: &Ctx, w: &Window) -> CoefficientFamily {
        let x = self.model.terminal(dw, ctx, w.first_cell);
        family_at(&self.model, &x, w.first_cell)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapitalLambda {
    /// Smallest value found; an upper bound on the infimum over the box.
    pub value: f64,
    pub xhat: Vec<f64>,
    pub evaluations: usize,
}

/// `Λ(x̄) = inf_{x̂} λ_min(σ̄_j, [σ_j,σ_p]‾)` at `(x̄, x̂)`, searched over the box
/// `[lo, hi]` by compass search from several starts.
pub fn capital_lambda<C: VectorFields>(
    model: &DiffusionModel<C>,
    xbar: &[f64],
    lo: &[f64],
    hi: &[f64],
    budget: usize,
    seed: u64,
) -> Result<CapitalLambda> {
    let (nn, n) = (model.state_dim(), model.n);
    if budget == 0 {
        return invalid("budget must be positive");
    }
    if xbar.len() != n || lo.len() != nn - n || hi.len() != nn - n || lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
        return invalid("need len(x̄) = n and a non-empty box in ℝ^{N−n}");
    }
    let d = model.drivers();
    let objective = |xhat: &[f64]| -> f64 {
        let x: Vec<f64> = xbar.iter().chain(xhat).copied().collect();
        let a = (0..d).map(|j| model.fields.sigma(j, &x)[..n].to_vec()).collect();
        let mut pair = vec![vec![vec![0.0; n]; d]; d];
        // the bracket enters as [a]_{j,p}; storing it in pair[j][p] and halving
        // keeps M equal to Σ⟨[σ_j,σ_p]‾, ξ⟩² over ordered pairs
        for j in 0..d {
            for p in 0..d {
                pair[j][p] = model.lie_bracket(j, p, &x)[..n].iter().map(|v| 0.5 * v).collect();
            }
        }
        lambda_min(&CoefficientFamily { a, pair, measurable_until: 0 }).map_or(f64::NAN, |s| s.lambda)
    };
    let k = nn - n;
    if k == 0 {
        return Ok(CapitalLambda { value: objective(&[]), xhat: vec![], evaluations: 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unif = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let per_start = (20 * k).max(10);
    let starts = (budget / per_start).max(1);
    let mut best = CapitalLambda { value: f64::INFINITY, xhat: vec![], evaluations: 0 };
    let mut evals = 0;
    for s in 0..starts {
        let mut x: Vec<f64> = (0..k).map(|i| if s == 0 { 0.5 * (lo[i] + hi[i]) } else { lo[i] + unif() * (hi[i] - lo[i]) }).collect();
        let mut fx = objective(&x);
        evals += 1;
        let mut step: Vec<f64> = (0..k).map(|i| 0.25 * (hi[i] - lo[i])).collect();
        while evals < budget && step.iter().zip(lo.iter().zip(hi)).any(|(s, (a, b))| *s > 1e-9 * (b - a).max(1e-12)) {
            let mut moved = false;
            'dirs: for i in 0..k {
                for sgn in [1.0, -1.0] {
                    let mut y = x.clone();
                    y[i] = (y[i] + sgn * step[i]).clamp(lo[i], hi[i]);
                    let fy = objective(&y);
                    evals += 1;
                    if fy < fx {
                        x = y;
                        fx = fy;
                        moved = true;
                        break 'dirs;
                    }
                    if evals >= budget {
                        break 'dirs;
                    }
                }
            }
            if !moved {
                step.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
        if fx < best.value {
            best.value = fx;
            best.xhat = x;
        }
        if evals >= budget {
            break;
        }
    }
    best.evaluations = evals;
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub delta: f64,
    pub prob: Proportion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub rows: Vec<TailRow>,
    /// Slope of `ln P` against `ln δ` over rows with hits.
    pub loglog_slope: Option<f64>,
    /// Slope of `ln P` against `1/δ` over rows with hits.
    pub inverse_slope: Option<f64>,
}

/// `P({|F−y| ≤ r} ∩ {λ(T,δ) < λ*})` per `δ`, with exact binomial intervals.
#[allow(clippy::too_many_arguments)]
pub fn tail_probability(
    f: &dyn GridFunctional,
    fam: &dyn FamilyBuilder,
    y: &[f64],
    r: f64,
    lambda_star: f64,
    t: f64,
    deltas: &[f64],
    batch: &PathBatch,
) -> Result<TailReport> {
    if y.len() != f.dim() {
        return invalid("y must have the dimension of F");
    }
    let ctx = Ctx::of(batch);
    let mut rows = Vec::new();
    for &delta in deltas {
        let w = Window::new(&batch.grid, t, delta)?;
        let hits = par_map(batch.n_paths, |p| {
            let dw = batch.path(p);
            let fv = f.eval(&dw, &ctx);
            let dist = fv.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist > r {
                return false;
            }
            lambda_min(&fam.build(&dw, &ctx, &w)).map_or(true, |s| s.lambda < lambda_star)
        })
        .into_iter()
        .filter(|&b| b)
        .count();
        rows.push(TailRow { delta, prob: clopper_pearson(hits, batch.n_paths, 0.95) });
    }
    let ds: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let ps: Vec<f64> = rows.iter().map(|r| r.prob.estimate).collect();
    let pos: Vec<(f64, f64)> = rows.iter().filter(|r| r.prob.hits > 0).map(|r| (1.0 / r.delta, r.prob.estimate.ln())).collect();
    let inverse_slope = (pos.len() >= 2).then(|| {
        let (x, y): (Vec<f64>, Vec<f64>) = pos.into_iter().unzip();
        linear_fit(&x, &y).0
    });
    Ok(TailReport { loglog_slope: loglog_slope(&ds, &ps), inverse_slope, rows })
}

/// Exact window conditional expectations of first and second derivatives.
pub trait DerivativeOracle: Sync {
    /// `E_{T,δ}(D^i_{t_k} F)` for every component.
    fn first(&self, dw: &[f64], ctx: &Ctx, w: &Window, cell: usize, driver: usize) -> Vec<f64>;
    /// `E_{T,δ}(D^j_{t_{k₂}} D^i_{t_{k₁}} F)` with `k₂ ≤ k₁`.
    fn second(&self, dw: &[f64], ctx: &Ctx, w: &Window, later: (usize, usize), earlier: (usize, usize)) -> Vec<f64>;
}

/// Exact window derivatives of the Euler terminal value of the Heisenberg
/// model started at 0, where `X³_T = Σ_k X¹_{t_k} ΔW²_k`.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeisenbergOracle;

impl DerivativeOracle for HeisenbergOracle {
    fn first(&self, dw: &[f64], ctx: &Ctx, w: &Window, _cell: usize, driver: usize) -> Vec<f64> {
        if driver == 0 {
            vec![1.0, 0.0, 0.0]
        } else {
            vec![0.0, 1.0, crate::funcalc::brownian(dw, ctx, w.first_cell, 0)]
        }
    }
    fn second(&self, _dw: &[f64], _ctx: &Ctx, _w: &Window, later: (usize, usize), earlier: (usize, usize)) -> Vec<f64> {
        let hit = later.0 > earlier.0 && earlier.1 == 0 && later.1 == 1;
        vec![0.0, 0.0, if hit { 1.0 } else { 0.0 }]
    }
}

pub enum EpsMode<'a> {
    Nested(NestedOpts),
    Exact(&'a dyn DerivativeOracle),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub total: McEstimate,
    /// First sum (one term per driver).
    pub first: Vec<McEstimate>,
    /// Second sum, `d × d` terms indexed by (earlier, later) driver.
    pub second: Vec<McEstimate>,
}

/// Window-derivative layout: first derivatives for every (cell, driver),
/// then second derivatives for every (k₁ ≥ k₂) cell pair and driver pair.
struct Layout {
    cells: Vec<usize>,
    d: usize,
    n: usize,
}

impl Layout {
    fn width(&self) -> usize {
        self.cells.len() * self.d
    }
    fn n_first(&self) -> usize {
        self.width() * self.n
    }
    fn pairs(&self) -> Vec<(usize, usize)> {
        let k = self.cells.len();
        (0..k).flat_map(|a| (0..=a).map(move |b| (a, b))).collect()
    }
    fn len(&self) -> usize {
        self.n_first() + self.pairs().len() * self.d * self.d * self.n
    }
    /// Fills `out` from order-2 jets over the window entries.
    fn fill(&self, jets: &[Jet], out: &mut [f64]) {
        let d = self.d;
        let mut o = 0;
        for a in 0..self.cells.len() {
            for i in 0..d {
                for j in jets {
                    out[o] = j.grad(a * d + i);
                    o += 1;
                }
            }
        }
        for (a, b) in self.pairs() {
            for e in 0..d {
                for l in 0..d {
                    // D^e at the earlier cell b, D^l at the later cell a
                    for j in jets {
                        out[o] = j.hess(b * d + e, a * d + l);
                        o += 1;
                    }
                }
            }
        }
    }
}

/// `ε_{α,p,T,δ}(a,F)` with time integrals as `h`-weighted window sums. The
/// triangle `s₂ ≤ s₁` gives weight `h²` off the diagonal and `h²/2` on it.
/// Pair terms compare `E_{T,δ}(D^e_{s₂}D^l_{s₁}F)` with `a_{e,l}` (earlier
/// driver first). For `p = 1` with nested sampling the inner noise is
/// removed from every squared deviation.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_alpha(
    f: &dyn GridFunctional,
    fam: &dyn FamilyBuilder,
    alpha: f64,
    p: u32,
    w: &Window,
    batch: &PathBatch,
    mode: EpsMode<'_>,
) -> Result<EpsilonReport> {
    if p == 0 || !(alpha > 0.0) {
        return invalid("need p ≥ 1 and α > 0");
    }
    crate::funcalc::check_order(f, 2)?;
    batch.check_window(w)?;
    if let EpsMode::Nested(o) = &mode {
        o.check()?;
    }
    let ctx = Ctx::of(batch);
    let (d, n, h, delta) = (ctx.drivers, f.dim(), ctx.step, w.delta);
    let lay = Layout { cells: w.cells().collect(), d, n };
    let entries = w.first_cell * d..w.end_cell * d;
    let pairs = lay.pairs();
    let pf = p as f64;
    let rows: Vec<Vec<f64>> = par_map(batch.n_paths, |pi| {
        let dw = batch.path(pi);
        let a = fam.build(&dw, &ctx, w);
        let (means, noise): (Vec<f64>, Vec<f64>) = match &mode {
            EpsMode::Exact(oracle) => {
                let mut m = Vec::with_capacity(lay.len());
                for &c in &lay.cells {
                    for i in 0..d {
                        m.extend(oracle.first(&dw, &ctx, w, c, i));
                    }
                }
                for &(x, y) in &pairs {
                    for e in 0..d {
                        for l in 0..d {
                            m.extend(oracle.second(&dw, &ctx, w, (lay.cells[x], l), (lay.cells[y], e)));
                        }
                    }
                }
                let z = vec![0.0; m.len()];
                (m, z)
            }
            EpsMode::Nested(opts) => {
                let sampler = batch.inner_sampler(w, opts.antithetic, 0);
                let mut scratch = dw.clone();
                let acc: Vec<Accum> = nested_for_path(&sampler, pi, &mut scratch, *opts, lay.len(), |x, out| {
                    let jets = f.eval_jet(&lift(x, entries.clone(), 2), &ctx);
                    lay.fill(&jets, out);
                });
                let m = acc.iter().map(|a| a.mean).collect();
                let z = acc.iter().map(|a| if p == 1 { a.var() / a.n as f64 } else { 0.0 }).collect();
                (m, z)
            }
        };
        let sq = |o: usize, target: &[f64]| -> f64 {
            (0..n).map(|c| (means[o + c] - target[c]).powi(2) - noise[o + c]).sum::<f64>()
        };
        let mut row = Vec::with_capacity(d + d * d);
        for i in 0..d {
            let mut s = 0.0;
            for ci in 0..lay.cells.len() {
                s += h * sq((ci * d + i) * n, &a.a[i]);
            }
            let v = s / delta / delta.powf(1.0 + 2.0 * alpha);
            row.push(if p == 1 { v } else { v.max(0.0).powf(pf) });
        }
        for e in 0..d {
            for l in 0..d {
                let mut s = 0.0;
                for (pi2, &(x, y)) in pairs.iter().enumerate() {
                    let o = lay.n_first() + ((pi2 * d + e) * d + l) * n;
                    let wgt = if x == y { 0.5 * h * h } else { h * h };
                    let dev = sq(o, &a.pair[e][l]);
                    s += wgt * if p == 1 { dev } else { dev.max(0.0).powf(pf) };
                }
                row.push(s / (delta * delta) / delta.powf(alpha * pf));
            }
        }
        row
    });
    let root = |c: usize| -> McEstimate {
        let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        let e = crate::stats::estimate_of(&col, batch.seed);
        let m = e.mean.max(0.0);
        let q = 1.0 / (2.0 * pf);
        let v = m.powf(q);
        let se = if m > 0.0 { q * v / m * e.se } else { e.se.powf(q) };
        McEstimate { mean: v, se, ..e }
    };
    let first: Vec<McEstimate> = (0..d).map(root).collect();
    let second: Vec<McEstimate> = (d..d + d * d).map(root).collect();
    let mean = first.iter().chain(&second).map(|e| e.mean).sum();
    let se = first.iter().chain(&second).map(|e| e.se).sum();
    Ok(EpsilonReport { total: McEstimate { mean, se, level: 0.95, count: batch.n_paths, seed: batch.seed }, first, second })
}

/// Shorthand for a failed degeneracy gate.
pub fn require_positive(value: f64, what: &str) -> Result<()> {
    if value > 0.0 {
        Ok(())
    } else {
        Err(Error::GateFailed(format!("{what} = {value} is not positive")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcalc::{BrownianAt, BrownianSquare};
    use crate::sde::{degenerate, heisenberg};
    use crate::timegrid::{make_grid, sample_increments};

    #[test]
    fn basis_and_zero() {
        let s = lambda_min(&CoefficientFamily::basis(3)).unwrap();
        assert!((s.lambda - 1.0).abs() < 1e-12);
        let z = CoefficientFamily::basis(2).map(|v| vec![0.0; v.len()]);
        let s = lambda_min(&z).unwrap();
        assert_eq!((s.lambda, s.abar), (0.0, 0.0));
    }

    #[test]
    fn heisenberg_spectrum() {
        let fam = family_at(&heisenberg(), &[0.0; 3], 0);
        let m = fam.gram();
        let want = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0, 2.0]));
        assert_eq!(m, want);
        let s = lambda_min(&fam).unwrap();
        assert!((s.lambda - 1.0).abs() < 1e-12);
        let c = capital_lambda(&heisenberg(), &[0.0; 3], &[], &[], 10, 1).unwrap();
        assert!((c.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_capital_lambda_vanishes() {
        let c = capital_lambda(&degenerate(), &[0.0, 0.0], &[-1.0], &[1.0], 200, 1).unwrap();
        assert!(c.value.abs() < 1e-12);
    }

    #[test]
    fn heisenberg_capital_lambda_over_projection() {
        // n = 2: only σ̄ matters; Λ = 1 independently of x̂.
        let m = DiffusionModel::new(crate::sde::Shipped::Heisenberg, 2, vec![0.0; 3]).unwrap();
        let c = capital_lambda(&m, &[0.3, 0.0], &[-2.0], &[2.0], 300, 2).unwrap();
        assert!((c.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn epsilon_vanishes_for_brownian_motion() {
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_increments(g, 1, 50, 2).unwrap();
        let w = Window::new(&g, 1.0, 0.5).unwrap();
        let fam = |_: &[f64], _: &Ctx, w: &Window| CoefficientFamily::new(vec![vec![1.0]], vec![vec![vec![0.0]]], w.first_cell).unwrap();
        let e = epsilon_alpha(&BrownianAt { node: 8, driver: 0 }, &fam, 0.5, 1, &w, &b, EpsMode::Nested(NestedOpts::plain(4))).unwrap();
        assert!(e.total.mean.abs() < 1e-12);
    }

    #[test]
    fn heisenberg_oracle_matches_nested_sampling() {
        // only the same-cell (W¹, W²) pairs deviate: ε = (h/(2δ^{1+α}))^{1/2}
        let model = heisenberg();
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_increments(g, 2, 300, 5).unwrap();
        let w = Window::new(&g, 1.0, 0.5).unwrap();
        let f = crate::sde::EulerMap { model: model.clone(), end: 8 };
        let fam = DiffusionFamily { model };
        let exact = epsilon_alpha(&f, &fam, 0.5, 1, &w, &b, EpsMode::Exact(&HeisenbergOracle)).unwrap();
        let want = (0.125 / (2.0 * 0.5f64.powf(1.5))).sqrt();
        assert!((exact.total.mean - want).abs() < 1e-12, "{:?}", exact.total);
        let nested = epsilon_alpha(&f, &fam, 0.5, 1, &w, &b, EpsMode::Nested(NestedOpts::antithetic(16))).unwrap();
        assert!((nested.total.mean - want).abs() < 1e-6 + 3.0 * nested.total.se, "{:?}", nested.total);
    }

    #[test]
    fn epsilon_of_square_is_diagonal_only() {
        // E_{T,δ}(2W_T) = 2W_{T−δ}; the grid second derivative is 2 on every
        // cell pair, so only noise remains.
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_increments(g, 1, 400, 3).unwrap();
        let w = Window::new(&g, 1.0, 0.5).unwrap();
        let fam = |dw: &[f64], _: &Ctx, w: &Window| {
            let wt: f64 = dw[..w.first_cell].iter().sum();
            CoefficientFamily::new(vec![vec![2.0 * wt]], vec![vec![vec![2.0]]], w.first_cell).unwrap()
        };
        let e = epsilon_alpha(&BrownianSquare { node: 8, driver: 0 }, &fam, 0.5, 1, &w, &b, EpsMode::Nested(NestedOpts::antithetic(8))).unwrap();
        assert!(e.total.mean < 1e-10, "{:?}", e.total);
    }
}
