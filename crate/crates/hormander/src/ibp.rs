//! Windowed Malliavin machinery: `σ_{F,T,δ}`, `Z_δ(a)`, `R_δ`, `G_δ`, the
//! event `Λ_{T,δ}` and the localized weights `H_{i,U}`, `H_{α,U}`.
//!
//! Weights are assembled in jet arithmetic: `F` is expanded to order
//! `|α| + 1` in the window increments, and every inner product
//! `⟨D·, DFʲ⟩_δ` is a contraction of jet partials.

use crate::error::{invalid, Error, Result};
use crate::funcalc::{check_order, lift, Ctx, GridFunctional, SmoothMap};
use crate::jet::{Jet, Scalar};
use crate::localize::{LocalizerParams, Localization, QInputs};
use crate::nondegen::{lambda_min, CoefficientFamily, FamilyBuilder};
use crate::stats::{estimate_of, par_map, McEstimate};
use crate::timegrid::{nested_for_path, NestedOpts, PathBatch, Window};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Scale-aware singularity cutoff: `det σ < SINGULAR · δ^{2n}`.
pub const SINGULAR: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub struct WindowCovariance {
    pub matrix: DMatrix<f64>,
    pub det: f64,
    pub inverse: Option<DMatrix<f64>>,
}

fn is_singular(det: f64, delta: f64, n: usize) -> bool {
    !(det.abs() >= SINGULAR * delta.powi(2 * n as i32))
}

fn covariance_of(jets: &[Jet], width: usize, h: f64, delta: f64) -> WindowCovariance {
    let n = jets.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..width).map(|e| jets[i].grad(e) * jets[j].grad(e)).sum::<f64>() * h;
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    let det = m.determinant();
    let inverse = if is_singular(det, delta, n) { None } else { m.clone().try_inverse() };
    WindowCovariance { matrix: m, det, inverse }
}

/// `σ^{i,j} = Σ_{window cells} h ⟨D_s Fⁱ, D_s Fʲ⟩` on one path.
pub fn covariance_at(f: &dyn GridFunctional, w: &Window, ctx: &Ctx, dw: &[f64]) -> WindowCovariance {
    let act = w.first_cell * ctx.drivers..w.end_cell * ctx.drivers;
    let jets = f.eval_jet(&lift(dw, act.clone(), 1), ctx);
    covariance_of(&jets, act.len(), ctx.step, w.delta)
}

/// [`covariance_at`] over a batch.
pub fn window_covariance(f: &dyn GridFunctional, w: &Window, batch: &PathBatch) -> Result<Vec<WindowCovariance>> {
    check_order(f, 1)?;
    batch.check_window(w)?;
    let ctx = Ctx::of(batch);
    Ok(par_map(batch.n_paths, |p| covariance_at(f, w, &ctx, &batch.path(p))))
}

/// `Z_δ(a) = Σ aᵢ ΔWⁱ + Σ a_{i,j} Σ_k (Wⁱ_{t_k} − Wⁱ_{T−δ}) ΔWʲ_k` over the
/// window, with `a` built from the path before the window.
pub struct ZDelta<'a> {
    pub fam: &'a dyn FamilyBuilder,
    pub window: Window,
    pub n: usize,
}

pub fn z_of<S: Scalar>(fam: &CoefficientFamily, w: &Window, dw: &[S], d: usize) -> Vec<S> {
    let n = fam.dim();
    let mut z = vec![S::cst(0.0); n];
    let mut run: Vec<S> = vec![S::cst(0.0); d];
    for k in w.cells() {
        for j in 0..d {
            let inc = &dw[k * d + j];
            for c in 0..n {
                let mut coef = S::cst(fam.a[j][c]);
                for (i, r) in run.iter().enumerate() {
                    let aij = fam.pair[i][j][c];
                    if aij != 0.0 {
                        coef = coef + r.clone() * aij;
                    }
                }
                z[c] = z[c].clone() + coef * inc.clone();
            }
        }
        for j in 0..d {
            run[j] = run[j].clone() + dw[k * d + j].clone();
        }
    }
    z
}

impl SmoothMap for ZDelta<'_> {
    fn dim(&self) -> usize {
        self.n
    }
    fn name(&self) -> String {
        "z-delta".into()
    }
    fn map<S: Scalar>(&self, dw: &[S], ctx: &Ctx) -> Vec<S> {
        let vals: Vec<f64> = dw.iter().map(|x| x.value()).collect();
        let fam = self.fam.build(&vals, ctx, &self.window);
        z_of(&fam, &self.window, dw, ctx.drivers)
    }
}

pub fn z_delta(fam: &dyn FamilyBuilder, w: &Window, batch: &PathBatch) -> Result<Vec<Vec<f64>>> {
    batch.check_window(w)?;
    let ctx = Ctx::of(batch);
    Ok(par_map(batch.n_paths, |p| {
        let dw = batch.path(p);
        z_of(&fam.build(&dw, &ctx, w), w, &dw, ctx.drivers)
    }))
}

/// `q₁ = |W_T − W_{T−δ}|²` and `q₂ = δ⁻¹ Σ_k h |W_{t_k} − W_{T−δ}|²` (left points).
pub fn window_q<S: Scalar>(dw: &[S], w: &Window, d: usize, h: f64) -> (S, S) {
    let mut run: Vec<S> = vec![S::cst(0.0); d];
    let mut q2 = S::cst(0.0);
    for k in w.cells() {
        for r in &run {
            if !r.is_zero_const() {
                q2 = q2 + r.clone() * r.clone() * (h / w.delta);
            }
        }
        for j in 0..d {
            run[j] = run[j].clone() + dw[k * d + j].clone();
        }
    }
    let q1 = crate::jet::sum(run.iter().map(|r| r.clone() * r.clone()));
    (q1, q2)
}

/// `G_δ = Σ_e h |∂_e F − ∂_e Z|²` from order ≥ 1 jets over the window.
fn g_of(fj: &[Jet], zj: &[Jet], width: usize, h: f64) -> f64 {
    let mut g = 0.0;
    for (a, b) in fj.iter().zip(zj) {
        for e in 0..width {
            g += (a.grad(e) - b.grad(e)).powi(2);
        }
    }
    g * h
}

fn g_jet(fj: &[Jet], zj: &[Jet], width: usize, h: f64) -> Jet {
    let mut g = Jet::constant(0.0);
    for (a, b) in fj.iter().zip(zj) {
        for e in 0..width {
            let x = a.partial(e) - b.partial(e);
            g = g + x.clone() * x;
        }
    }
    g * h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaMargins {
    /// `q₁ · 8āe d / √λ*` (≤ 1 inside).
    pub q1: f64,
    /// Same with `λ*` in place of `√λ*`.
    pub q1_alt: f64,
    pub q2: f64,
    /// `G_δ · 34 / (λ* δ²)`.
    pub g: f64,
    /// `λ*/λ(T,δ)`.
    pub lambda: f64,
    /// `G_δ · 68 d³ / (λ* δ²)`, the `Q₁` scale.
    pub g_q1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Remainder {
    pub f: Vec<f64>,
    pub z: Vec<f64>,
    /// `F − E_{T,δ}F − Z_δ` per component, when requested.
    pub r: Option<Vec<McEstimate>>,
    pub g: f64,
    pub q1: f64,
    pub q2: f64,
    pub abar: f64,
    pub lambda: f64,
    pub in_lambda: bool,
    pub margins: LambdaMargins,
}

/// `G_δ` as a jet of the given order in the window increments.
pub fn g_delta_jet(f: &dyn GridFunctional, fam: &dyn FamilyBuilder, w: &Window, ctx: &Ctx, dw: &[f64], order: u8) -> Jet {
    let d = ctx.drivers;
    let act = w.first_cell * d..w.end_cell * d;
    let a = fam.build(dw, ctx, w);
    let lifted = lift(dw, act.clone(), order + 1);
    let fj = f.eval_jet(&lifted, ctx);
    let zj = z_of(&a, w, &lifted, d);
    g_jet(&fj, &zj, act.len(), ctx.step)
}

/// `Z_δ`, `G_δ`, `q₁`, `q₂`, `λ(T,δ)`, `ā` and the `Λ_{T,δ}` flag on one path.
pub fn remainder_at(f: &dyn GridFunctional, fam: &dyn FamilyBuilder, w: &Window, ctx: &Ctx, dw: &[f64], lambda_star: f64) -> Result<Remainder> {
    let d = ctx.drivers;
    let act = w.first_cell * d..w.end_cell * d;
    let delta = w.delta;
    let a = fam.build(dw, ctx, w);
    let spec = lambda_min(&a)?;
    let lifted = lift(dw, act.clone(), 1);
    let fj = f.eval_jet(&lifted, ctx);
    let zj = z_of(&a, w, &lifted, d);
    let g = g_of(&fj, &zj, act.len(), ctx.step);
    let (q1s, q2) = window_q(dw, w, d, ctx.step);
    let q1 = q1s.sqrt();
    let ls = lambda_star;
    let df = d as f64;
    let margins = LambdaMargins {
        q1: q1 * 8.0 * spec.abar * df / ls.sqrt(),
        q1_alt: q1 * 8.0 * spec.abar * df / ls,
        q2,
        g: g * 34.0 / (ls * delta * delta),
        lambda: if spec.lambda > 0.0 { ls / spec.lambda } else { f64::INFINITY },
        g_q1: g * 68.0 * df.powi(3) / (ls * delta * delta),
    };
    let in_lambda = margins.q1 <= 1.0 && q2 <= 1.0 && margins.g <= 1.0 && spec.lambda >= ls;
    Ok(Remainder {
        f: fj.iter().map(|j| j.value()).collect(),
        z: zj.iter().map(|j| j.value()).collect(),
        r: None,
        g,
        q1,
        q2,
        abar: spec.abar,
        lambda: spec.lambda,
        in_lambda,
        margins,
    })
}

/// [`remainder_at`] over a batch; with `nested`, also the per-path
/// conditional remainder `R_δ = F − E_{T,δ}F − Z_δ`.
pub fn remainder_bundle(
    f: &dyn GridFunctional,
    fam: &dyn FamilyBuilder,
    w: &Window,
    batch: &PathBatch,
    lambda_star: f64,
    nested: Option<NestedOpts>,
) -> Result<Vec<Remainder>> {
    check_order(f, 1)?;
    batch.check_window(w)?;
    if let Some(o) = nested {
        o.check()?;
    }
    let ctx = Ctx::of(batch);
    let out = par_map(batch.n_paths, |p| -> Result<Remainder> {
        let dw = batch.path(p);
        let mut rem = remainder_at(f, fam, w, &ctx, &dw, lambda_star)?;
        if let Some(opts) = nested {
            let sampler = batch.inner_sampler(w, opts.antithetic, 0);
            let mut scratch = dw.clone();
            let acc = nested_for_path(&sampler, p, &mut scratch, opts, rem.f.len(), |x, o| o.copy_from_slice(&f.eval(x, &ctx)));
            rem.r = Some(
                acc.iter()
                    .enumerate()
                    .map(|(c, a)| {
                        let e = a.estimate(batch.seed);
                        McEstimate { mean: rem.f[c] - e.mean - rem.z[c], ..e }
                    })
                    .collect(),
            );
        }
        Ok(rem)
    });
    out.into_iter().collect()
}

/// `U_δ = Π_{i≤4} ψ(Q_i)·φ(Q₅)` for a functional, family and window.
pub struct DeltaLocalization<'a> {
    pub f: &'a dyn GridFunctional,
    pub fam: &'a dyn FamilyBuilder,
    pub window: Window,
    pub params: LocalizerParams,
}

impl<'a> DeltaLocalization<'a> {
    pub fn new(f: &'a dyn GridFunctional, fam: &'a dyn FamilyBuilder, window: Window, params: LocalizerParams) -> Result<Self> {
        params.check()?;
        if (params.delta - window.delta).abs() > 1e-12 * window.delta {
            return invalid("localizer δ differs from the window's δ");
        }
        if params.y.len() != f.dim() {
            return invalid("y must have the dimension of F");
        }
        Ok(Self { f, fam, window, params })
    }

    fn build(&self, dw: &[f64], ctx: &Ctx, order: u8, fj: &[Jet]) -> Option<(f64, Jet)> {
        let d = ctx.drivers;
        let w = &self.window;
        let act = w.first_cell * d..w.end_cell * d;
        let a = self.fam.build(dw, ctx, w);
        let spec = lambda_min(&a).ok()?;
        let lifted = lift(dw, act.clone(), order + 1);
        let zj = z_of(&a, w, &lifted, d);
        let g = if order == 0 { Jet::constant(g_of(fj, &zj, act.len(), ctx.step)) } else { g_jet(fj, &zj, act.len(), ctx.step) };
        let (q1, q2) = window_q(&lifted, w, d, ctx.step);
        let dist_sq = crate::jet::sum(fj.iter().zip(&self.params.y).map(|(j, y)| (j.clone() - *y).square()));
        let inp = QInputs {
            dist_sq: dist_sq.truncate(order),
            g: g.truncate(order),
            q1_sq: q1.truncate(order),
            q2: q2.truncate(order),
            abar: spec.abar,
            lambda: spec.lambda,
        };
        let l = self.params.ln_u_delta(d, &inp)?;
        Some((l.value().exp(), l))
    }

    /// Per-path inputs to the localizers, for tabulation.
    pub fn quantities(&self, dw: &[f64], ctx: &Ctx) -> crate::localize::PathQuantities {
        let d = ctx.drivers;
        let w = &self.window;
        let act = w.first_cell * d..w.end_cell * d;
        let a = self.fam.build(dw, ctx, w);
        let spec = lambda_min(&a).unwrap_or(crate::nondegen::SpectrumReport { lambda: 0.0, abar: a.abar(), xi: vec![] });
        let lifted = lift(dw, act.clone(), 1);
        let fj = self.f.eval_jet(&lifted, ctx);
        let zj = z_of(&a, w, &lifted, d);
        let (q1, q2) = window_q(dw, w, d, ctx.step);
        crate::localize::PathQuantities {
            f: fj.iter().map(|j| j.value()).collect(),
            g: g_of(&fj, &zj, act.len(), ctx.step),
            abar: spec.abar,
            lambda: spec.lambda,
            q1: q1.sqrt(),
            q2,
        }
    }
}

impl Localization for DeltaLocalization<'_> {
    fn ln_u(&self, dw: &[f64], ctx: &Ctx, active: std::ops::Range<usize>, order: u8) -> Option<(f64, Jet)> {
        let d = ctx.drivers;
        let act = self.window.first_cell * d..self.window.end_cell * d;
        assert!(order == 0 || active == act, "U_δ is differentiated on its own window only");
        let fj = self.f.eval_jet(&lift(dw, act, order + 1), ctx);
        self.build(dw, ctx, order, &fj)
    }
    fn uses_weight_functional(&self) -> bool {
        true
    }
    fn ln_u_from(&self, dw: &[f64], ctx: &Ctx, _active: std::ops::Range<usize>, order: u8, f_jets: &[Jet]) -> Option<(f64, Jet)> {
        self.build(dw, ctx, order, f_jets)
    }
}

/// Gauss–Jordan inverse with partial pivoting on values.
pub fn invert<S: Scalar>(m: &[Vec<S>]) -> Option<Vec<Vec<S>>> {
    let n = m.len();
    let mut a: Vec<Vec<S>> = m.to_vec();
    let mut inv: Vec<Vec<S>> = (0..n).map(|i| (0..n).map(|j| S::cst(if i == j { 1.0 } else { 0.0 })).collect()).collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&x, &y| a[x][c].value().abs().total_cmp(&a[y][c].value().abs()))?;
        if a[piv][c].value() == 0.0 {
            return None;
        }
        a.swap(c, piv);
        inv.swap(c, piv);
        let r = a[c][c].recip();
        for j in 0..n {
            a[c][j] = a[c][j].clone() * r.clone();
            inv[c][j] = inv[c][j].clone() * r.clone();
        }
        for i in 0..n {
            if i == c {
                continue;
            }
            let fct = a[i][c].clone();
            if fct.is_zero_const() {
                continue;
            }
            for j in 0..n {
                a[i][j] = a[i][j].clone() - fct.clone() * a[c][j].clone();
                inv[i][j] = inv[i][j].clone() - fct.clone() * inv[c][j].clone();
            }
        }
    }
    Some(inv)
}

/// Weights of one path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathWeights {
    pub u: f64,
    pub f: Vec<f64>,
    /// `H_{i,U}(F,V)`, `i = 1…n`.
    pub first: Vec<f64>,
    /// `H_{(a,b),U}(F,V) = H_{b,U}(F, H_{a,U}(F,V))`, when depth 2 was asked.
    pub second: Vec<Vec<f64>>,
}

struct Assembly {
    width: usize,
    h: f64,
    df: Vec<Vec<Jet>>,
    lf: Vec<Jet>,
    sinv: Vec<Vec<Jet>>,
    /// `⟨D ln U, DFʲ⟩_δ`.
    dlog: Vec<Jet>,
}

impl Assembly {
    fn inner(&self, g: &Jet, j: usize) -> Jet {
        if g.is_constant() {
            return Jet::constant(0.0);
        }
        let mut s = Jet::constant(0.0);
        for e in 0..self.width {
            let pe = g.partial(e);
            if pe.is_zero_const() {
                continue;
            }
            s = s + pe * self.df[j][e].clone();
        }
        s * self.h
    }

    /// `H_{i,U}(F,V)` as a jet.
    fn weight(&self, i: usize, v: &Jet) -> Jet {
        let n = self.lf.len();
        let mut out = Jet::constant(0.0);
        for j in 0..n {
            let a = v.clone() * self.sinv[j][i].clone();
            let t1 = a.clone() * self.lf[j].clone();
            let t2 = self.inner(&a, j);
            let t3 = a * self.dlog[j].clone();
            out = out + t1 - t2 - t3;
        }
        out
    }
}

/// Weights for one path. `depth` is 1 or 2; `v` defaults to `V = 1`.
/// Returns `Ok(None)` when `U = 0`.
#[allow(clippy::too_many_arguments)]
pub fn weights_at(
    f: &dyn GridFunctional,
    v: Option<&dyn GridFunctional>,
    loc: &dyn Localization,
    w: &Window,
    ctx: &Ctx,
    dw: &[f64],
    depth: usize,
    path: usize,
) -> Result<Option<PathWeights>> {
    if !(1..=2).contains(&depth) {
        return Err(Error::UnsupportedOrder { requested: depth + 1, declared: 3 });
    }
    let q = depth + 1;
    check_order(f, q)?;
    let d = ctx.drivers;
    let act = w.first_cell * d..w.end_cell * d;
    let width = act.len();
    let h = ctx.step;
    let lifted = lift(dw, act.clone(), q as u8);
    let fj = f.eval_jet(&lifted, ctx);
    let n = fj.len();
    let lu = if loc.uses_weight_functional() {
        loc.ln_u_from(dw, ctx, act.clone(), depth as u8, &fj)
    } else {
        loc.ln_u(dw, ctx, act.clone(), depth as u8)
    };
    let Some((u, lnu)) = lu else { return Ok(None) };
    if u == 0.0 {
        return Ok(None);
    }
    let df: Vec<Vec<Jet>> = fj.iter().map(|j| (0..width).map(|e| j.partial(e)).collect()).collect();
    let mut sigma = vec![vec![Jet::constant(0.0); n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = Jet::constant(0.0);
            for e in 0..width {
                s = s + df[i][e].clone() * df[j][e].clone();
            }
            let s = s * h;
            sigma[i][j] = s.clone();
            sigma[j][i] = s;
        }
    }
    let vals = DMatrix::from_fn(n, n, |i, j| sigma[i][j].value());
    let det = vals.determinant();
    if is_singular(det, w.delta, n) {
        return Err(Error::DegenerateCovariance { path, det });
    }
    let sinv = invert(&sigma).ok_or(Error::DegenerateCovariance { path, det })?;
    let lf: Vec<Jet> = (0..n)
        .map(|j| {
            let mut s = Jet::constant(0.0);
            for (e, x) in lifted[act.clone()].iter().enumerate() {
                let de = &df[j][e];
                if de.is_zero_const() {
                    continue;
                }
                s = s + x.clone() * de.clone() - de.partial(e) * h;
            }
            s
        })
        .collect();
    let mut asm = Assembly { width, h, df, lf, sinv, dlog: vec![] };
    asm.dlog = (0..n).map(|j| asm.inner(&lnu, j)).collect();
    let vj = match v {
        Some(v) => v.eval_jet(&lift(dw, act.clone(), depth as u8), ctx)[0].clone(),
        None => Jet::constant(1.0),
    };
    let first_jets: Vec<Jet> = (0..n).map(|i| asm.weight(i, &vj)).collect();
    let second = if depth == 2 {
        first_jets.iter().map(|ha| (0..n).map(|b| asm.weight(b, ha).value()).collect()).collect()
    } else {
        vec![]
    };
    Ok(Some(PathWeights { u, f: fj.iter().map(|j| j.value()).collect(), first: first_jets.iter().map(|j| j.value()).collect(), second }))
}

/// Per-path `H_{i,U}(F,V)` for `i = 1…n`; paths with `U = 0` give zeros.
pub fn ibp_weight(
    f: &dyn GridFunctional,
    v: Option<&dyn GridFunctional>,
    loc: &dyn Localization,
    w: &Window,
    batch: &PathBatch,
) -> Result<Vec<Vec<f64>>> {
    batch.check_window(w)?;
    let ctx = Ctx::of(batch);
    let n = f.dim();
    par_map(batch.n_paths, |p| {
        let dw = batch.path(p);
        Ok(weights_at(f, v, loc, w, &ctx, &dw, 1, p)?.map_or(vec![0.0; n], |pw| pw.first))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTree {
    pub alpha: Vec<usize>,
    pub values: Vec<f64>,
    pub u: Vec<f64>,
    /// Sub-weights built on the way, outermost last.
    pub trace: Vec<Vec<usize>>,
}

/// `H_{α,U}(F,1)` for `|α| ≤ 2` (zero-based indices).
pub fn ibp_weight_iterated(alpha: &[usize], f: &dyn GridFunctional, loc: &dyn Localization, w: &Window, batch: &PathBatch) -> Result<WeightTree> {
    if alpha.is_empty() || alpha.len() > 2 {
        return Err(Error::UnsupportedOrder { requested: alpha.len() + 1, declared: 3 });
    }
    if alpha.iter().any(|&a| a >= f.dim()) {
        return invalid("multi-index entry out of range");
    }
    batch.check_window(w)?;
    let ctx = Ctx::of(batch);
    let rows: Vec<(f64, f64)> = par_map(batch.n_paths, |p| {
        let dw = batch.path(p);
        Ok(match weights_at(f, None, loc, w, &ctx, &dw, alpha.len(), p)? {
            None => (0.0, 0.0),
            Some(pw) if alpha.len() == 1 => (pw.u, pw.first[alpha[0]]),
            Some(pw) => (pw.u, pw.second[alpha[0]][alpha[1]]),
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let trace = (1..=alpha.len()).map(|k| alpha[..k].to_vec()).collect();
    let (u, values) = rows.into_iter().unzip();
    Ok(WeightTree { alpha: alpha.to_vec(), values, u, trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub delta: f64,
    pub norm: McEstimate,
    /// Fraction of paths with `U_δ > 0`.
    pub support: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormScaling {
    pub rows: Vec<NormRow>,
    pub skipped: Vec<f64>,
    pub slope: Option<f64>,
    /// `−θ|α|` with `θ = 4n + 2`.
    pub bound_slope: f64,
}

/// `‖H_{α,U_δ}(F,1)‖_{U_δ,p} = E(|H|^p U_δ)^{1/p}` per `δ` and its log-log slope.
#[allow(clippy::too_many_arguments)]
pub fn weight_norm_scaling(
    f: &dyn GridFunctional,
    fam: &dyn FamilyBuilder,
    base: &LocalizerParams,
    t: f64,
    deltas: &[f64],
    alpha: &[usize],
    p: f64,
    batch: &PathBatch,
) -> Result<NormScaling> {
    let (mut rows, mut skipped) = (Vec::new(), Vec::new());
    for &delta in deltas {
        let w = Window::new(&batch.grid, t, delta)?;
        let params = LocalizerParams { delta, ..base.clone() };
        let loc = DeltaLocalization::new(f, fam, w, params)?;
        let tree = ibp_weight_iterated(alpha, f, &loc, &w, batch)?;
        let hits = tree.u.iter().filter(|&&u| u > 0.0).count();
        if hits == 0 {
            skipped.push(delta);
            continue;
        }
        let samples: Vec<f64> = tree.values.iter().zip(&tree.u).map(|(h, u)| h.abs().powf(p) * u).collect();
        let e = estimate_of(&samples, batch.seed);
        let v = e.mean.powf(1.0 / p);
        let se = if e.mean > 0.0 { v / (p * e.mean) * e.se } else { 0.0 };
        rows.push(NormRow { delta, norm: McEstimate { mean: v, se, ..e }, support: hits as f64 / batch.n_paths as f64 });
    }
    let ds: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let ns: Vec<f64> = rows.iter().map(|r| r.norm.mean).collect();
    let n = f.dim() as f64;
    Ok(NormScaling { slope: crate::stats::loglog_slope(&ds, &ns), bound_slope: -(4.0 * n + 2.0) * alpha.len() as f64, rows, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcalc::{BrownianAt, BrownianSquare, LinearAndSquare};
    use crate::localize::NoLocalization;
    use crate::timegrid::{make_grid, sample_increments};

    fn unit_family(_: &[f64], _: &Ctx, w: &Window) -> CoefficientFamily {
        CoefficientFamily::new(vec![vec![1.0]], vec![vec![vec![0.0]]], w.first_cell).unwrap()
    }

    #[test]
    fn covariance_of_brownian_motion() {
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_increments(g, 1, 3, 1).unwrap();
        let w = Window::new(&g, 1.0, 0.25).unwrap();
        for c in window_covariance(&BrownianAt { node: 8, driver: 0 }, &w, &b).unwrap() {
            assert!((c.matrix[(0, 0)] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn z_delta_of_unit_family_is_the_increment() {
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_increments(g, 1, 4, 2).unwrap();
        let w = Window::new(&g, 1.0, 0.5).unwrap();
        let z = z_delta(&unit_family, &w, &b).unwrap();
        for p in 0..4 {
            let inc: f64 = b.path(p)[4..].iter().sum();
            assert!((z[p][0] - inc).abs() < 1e-14);
        }
    }

    #[test]
    fn weight_of_terminal_value() {
        let g = make_grid(2.0, 4).unwrap();
        let b = sample_increments(g, 1, 5, 3).unwrap();
        let w = Window::new(&g, 2.0, 2.0).unwrap();
        let f = BrownianAt { node: 4, driver: 0 };
        let hs = ibp_weight(&f, None, &NoLocalization, &w, &b).unwrap();
        let h2 = ibp_weight_iterated(&[0, 0], &f, &NoLocalization, &w, &b).unwrap();
        for p in 0..5 {
            let wt: f64 = b.path(p).iter().sum();
            assert!((hs[p][0] - wt / 2.0).abs() < 1e-13);
            assert!((h2.values[p] - (wt * wt - 2.0) / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn square_has_zero_g_delta() {
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_increments(g, 1, 10, 4).unwrap();
        let w = Window::new(&g, 1.0, 0.5).unwrap();
        let fam = |dw: &[f64], _: &Ctx, w: &Window| {
            let wt: f64 = dw[..w.first_cell].iter().sum();
            CoefficientFamily::new(vec![vec![2.0 * wt]], vec![vec![vec![2.0]]], w.first_cell).unwrap()
        };
        // D_e(W_T²) = 2W_T, D_e Z = 2W_{T−δ} + 2(W_{t_k}−W_{T−δ}) + 2(W_T − W_{t_{k+1}}):
        // the gap on cell k is 2ΔW_k.
        for r in remainder_bundle(&BrownianSquare { node: 8, driver: 0 }, &fam, &w, &b, 0.5, None).unwrap().iter().zip(0..) {
            let dw = b.path(r.1);
            let want: f64 = dw[4..].iter().map(|x| 4.0 * x * x).sum::<f64>() * 0.125;
            assert!((r.0.g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_of_jet_matrix() {
        let g = make_grid(1.0, 3).unwrap();
        let b = sample_increments(g, 1, 1, 5).unwrap();
        let ctx = Ctx::of(&b);
        let f = LinearAndSquare { node: 3 };
        let jets = f.eval_jet(&lift(&b.path(0), 0..3, 2), &ctx);
        let m = vec![vec![jets[0].clone() + 2.0, jets[1].clone()], vec![jets[1].clone(), jets[0].clone() * jets[0].clone() + 1.0]];
        let inv = invert(&m).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = Jet::constant(0.0);
                for k in 0..2 {
                    s = s + m[i][k].clone() * inv[k][j].clone();
                }
                assert!((s.value() - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                for e in 0..3 {
                    assert!(s.grad(e).abs() < 1e-9);
                }
            }
        }
    }
}
