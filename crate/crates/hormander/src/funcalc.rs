//! Wiener functionals as smooth maps of the increment matrix, their grid
//! Malliavin derivatives, the Ornstein–Uhlenbeck operator, Sobolev norms and a
//! Clark–Ocone residual.
//!
//! `D^i_s F` for `s` in cell `k` is `∂F/∂ΔW_k^i`. Derivatives are taken either
//! over every cell ([`Scope::Full`]) or over the cells of a window
//! ([`Scope::Window`]); every call names its scope.

use crate::error::{invalid, Error, Result};
use crate::jet::{Jet, Scalar};
use crate::stats::{estimate_of, par_map, Accum, McEstimate};
use crate::timegrid::{nested_for_path, NestedOpts, PathBatch, TimeGrid, Window};
use std::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ctx {
    pub drivers: usize,
    pub cells: usize,
    pub step: f64,
}

impl Ctx {
    pub fn new(grid: &TimeGrid, drivers: usize) -> Self {
        Self { drivers, cells: grid.cells, step: grid.step }
    }
    pub fn of(batch: &PathBatch) -> Self {
        Self::new(&batch.grid, batch.drivers)
    }
    pub fn entries(&self) -> usize {
        self.cells * self.drivers
    }
}

/// Which increments are differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scope {
    Full,
    Window(Window),
}

impl Scope {
    pub fn cells(&self, ctx: &Ctx) -> Range<usize> {
        match self {
            Scope::Full => 0..ctx.cells,
            Scope::Window(w) => w.cells(),
        }
    }
    pub fn entries(&self, ctx: &Ctx) -> Range<usize> {
        let c = self.cells(ctx);
        c.start * ctx.drivers..c.end * ctx.drivers
    }
}

/// A functional written once, generically over the scalar type.
pub trait SmoothMap: Send + Sync {
    fn dim(&self) -> usize;
    fn name(&self) -> String;
    fn smoothness(&self) -> usize {
        3
    }
    fn map<S: Scalar>(&self, dw: &[S], ctx: &Ctx) -> Vec<S>;
}

/// Object-safe view of a functional: values and jets.
pub trait GridFunctional: Send + Sync {
    fn dim(&self) -> usize;
    fn name(&self) -> String;
    fn smoothness(&self) -> usize;
    fn eval(&self, dw: &[f64], ctx: &Ctx) -> Vec<f64>;
    fn eval_jet(&self, dw: &[Jet], ctx: &Ctx) -> Vec<Jet>;
}

impl<T: SmoothMap> GridFunctional for T {
    fn dim(&self) -> usize {
        SmoothMap::dim(self)
    }
    fn name(&self) -> String {
        SmoothMap::name(self)
    }
    fn smoothness(&self) -> usize {
        SmoothMap::smoothness(self)
    }
    fn eval(&self, dw: &[f64], ctx: &Ctx) -> Vec<f64> {
        self.map(dw, ctx)
    }
    fn eval_jet(&self, dw: &[Jet], ctx: &Ctx) -> Vec<Jet> {
        self.map(dw, ctx)
    }
}

/// Increments as jets: entries in `active` become variables.
pub fn lift(dw: &[f64], active: Range<usize>, order: u8) -> Vec<Jet> {
    let k = active.len();
    dw.iter()
        .enumerate()
        .map(|(e, &x)| if active.contains(&e) { Jet::var(x, e - active.start, k, order) } else { Jet::constant(x) })
        .collect()
}

pub fn check_order(f: &dyn GridFunctional, order: usize) -> Result<()> {
    if order > f.smoothness() || order > 3 {
        return Err(Error::UnsupportedOrder { requested: order, declared: f.smoothness().min(3) });
    }
    Ok(())
}

/// Jets of `f` at `dw` with the scope's increments active.
pub fn eval_jets(f: &dyn GridFunctional, dw: &[f64], ctx: &Ctx, scope: &Scope, order: usize) -> Result<Vec<Jet>> {
    check_order(f, order)?;
    Ok(f.eval_jet(&lift(dw, scope.entries(ctx), order as u8), ctx))
}

/// Brownian value at a node: `Σ_{k<node} ΔW_k`.
pub fn brownian<S: Scalar>(dw: &[S], ctx: &Ctx, node: usize, driver: usize) -> S {
    crate::jet::sum((0..node).map(|k| dw[k * ctx.drivers + driver].clone()))
}

/// `W^i_{t_node}`.
#[derive(Clone, Debug)]
pub struct BrownianAt {
    pub node: usize,
    pub driver: usize,
}

impl SmoothMap for BrownianAt {
    fn dim(&self) -> usize {
        1
    }
    fn name(&self) -> String {
        format!("W{}[{}]", self.driver + 1, self.node)
    }
    fn map<S: Scalar>(&self, dw: &[S], ctx: &Ctx) -> Vec<S> {
        vec![brownian(dw, ctx, self.node, self.driver)]
    }
}

/// `Σ_e c_e ΔW_e` (first chaos).
#[derive(Clone, Debug)]
pub struct LinearFunctional {
    pub coeffs: Vec<f64>,
}

impl SmoothMap for LinearFunctional {
    fn dim(&self) -> usize {
        1
    }
    fn name(&self) -> String {
        "linear".into()
    }
    fn map<S: Scalar>(&self, dw: &[S], _: &Ctx) -> Vec<S> {
        vec![crate::jet::sum(self.coeffs.iter().zip(dw).filter(|(c, _)| **c != 0.0).map(|(c, x)| x.clone() * *c))]
    }
}

/// `(W^i_{t_node})²`.
#[derive(Clone, Debug)]
pub struct BrownianSquare {
    pub node: usize,
    pub driver: usize,
}

impl SmoothMap for BrownianSquare {
    fn dim(&self) -> usize {
        1
    }
    fn name(&self) -> String {
        format!("W{}[{}]^2", self.driver + 1, self.node)
    }
    fn map<S: Scalar>(&self, dw: &[S], ctx: &Ctx) -> Vec<S> {
        vec![brownian(dw, ctx, self.node, self.driver).square()]
    }
}

/// `W_t + ε sin W_t` on driver 1: nonlinear with derivative ≥ 1 − ε.
#[derive(Clone, Debug)]
pub struct Wobble {
    pub node: usize,
    pub eps: f64,
}

impl SmoothMap for Wobble {
    fn dim(&self) -> usize {
        1
    }
    fn name(&self) -> String {
        format!("W+{}sinW", self.eps)
    }
    fn map<S: Scalar>(&self, dw: &[S], ctx: &Ctx) -> Vec<S> {
        let w = brownian(dw, ctx, self.node, 0);
        vec![w.clone() + w.sin() * self.eps]
    }
}

/// Two-dimensional functional of `(W¹_t, W²_t)`:
/// `(W¹ + 0.2 ln cosh W², W² + 0.25 sin W¹)`, Jacobian determinant ≥ 0.95.
#[derive(Clone, Debug)]
pub struct Coupled {
    pub node: usize,
}

impl SmoothMap for Coupled {
    fn dim(&self) -> usize {
        2
    }
    fn name(&self) -> String {
        "coupled".into()
    }
    fn map<S: Scalar>(&self, dw: &[S], ctx: &Ctx) -> Vec<S> {
        let u = brownian(dw, ctx, self.node, 0);
        let v = brownian(dw, ctx, self.node, 1);
        vec![u.clone() + v.ln_cosh() * 0.2, v + u.sin() * 0.25]
    }
}

/// `(W_t, W_t²)` on driver 1.
#[derive(Clone, Debug)]
pub struct LinearAndSquare {
    pub node: usize,
}

impl SmoothMap for LinearAndSquare {
    fn dim(&self) -> usize {
        2
    }
    fn name(&self) -> String {
        "(W,W^2)".into()
    }
    fn map<S: Scalar>(&self, dw: &[S], ctx: &Ctx) -> Vec<S> {
        let w = brownian(dw, ctx, self.node, 0);
        vec![w.clone(), w.square()]
    }
}

#[derive(Clone, Debug)]
pub struct ConstantFunctional {
    pub value: f64,
}

impl SmoothMap for ConstantFunctional {
    fn dim(&self) -> usize {
        1
    }
    fn name(&self) -> String {
        format!("const({})", self.value)
    }
    fn map<S: Scalar>(&self, _: &[S], _: &Ctx) -> Vec<S> {
        vec![S::cst(self.value)]
    }
}

/// Per-path derivative tensors `∂^r F / ∂ΔW_{e₁}…∂ΔW_{e_r}` over a scope.
///
/// Values are stored once per multiset of slots, so the tensor is exactly
/// symmetric under permutation of `(cell, driver)` slots.
#[derive(Clone, Debug)]
pub struct DerivTensor {
    pub order: usize,
    pub dim: usize,
    pub first_entry: usize,
    pub width: usize,
    pub drivers: usize,
    values: Vec<Vec<f64>>,
}

impl DerivTensor {
    fn index(&self, out: usize, slots: &[usize]) -> usize {
        let mut s: Vec<usize> = slots.to_vec();
        s.sort_unstable();
        s.iter().fold(out, |acc, &e| acc * self.width + e)
    }

    /// Derivative at path `p`, output `out`, slots given as `(cell, driver)`.
    pub fn get(&self, p: usize, out: usize, slots: &[(usize, usize)]) -> f64 {
        assert_eq!(slots.len(), self.order);
        let rel: Vec<usize> = slots.iter().map(|&(c, i)| c * self.drivers + i - self.first_entry).collect();
        self.values[p][self.index(out, &rel)]
    }

    pub fn n_paths(&self) -> usize {
        self.values.len()
    }
}

pub fn malliavin_derivative(f: &dyn GridFunctional, r: usize, batch: &PathBatch, scope: &Scope) -> Result<DerivTensor> {
    if r == 0 {
        return invalid("derivative order must be at least 1");
    }
    check_order(f, r)?;
    let ctx = Ctx::of(batch);
    let range = scope.entries(&ctx);
    let width = range.len();
    let n = f.dim();
    let values = par_map(batch.n_paths, |p| {
        let jets = f.eval_jet(&lift(&batch.path(p), range.clone(), r as u8), &ctx);
        let mut v = vec![0.0; n * width.pow(r as u32)];
        for (o, j) in jets.iter().enumerate() {
            match r {
                1 => (0..width).for_each(|a| v[o * width + a] = j.grad(a)),
                2 => {
                    for a in 0..width {
                        for b in a..width {
                            let x = j.hess(a, b);
                            v[(o * width + a) * width + b] = x;
                            v[(o * width + b) * width + a] = x;
                        }
                    }
                }
                _ => {
                    for a in 0..width {
                        for b in a..width {
                            for c in b..width {
                                let x = j.third(a, b, c);
                                for (i1, i2, i3) in [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
                                    v[((o * width + i1) * width + i2) * width + i3] = x;
                                }
                            }
                        }
                    }
                }
            }
        }
        v
    });
    Ok(DerivTensor { order: r, dim: n, first_entry: range.start, width, drivers: batch.drivers, values })
}

/// `LF = Σ ΔW_e ∂_e F − h Σ ∂²_{ee} F` for jets of order ≥ 2 over `active`.
pub fn ou_from_jet(j: &Jet, dw: &[f64], active: Range<usize>, h: f64) -> f64 {
    let mut s = 0.0;
    for (a, e) in active.enumerate() {
        s += dw[e] * j.grad(a) - h * j.hess(a, a);
    }
    s
}

/// Per-path `LF` (or `L_δ F` on a window scope), one entry per component.
pub fn ou_operator(f: &dyn GridFunctional, batch: &PathBatch, scope: &Scope) -> Result<Vec<Vec<f64>>> {
    check_order(f, 2)?;
    let ctx = Ctx::of(batch);
    let range = scope.entries(&ctx);
    Ok(par_map(batch.n_paths, |p| {
        let dw = batch.path(p);
        let jets = f.eval_jet(&lift(&dw, range.clone(), 2), &ctx);
        jets.iter().map(|j| ou_from_jet(j, &dw, range.clone(), ctx.step)).collect()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SobolevNorms {
    pub norm: McEstimate,
    pub seminorm: Option<McEstimate>,
}

fn power_mean(samples: &[f64], p: f64, seed: u64) -> (f64, f64) {
    let e = estimate_of(samples, seed);
    if e.mean <= 0.0 {
        return (0.0, 0.0);
    }
    let v = e.mean.powf(1.0 / p);
    (v, v / (p * e.mean) * e.se)
}

/// All driver multi-indices of length `r`.
fn driver_tuples(d: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..r {
        out = out.into_iter().flat_map(|t| (0..d).map(move |i| [t.clone(), vec![i]].concat())).collect();
    }
    out
}

/// Monte Carlo `‖F‖_{k,p}` and, when `q` is given, `|||F|||_{k,p,q}`.
/// Time integrals are `h`-weighted sums over the scope; standard errors
/// come from the delta method and are added across terms.
pub fn sobolev_norm_estimate(
    f: &dyn GridFunctional,
    k: usize,
    p: u32,
    batch: &PathBatch,
    scope: &Scope,
    q: Option<f64>,
) -> Result<SobolevNorms> {
    if p == 0 || p % 2 == 1 {
        return invalid(format!("p must be a positive even integer, got {p}"));
    }
    check_order(f, k)?;
    let ctx = Ctx::of(batch);
    let d = ctx.drivers;
    let cells = scope.cells(&ctx);
    let range = scope.entries(&ctx);
    let h = ctx.step;
    let n = f.dim();
    let pf = p as f64;
    // Layout per path: [|F^i|^p for i] then per (r, α, i): Y values, then seminorm terms.
    let tuples: Vec<(usize, Vec<usize>)> = (1..=k).flat_map(|r| driver_tuples(d, r).into_iter().map(move |a| (r, a))).collect();
    let semi_tuples: Vec<usize> = tuples.iter().enumerate().filter(|(_, (r, _))| *r >= 3).map(|(i, _)| i).collect();
    let per_path = par_map(batch.n_paths, |pi| {
        let dw = batch.path(pi);
        let jets = f.eval_jet(&lift(&dw, range.clone(), k as u8), &ctx);
        let mut row = Vec::with_capacity(n * (1 + tuples.len() + semi_tuples.len()));
        for j in &jets {
            row.push(j.value().abs().powf(pf));
        }
        let rel = |c: usize, i: usize| (c - cells.start) * d + i;
        let mut semi = Vec::new();
        for (r, alpha) in &tuples {
            for j in &jets {
                let (mut s2, mut sq) = (0.0, 0.0);
                let hr = h.powi(*r as i32);
                let mut visit = |x: f64| {
                    s2 += x * x;
                    if let Some(q) = q {
                        sq += x.abs().powf(q);
                    }
                };
                match r {
                    1 => cells.clone().for_each(|c| visit(j.grad(rel(c, alpha[0])))),
                    2 => {
                        for c1 in cells.clone() {
                            for c2 in cells.clone() {
                                visit(j.hess(rel(c1, alpha[0]), rel(c2, alpha[1])));
                            }
                        }
                    }
                    _ => {
                        for c1 in cells.clone() {
                            for c2 in cells.clone() {
                                for c3 in cells.clone() {
                                    visit(j.third(rel(c1, alpha[0]), rel(c2, alpha[1]), rel(c3, alpha[2])));
                                }
                            }
                        }
                    }
                }
                row.push((hr * s2).powf(pf / 2.0));
                if let (Some(q), true) = (q, *r >= 3) {
                    semi.push((hr * sq).powf(pf / q));
                }
            }
        }
        row.extend(semi);
        row
    });
    let col = |c: usize| -> Vec<f64> { per_path.iter().map(|r| r[c]).collect() };
    let terms = n * (1 + tuples.len());
    let (mut norm, mut norm_se) = (0.0, 0.0);
    for c in 0..terms {
        let (v, se) = power_mean(&col(c), pf, batch.seed);
        norm += v;
        norm_se += se;
    }
    let mk = |mean: f64, se: f64| McEstimate { mean, se, level: 0.95, count: batch.n_paths, seed: batch.seed };
    let seminorm = q.map(|_| {
        let (mut s, mut se_s) = (0.0, 0.0);
        for c in terms..per_path[0].len() {
            let (v, se) = power_mean(&col(c), pf, batch.seed);
            s += v;
            se_s += se;
        }
        mk(s, se_s)
    });
    Ok(SobolevNorms { norm: mk(norm, norm_se), seminorm })
}

/// Exact conditional expectations for a specific functional.
pub trait CondExpOracle: Sync {
    /// `E(F | cells < from_cell)`.
    fn value(&self, dw: &[f64], ctx: &Ctx, from_cell: usize) -> f64;
    /// `E(D^i_{t_k} F | cells < k)`.
    fn derivative(&self, dw: &[f64], ctx: &Ctx, cell: usize, driver: usize) -> f64;
}

/// Exact oracle for [`BrownianSquare`]: `E(W_t² | F_s) = W_s² + (t − s)` and
/// `E(D_s W_t² | F_s) = 2W_s`.
impl CondExpOracle for BrownianSquare {
    fn value(&self, dw: &[f64], ctx: &Ctx, from_cell: usize) -> f64 {
        let k = from_cell.min(self.node);
        let w = brownian(dw, ctx, k, self.driver);
        w * w + (self.node - k) as f64 * ctx.step
    }
    fn derivative(&self, dw: &[f64], ctx: &Ctx, cell: usize, driver: usize) -> f64 {
        if driver != self.driver || cell >= self.node {
            return 0.0;
        }
        2.0 * brownian(dw, ctx, cell, driver)
    }
}

pub enum CondExp<'a> {
    Nested(NestedOpts),
    Exact(&'a dyn CondExpOracle),
}

/// Mean squared Clark–Ocone residual
/// `F − E_{T,δ}F − Σ_{k,i} E_{T,T−t_k}(D^i_{t_k}F) ΔW^i_k` over the window.
///
/// With nested sampling the inner-noise contribution to the square is
/// subtracted path by path, so the estimator is unbiased for the exact
/// residual's mean square.
pub fn clark_ocone_residual(
    f: &dyn GridFunctional,
    component: usize,
    w: &Window,
    batch: &PathBatch,
    cond: CondExp<'_>,
) -> Result<McEstimate> {
    check_order(f, 1)?;
    batch.check_window(w)?;
    let ctx = Ctx::of(batch);
    let d = ctx.drivers;
    if let CondExp::Nested(o) = &cond {
        o.check()?;
    }
    let samples = par_map(batch.n_paths, |p| {
        let dw = batch.path(p);
        let fv = f.eval(&dw, &ctx)[component];
        match &cond {
            CondExp::Exact(oracle) => {
                let mut r = fv - oracle.value(&dw, &ctx, w.first_cell);
                for k in w.cells() {
                    for i in 0..d {
                        r -= oracle.derivative(&dw, &ctx, k, i) * dw[k * d + i];
                    }
                }
                r * r
            }
            CondExp::Nested(opts) => {
                let mut scratch = dw.clone();
                let s0 = batch.inner_sampler(w, opts.antithetic, 0);
                let a0 = nested_for_path(&s0, p, &mut scratch, *opts, 1, |x, out| out[0] = f.eval(x, &ctx)[component]);
                let mut r = fv - a0[0].mean;
                let mut noise = a0[0].var() / a0[0].n as f64;
                for k in w.cells() {
                    scratch.copy_from_slice(&dw);
                    let tail = w.tail_from(k);
                    let sk = batch.inner_sampler(&tail, opts.antithetic, k as u64 + 1);
                    let ek: Vec<Accum> = nested_for_path(&sk, p, &mut scratch, *opts, 1, |x, out| {
                        let jets = f.eval_jet(&lift(x, k * d..(k + 1) * d, 1), &ctx);
                        out[0] = (0..d).map(|i| jets[component].grad(i) * dw[k * d + i]).sum();
                    });
                    r -= ek[0].mean;
                    noise += ek[0].var() / ek[0].n as f64;
                }
                r * r - noise
            }
        }
    });
    Ok(estimate_of(&samples, batch.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timegrid::{make_grid, sample_increments};

    #[test]
    fn derivative_of_terminal_value() {
        let g = make_grid(1.0, 4).unwrap();
        let b = sample_increments(g, 2, 3, 5).unwrap();
        let f = BrownianAt { node: 4, driver: 1 };
        let dt = malliavin_derivative(&f, 1, &b, &Scope::Full).unwrap();
        for p in 0..3 {
            for c in 0..4 {
                assert_eq!(dt.get(p, 0, &[(c, 1)]), 1.0);
                assert_eq!(dt.get(p, 0, &[(c, 0)]), 0.0);
            }
        }
    }

    #[test]
    fn square_residual_is_the_quadratic_variation_error() {
        for m in [8, 32] {
            let b = sample_increments(make_grid(1.0, m).unwrap(), 1, 40_000, 11).unwrap();
            let w = Window::new(&b.grid, 1.0, 1.0).unwrap();
            let f = BrownianSquare { node: m, driver: 0 };
            let r = clark_ocone_residual(&f, 0, &w, &b, CondExp::Exact(&f)).unwrap();
            // Σ(ΔW² − h) has second moment 2h
            assert!(r.within(2.0 / m as f64, 3.0), "{r:?}");
        }
    }

    #[test]
    fn ou_of_square() {
        let g = make_grid(1.0, 4).unwrap();
        let b = sample_increments(g, 1, 5, 9).unwrap();
        let lf = ou_operator(&BrownianSquare { node: 4, driver: 0 }, &b, &Scope::Full).unwrap();
        for p in 0..5 {
            let w: f64 = b.path(p).iter().sum();
            assert!((lf[p][0] - 2.0 * (w * w - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn order_checks() {
        let g = make_grid(1.0, 2).unwrap();
        let b = sample_increments(g, 1, 1, 1).unwrap();
        assert!(matches!(
            malliavin_derivative(&BrownianAt { node: 2, driver: 0 }, 4, &b, &Scope::Full),
            Err(Error::UnsupportedOrder { .. })
        ));
        assert!(sobolev_norm_estimate(&BrownianAt { node: 2, driver: 0 }, 1, 3, &b, &Scope::Full, None).is_err());
    }
}
