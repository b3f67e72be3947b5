//! Smooth localization: the bumps `ψ_a`, `φ_a`, their log-derivatives, the
//! localizing variables `Q₀…Q₅`, `U`, `U_δ` and `m_p(U)`.

use crate::error::{invalid, Error, Result};
use crate::funcalc::{lift, Ctx, GridFunctional, Scope};
use crate::jet::{Jet, Scalar};
use crate::stats::{estimate_of, par_map, McEstimate};
use crate::timegrid::PathBatch;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BumpKind {
    /// `ψ_a`: 1 on `[0,a)`, 0 from `2a`.
    NearZero,
    /// `φ_a`: 0 below `a/2`, 1 from `a`.
    FarFromZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localizer {
    pub kind: BumpKind,
    pub a: f64,
}

/// Where a point sits relative to a bump.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Flat,
    Band,
    Outside,
}

pub const PSI: Localizer = Localizer { kind: BumpKind::NearZero, a: 0.5 };
pub const PHI: Localizer = Localizer { kind: BumpKind::FarFromZero, a: 2.0 };

impl Localizer {
    pub fn psi(a: f64) -> Self {
        Self { kind: BumpKind::NearZero, a }
    }
    pub fn phi(a: f64) -> Self {
        Self { kind: BumpKind::FarFromZero, a }
    }

    pub fn region(&self, x: f64) -> Region {
        let a = self.a;
        match self.kind {
            BumpKind::NearZero if x < a => Region::Flat,
            BumpKind::NearZero if x < 2.0 * a => Region::Band,
            BumpKind::NearZero => Region::Outside,
            BumpKind::FarFromZero if x >= a => Region::Flat,
            BumpKind::FarFromZero if x > 0.5 * a => Region::Band,
            BumpKind::FarFromZero => Region::Outside,
        }
    }

    /// `[ln b, (ln b)′, (ln b)″, (ln b)‴]` inside the band.
    fn log_band(&self, x: f64) -> [f64; 4] {
        let a2 = self.a * self.a;
        match self.kind {
            BumpKind::NearZero => {
                let u = x - self.a;
                let d = a2 - u * u;
                [
                    1.0 - a2 / d,
                    -2.0 * a2 * u / (d * d),
                    -2.0 * a2 / (d * d) - 8.0 * a2 * u * u / (d * d * d),
                    -24.0 * a2 * u / (d * d * d) - 48.0 * a2 * u * u * u / (d * d * d * d),
                ]
            }
            BumpKind::FarFromZero => {
                let v = 2.0 * x - self.a;
                [1.0 - a2 / (v * v), 4.0 * a2 / v.powi(3), -24.0 * a2 / v.powi(4), 192.0 * a2 / v.powi(5)]
            }
        }
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        if x < 0.0 {
            return invalid(format!("bump argument must be non-negative, got {x}"));
        }
        Ok(self.eval(x))
    }

    /// Value without the sign check.
    pub fn eval(&self, x: f64) -> f64 {
        match self.region(x) {
            Region::Flat => 1.0,
            Region::Band => self.log_band(x)[0].exp(),
            Region::Outside => 0.0,
        }
    }

    /// `[ln b, …, (ln b)‴]` at `x`; `None` outside the support.
    pub fn log_jet(&self, x: f64) -> Option<[f64; 4]> {
        match self.region(x) {
            Region::Flat => Some([0.0; 4]),
            Region::Band => Some(self.log_band(x)),
            Region::Outside => None,
        }
    }

    pub fn log_derivative(&self, k: usize, x: f64) -> Result<f64> {
        if !(1..=3).contains(&k) {
            return invalid(format!("derivative order {k} not in 1..=3"));
        }
        self.log_jet(x).map(|j| j[k]).ok_or(Error::LogUndefined(x))
    }

    /// `ln b(q)` composed with a scalar; `None` outside the support.
    pub fn ln_of<S: Scalar>(&self, q: &S) -> Option<S> {
        match self.region(q.value()) {
            Region::Flat => Some(S::cst(0.0)),
            Region::Band => Some(q.unary(self.log_band(q.value()))),
            Region::Outside => None,
        }
    }

    /// Transition band `(lo, hi)`.
    pub fn band(&self) -> (f64, f64) {
        match self.kind {
            BumpKind::NearZero => (self.a, 2.0 * self.a),
            BumpKind::FarFromZero => (0.5 * self.a, self.a),
        }
    }
}

/// `sup_x b_a(x)|∂^k ln b_a(x)|^p · a^{pk}` on `points` uniform band points,
/// placed at `a·u_i` so that grids for different `a` correspond exactly.
pub fn scale_law_check(kind: BumpKind, k: usize, p: u32, a_list: &[f64], points: usize) -> Result<Vec<(f64, f64)>> {
    if k > 3 || points == 0 {
        return invalid("need k ≤ 3 and at least one point");
    }
    let unit = Localizer { kind, a: 1.0 }.band();
    a_list
        .iter()
        .map(|&a| {
            if !(a > 0.0) {
                return invalid("thresholds must be positive");
            }
            if k == 0 {
                return Ok((a, 1.0));
            }
            let loc = Localizer { kind, a };
            let mut sup: f64 = 0.0;
            for i in 0..points {
                let u = unit.0 + (unit.1 - unit.0) * (i as f64 + 0.5) / points as f64;
                let x = a * u;
                let j = loc.log_jet(x).ok_or(Error::LogUndefined(x))?;
                sup = sup.max(j[0].exp() * j[k].abs().powi(p as i32) * a.powi((p as usize * k) as i32));
            }
            Ok((a, sup))
        })
        .collect()
}

/// Localization parameters `(y, r, δ, λ*, γ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizerParams {
    pub y: Vec<f64>,
    pub r: f64,
    pub delta: f64,
    pub lambda_star: f64,
    pub gamma: f64,
}

impl LocalizerParams {
    pub fn check(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.gamma) {
            return invalid(format!("γ must lie in [0, 1/2), got {}", self.gamma));
        }
        if !(self.r > 0.0 && self.delta > 0.0 && self.lambda_star > 0.0) {
            return invalid("r, δ and λ* must be positive");
        }
        Ok(())
    }

    /// `λ = (1/2 − γ)/3`.
    pub fn lambda(&self) -> f64 {
        (0.5 - self.gamma) / 3.0
    }

    /// `δ^λ ≤ √λ*/(8d)`, under which `{U_δ ≠ 0}` sits inside `Λ_{T,δ}`.
    pub fn inclusion_regime(&self, d: usize) -> bool {
        self.delta.powf(self.lambda()) <= self.lambda_star.sqrt() / (8.0 * d as f64)
    }

    /// `Q₀…Q₅` from squared distances, so that jets avoid the square root
    /// where the bump is flat.
    pub fn q_values<S: Scalar>(&self, d: usize, inp: &QInputs<S>) -> [S; 6] {
        let (delta, lam, ls) = (self.delta, self.lambda(), self.lambda_star);
        let root = |x: &S| if x.value() > 0.0 { x.sqrt() } else { S::cst(0.0) };
        [
            root(&inp.dist_sq) * (1.0 / self.r),
            inp.g.clone() * (68.0 * (d as f64).powi(3) / (ls * delta * delta)),
            root(&inp.q1_sq) * delta.powf(-(self.gamma + 2.0 * lam)),
            inp.q2.clone(),
            S::cst(delta.powf(self.gamma + lam) * inp.abar),
            S::cst(inp.lambda / ls),
        ]
    }

    /// `ln U_δ = Σ_{i≤4} ln ψ(Q_i) + ln φ(Q₅)`; `None` when `U_δ = 0`.
    pub fn ln_u_delta<S: Scalar>(&self, d: usize, inp: &QInputs<S>) -> Option<S> {
        let dist = inp.dist_sq.value().max(0.0).sqrt() / self.r;
        let q1 = inp.q1_sq.value().max(0.0).sqrt() * self.delta.powf(-(self.gamma + 2.0 * self.lambda()));
        // skip the square roots entirely in the flat regions
        let q = self.q_values(d, inp);
        let mut s = S::cst(0.0);
        for (i, qi) in q.iter().enumerate().take(5) {
            let v = match i {
                0 if dist < PSI.a => S::cst(0.0),
                2 if q1 < PSI.a => S::cst(0.0),
                _ => PSI.ln_of(qi)?,
            };
            s = s + v;
        }
        Some(s + PHI.ln_of(&q[5])?)
    }

    pub fn ln_u<S: Scalar>(&self, dist_sq: &S) -> Option<S> {
        let dist = dist_sq.value().max(0.0).sqrt() / self.r;
        if dist < PSI.a {
            return Some(S::cst(0.0));
        }
        PSI.ln_of(&(dist_sq.sqrt() * (1.0 / self.r)))
    }
}

/// Path quantities entering `Q₀…Q₅`.
#[derive(Clone, Debug)]
pub struct QInputs<S> {
    /// `|F − y|²`.
    pub dist_sq: S,
    pub g: S,
    /// `|W_T − W_{T−δ}|²`.
    pub q1_sq: S,
    pub q2: S,
    pub abar: f64,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizedPath {
    pub q: [f64; 6],
    pub u: f64,
    pub u_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizerSet {
    pub params: LocalizerParams,
    pub paths: Vec<LocalizedPath>,
}

/// Per-path numbers fed to [`build_localizers`].
#[derive(Clone, Debug, PartialEq)]
pub struct PathQuantities {
    pub f: Vec<f64>,
    pub g: f64,
    pub abar: f64,
    pub lambda: f64,
    pub q1: f64,
    pub q2: f64,
}

pub fn build_localizers(params: &LocalizerParams, d: usize, paths: &[PathQuantities]) -> Result<LocalizerSet> {
    params.check()?;
    let out = paths
        .iter()
        .map(|pq| {
            if pq.f.len() != params.y.len() {
                return invalid("F and y differ in dimension");
            }
            let dist_sq: f64 = pq.f.iter().zip(&params.y).map(|(a, b)| (a - b).powi(2)).sum();
            let inp = QInputs { dist_sq, g: pq.g, q1_sq: pq.q1 * pq.q1, q2: pq.q2, abar: pq.abar, lambda: pq.lambda };
            let q = params.q_values(d, &inp);
            let u = PSI.eval(q[0]);
            let u_delta = q[..5].iter().map(|&x| PSI.eval(x)).product::<f64>() * PHI.eval(q[5]);
            Ok(LocalizedPath { q, u, u_delta })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalizerSet { params: params.clone(), paths: out })
}

impl LocalizerSet {
    /// `{U_δ ≠ 0} ⊆ {|F−y| ≤ r} ∩ Λ_{T,δ}` given per-path `Λ_{T,δ}` flags.
    pub fn inclusion_violations(&self, in_lambda_set: &[bool]) -> usize {
        self.paths
            .iter()
            .zip(in_lambda_set)
            .filter(|(p, &inside)| p.u_delta != 0.0 && !(p.q[0] <= 1.0 && inside))
            .count()
    }
}

/// A localization variable `U` with `ln U` available as a jet.
pub trait Localization: Sync {
    /// `U` and `ln U` with the entries in `active` as variables; `None`
    /// when `U = 0`.
    fn ln_u(&self, dw: &[f64], ctx: &Ctx, active: Range<usize>, order: u8) -> Option<(f64, Jet)>;
    /// True when `ln U` is built from the same functional as the weight, so
    /// its jets (one order above `ln U`) can be reused.
    fn uses_weight_functional(&self) -> bool {
        false
    }
    fn ln_u_from(&self, dw: &[f64], ctx: &Ctx, active: Range<usize>, order: u8, _f_jets: &[Jet]) -> Option<(f64, Jet)> {
        self.ln_u(dw, ctx, active, order)
    }
    /// `U` alone.
    fn u(&self, dw: &[f64], ctx: &Ctx) -> f64 {
        self.ln_u(dw, ctx, 0..0, 0).map_or(0.0, |(u, _)| u)
    }
}

/// `U ≡ 1`.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoLocalization;

impl Localization for NoLocalization {
    fn ln_u(&self, _: &[f64], _: &Ctx, _: Range<usize>, _: u8) -> Option<(f64, Jet)> {
        Some((1.0, Jet::constant(0.0)))
    }
}

/// `U = ψ_{1/2}(|F − y|/r)`.
pub struct PsiLocalization<'a> {
    pub f: &'a dyn GridFunctional,
    pub y: Vec<f64>,
    pub r: f64,
}

impl Localization for PsiLocalization<'_> {
    fn ln_u(&self, dw: &[f64], ctx: &Ctx, active: Range<usize>, order: u8) -> Option<(f64, Jet)> {
        let jets = self.f.eval_jet(&lift(dw, active, order), ctx);
        let dist_sq = crate::jet::sum(jets.iter().zip(&self.y).map(|(j, y)| (j.clone() - *y).square()));
        let p = LocalizerParams { y: self.y.clone(), r: self.r, delta: 1.0, lambda_star: 1.0, gamma: 0.0 };
        let l = p.ln_u(&dist_sq)?;
        Some((l.value().exp(), l))
    }
}

/// `|D g|² = Σ_e h (∂_e g)²` over the first-order part of a jet.
pub fn dnorm_sq(j: &Jet, width: usize, h: f64) -> f64 {
    if j.order() == 0 || j.is_constant() {
        return 0.0;
    }
    (0..width).map(|e| j.grad(e).powi(2)).sum::<f64>() * h
}

/// `m_p(U) = E(U |D ln U|^p)` over a scope.
pub fn m_p_estimate(loc: &dyn Localization, batch: &PathBatch, scope: &Scope, p: f64) -> McEstimate {
    let ctx = Ctx::of(batch);
    let active = scope.entries(&ctx);
    let width = active.len();
    let samples = par_map(batch.n_paths, |pi| {
        let dw = batch.path(pi);
        match loc.ln_u(&dw, &ctx, active.clone(), 1) {
            Some((u, l)) if u > f64::EPSILON => u * dnorm_sq(&l, width, ctx.step).powf(p / 2.0),
            _ => 0.0,
        }
    });
    estimate_of(&samples, batch.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_values() {
        assert_eq!(PSI.value(0.25).unwrap(), 1.0);
        assert!((PSI.value(0.75).unwrap() - (-1.0f64 / 3.0).exp()).abs() < 1e-15);
        assert!((PHI.value(1.5).unwrap() - (-3.0f64).exp()).abs() < 1e-15);
        assert_eq!(PSI.value(1.0).unwrap(), 0.0);
        assert_eq!(PHI.value(1.0).unwrap(), 0.0);
        assert!(PSI.value(-0.1).is_err());
    }

    #[test]
    fn log_derivatives() {
        assert!((PSI.log_derivative(1, 0.75).unwrap() + 0.5 * 0.25 / (0.1875 * 0.1875)).abs() < 1e-12);
        assert_eq!(PSI.log_derivative(2, 0.2).unwrap(), 0.0);
        assert!(matches!(PSI.log_derivative(1, 1.2), Err(Error::LogUndefined(_))));
        assert!(PHI.log_derivative(1, 0.9).is_err());
    }

    #[test]
    fn log_derivatives_match_finite_differences() {
        for loc in [PSI, PHI, Localizer::psi(0.3)] {
            let (lo, hi) = loc.band();
            for i in 1..20 {
                let x = lo + (hi - lo) * i as f64 / 20.0;
                let j = loc.log_jet(x).unwrap();
                let e = 1e-6;
                let (u, d) = (loc.log_jet(x + e).unwrap(), loc.log_jet(x - e).unwrap());
                for k in 0..3 {
                    let fd = (u[k] - d[k]) / (2.0 * e);
                    assert!((fd - j[k + 1]).abs() <= 1e-5 * j[k + 1].abs().max(1.0), "{loc:?} k={k} x={x}");
                }
            }
        }
    }

    #[test]
    fn scale_law_is_exact() {
        for kind in [BumpKind::NearZero, BumpKind::FarFromZero] {
            for k in 1..=3 {
                for p in 1..=2 {
                    let t = scale_law_check(kind, k, p, &[0.1, 0.5, 0.9], 10_000).unwrap();
                    for (_, v) in &t {
                        assert!((v - t[0].1).abs() <= 1e-9 * t[0].1);
                    }
                }
            }
        }
        assert_eq!(scale_law_check(BumpKind::NearZero, 0, 1, &[0.3], 10).unwrap()[0].1, 1.0);
    }

    #[test]
    fn edges_are_continuous() {
        let e = 1e-10;
        assert!((PSI.eval(0.5 + e) - 1.0).abs() < 1e-8);
        assert!(PSI.eval(1.0 - e) < 1e-8);
        assert!((PHI.eval(2.0 - e) - 1.0).abs() < 1e-8);
        assert!(PHI.eval(1.0 + e) < 1e-8);
        let mut prev = 1.0;
        for k in 1..8 {
            let v = PSI.eval(1.0 - 10f64.powi(-k));
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn gamma_is_validated() {
        let p = LocalizerParams { y: vec![0.0], r: 1.0, delta: 0.1, lambda_star: 0.5, gamma: 0.5 };
        assert!(build_localizers(&p, 1, &[]).is_err());
    }
}
