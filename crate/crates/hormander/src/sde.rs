//! Euler scheme for `dX = Σ_j σ_j(X) dW^j + b(X) dt`, first variation,
//! the coefficient family `a_j, a_{j,p}` and Lie brackets.

use crate::error::{Error, Result};
use crate::funcalc::{Ctx, SmoothMap};
use crate::jet::{Jet, Scalar};
use crate::stats::par_map;
use crate::timegrid::PathBatch;
use serde::{Deserialize, Serialize};

/// Vector fields of a diffusion, written generically so that Jacobians come
/// from the same code by differentiation.
pub trait VectorFields: Send + Sync + Clone {
    fn state_dim(&self) -> usize;
    fn drivers(&self) -> usize;
    fn sigma<S: Scalar>(&self, j: usize, x: &[S]) -> Vec<S>;
    fn drift<S: Scalar>(&self, x: &[S]) -> Vec<S>;
    fn name(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shipped {
    /// Constant diffusion columns and constant drift.
    Additive { sigma: Vec<Vec<f64>>, drift: Vec<f64> },
    /// `N = d = 1`, `σ(x) = a·x`, `b = 0`.
    ScalarLinear { a: f64 },
    /// `σ₁ = (1,0,0)`, `σ₂ = (0,1,x₁)`, `b = 0`.
    Heisenberg,
    /// `σ₁ = σ₂ = (1,0,0)`: no brackets, rank one.
    Degenerate,
}

impl VectorFields for Shipped {
    fn state_dim(&self) -> usize {
        match self {
            Shipped::Additive { drift, .. } => drift.len(),
            Shipped::ScalarLinear { .. } => 1,
            Shipped::Heisenberg | Shipped::Degenerate => 3,
        }
    }
    fn drivers(&self) -> usize {
        match self {
            Shipped::Additive { sigma, .. } => sigma.len(),
            Shipped::ScalarLinear { .. } => 1,
            Shipped::Heisenberg | Shipped::Degenerate => 2,
        }
    }
    fn sigma<S: Scalar>(&self, j: usize, x: &[S]) -> Vec<S> {
        let c = |v: f64| S::cst(v);
        match self {
            Shipped::Additive { sigma, .. } => sigma[j].iter().map(|&v| c(v)).collect(),
            Shipped::ScalarLinear { a } => vec![x[0].clone() * *a],
            Shipped::Heisenberg => match j {
                0 => vec![c(1.0), c(0.0), c(0.0)],
                _ => vec![c(0.0), c(1.0), x[0].clone()],
            },
            Shipped::Degenerate => vec![c(1.0), c(0.0), c(0.0)],
        }
    }
    fn drift<S: Scalar>(&self, _x: &[S]) -> Vec<S> {
        match self {
            Shipped::Additive { drift, .. } => drift.iter().map(|&v| S::cst(v)).collect(),
            _ => vec![S::cst(0.0); self.state_dim()],
        }
    }
    fn name(&self) -> String {
        match self {
            Shipped::Additive { .. } => "additive".into(),
            Shipped::ScalarLinear { a } => format!("scalar-linear(a={a})"),
            Shipped::Heisenberg => "heisenberg".into(),
            Shipped::Degenerate => "degenerate".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionModel<C: VectorFields> {
    pub fields: C,
    /// Projection dimension `n ≤ N`.
    pub n: usize,
    pub x0: Vec<f64>,
}

impl<C: VectorFields> DiffusionModel<C> {
    pub fn new(fields: C, n: usize, x0: Vec<f64>) -> Result<Self> {
        if x0.len() != fields.state_dim() || n == 0 || n > x0.len() {
            return Err(Error::InvalidArgument("need len(x0) = N and 1 ≤ n ≤ N".into()));
        }
        Ok(Self { fields, n, x0 })
    }

    pub fn state_dim(&self) -> usize {
        self.fields.state_dim()
    }
    pub fn drivers(&self) -> usize {
        self.fields.drivers()
    }

    fn jets_at(x: &[f64], order: u8) -> Vec<Jet> {
        let k = x.len();
        x.iter().enumerate().map(|(i, &v)| Jet::var(v, i, k, order)).collect()
    }

    /// `J[l][k] = ∂_k σ_j^l(x)`.
    pub fn sigma_jacobian(&self, j: usize, x: &[f64]) -> Vec<Vec<f64>> {
        let s = self.fields.sigma(j, &Self::jets_at(x, 1));
        s.iter().map(|c| (0..x.len()).map(|k| if c.order() >= 1 { c.grad(k) } else { 0.0 }).collect()).collect()
    }

    /// `H[l][k][m] = ∂_k ∂_m σ_j^l(x)`.
    pub fn sigma_hessian(&self, j: usize, x: &[f64]) -> Vec<Vec<Vec<f64>>> {
        let s = self.fields.sigma(j, &Self::jets_at(x, 2));
        let n = x.len();
        s.iter().map(|c| (0..n).map(|k| (0..n).map(|m| if c.order() >= 2 { c.hess(k, m) } else { 0.0 }).collect()).collect()).collect()
    }

    pub fn drift_jacobian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let s = self.fields.drift(&Self::jets_at(x, 1));
        s.iter().map(|c| (0..x.len()).map(|k| if c.order() >= 1 { c.grad(k) } else { 0.0 }).collect()).collect()
    }

    /// One Euler step from `x` with increments `dw` (length `d`) and step `h`.
    pub fn step<S: Scalar>(&self, x: &[S], dw: &[S], h: f64) -> Vec<S> {
        let mut out: Vec<S> = x.to_vec();
        for (j, dwj) in dw.iter().enumerate() {
            for (o, s) in out.iter_mut().zip(self.fields.sigma(j, x)) {
                if s.is_zero_const() {
                    continue;
                }
                *o = o.clone() + s * dwj.clone();
            }
        }
        for (o, b) in out.iter_mut().zip(self.fields.drift(x)) {
            if b.is_zero_const() {
                continue;
            }
            *o = o.clone() + b * h;
        }
        out
    }

    /// Euler states at nodes `0..=end` for increments `dw`.
    pub fn euler<S: Scalar>(&self, dw: &[S], ctx: &Ctx, end: usize) -> Vec<Vec<S>> {
        let d = ctx.drivers;
        let mut xs = Vec::with_capacity(end + 1);
        xs.push(self.x0.iter().map(|&v| S::cst(v)).collect::<Vec<S>>());
        for k in 0..end {
            let next = self.step(&xs[k], &dw[k * d..(k + 1) * d], ctx.step);
            xs.push(next);
        }
        xs
    }

    /// Terminal state only, without storing the path.
    pub fn terminal<S: Scalar>(&self, dw: &[S], ctx: &Ctx, end: usize) -> Vec<S> {
        let d = ctx.drivers;
        let mut x: Vec<S> = self.x0.iter().map(|&v| S::cst(v)).collect();
        for k in 0..end {
            x = self.step(&x, &dw[k * d..(k + 1) * d], ctx.step);
        }
        x
    }

    /// `a_j = σ̄_j(x)`, `a_{j,p} = Σ_k σ_j^k(x) ∂_k σ̄_p(x)`.
    pub fn coefficients_a(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let d = self.drivers();
        let n = self.n;
        let a: Vec<Vec<f64>> = (0..d).map(|j| self.fields.sigma(j, x)[..n].to_vec()).collect();
        let jac: Vec<Vec<Vec<f64>>> = (0..d).map(|p| self.sigma_jacobian(p, x)).collect();
        let sig: Vec<Vec<f64>> = (0..d).map(|j| self.fields.sigma(j, x)).collect();
        let ajp = (0..d)
            .map(|j| {
                (0..d)
                    .map(|p| (0..n).map(|l| (0..x.len()).map(|k| sig[j][k] * jac[p][l][k]).sum()).collect())
                    .collect()
            })
            .collect();
        (a, ajp)
    }

    /// `[σ_j, σ_p](x) = ∇σ_p σ_j − ∇σ_j σ_p`.
    pub fn lie_bracket(&self, j: usize, p: usize, x: &[f64]) -> Vec<f64> {
        let (sj, sp) = (self.fields.sigma(j, x), self.fields.sigma(p, x));
        let (jj, jp) = (self.sigma_jacobian(j, x), self.sigma_jacobian(p, x));
        (0..x.len())
            .map(|l| (0..x.len()).map(|k| jp[l][k] * sj[k]).sum::<f64>() - (0..x.len()).map(|k| jj[l][k] * sp[k]).sum::<f64>())
            .collect()
    }

    /// `∂X_{t_end}/∂ΔW^j_s` for every driver `j` (columns), by forward
    /// propagation of the one-step Jacobians.
    pub fn first_variation(&self, dw: &[f64], ctx: &Ctx, s_cell: usize, end: usize) -> Result<Vec<Vec<f64>>> {
        if s_cell >= end || end > ctx.cells {
            return Err(Error::InvalidArgument(format!("need s_cell < end ≤ m, got {s_cell}, {end}")));
        }
        let d = ctx.drivers;
        let nn = self.state_dim();
        let xs: Vec<Vec<f64>> = self.euler(dw, ctx, end);
        // columns y[j] ∈ R^N
        let mut y: Vec<Vec<f64>> = (0..d).map(|j| self.fields.sigma(j, &xs[s_cell])).collect();
        for k in s_cell + 1..end {
            let mut jac = vec![vec![0.0; nn]; nn];
            for (l, row) in jac.iter_mut().enumerate() {
                row[l] = 1.0;
            }
            for j in 0..d {
                let js = self.sigma_jacobian(j, &xs[k]);
                for l in 0..nn {
                    for m in 0..nn {
                        jac[l][m] += js[l][m] * dw[k * d + j];
                    }
                }
            }
            let jb = self.drift_jacobian(&xs[k]);
            for l in 0..nn {
                for m in 0..nn {
                    jac[l][m] += jb[l][m] * ctx.step;
                }
            }
            y = y.iter().map(|col| (0..nn).map(|l| (0..nn).map(|m| jac[l][m] * col[m]).sum()).collect()).collect();
        }
        Ok(y)
    }

    /// `∂²X_{t_end}/∂ΔW_{e₁}∂ΔW_{e₂}` with slots given as `(cell, driver)`.
    pub fn second_variation(&self, dw: &[f64], ctx: &Ctx, e1: (usize, usize), e2: (usize, usize), end: usize) -> Result<Vec<f64>> {
        let d = ctx.drivers;
        let (i1, i2) = (e1.0 * d + e1.1, e2.0 * d + e2.1);
        if e1.0 >= end || e2.0 >= end || end > ctx.cells || e1.1 >= d || e2.1 >= d {
            return Err(Error::InvalidArgument("slot outside the grid".into()));
        }
        let k = if i1 == i2 { 1 } else { 2 };
        let jets: Vec<Jet> = dw
            .iter()
            .enumerate()
            .map(|(e, &x)| match e {
                _ if e == i1 => Jet::var(x, 0, k, 2),
                _ if e == i2 => Jet::var(x, 1, k, 2),
                _ => Jet::constant(x),
            })
            .collect();
        let x = self.terminal(&jets, ctx, end);
        Ok(x.iter().map(|c| if c.order() >= 2 { c.hess(0, k - 1) } else { 0.0 }).collect())
    }

    /// Largest relative gap between the coefficient Jacobians and central
    /// finite differences over `points`.
    pub fn jacobian_fd_gap(&self, points: &[Vec<f64>]) -> f64 {
        let nn = self.state_dim();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for x in points {
            for j in 0..=self.drivers() {
                let eval = |y: &[f64]| if j < self.drivers() { self.fields.sigma(j, y) } else { self.fields.drift(y) };
                let jac = if j < self.drivers() { self.sigma_jacobian(j, x) } else { self.drift_jacobian(x) };
                for k in 0..nn {
                    let (mut up, mut dn) = (x.clone(), x.clone());
                    up[k] += eps;
                    dn[k] -= eps;
                    let (fu, fd) = (eval(&up), eval(&dn));
                    for l in 0..nn {
                        let fdv = (fu[l] - fd[l]) / (2.0 * eps);
                        worst = worst.max((fdv - jac[l][k]).abs() / jac[l][k].abs().max(1.0));
                    }
                }
            }
        }
        worst
    }

    /// Largest absolute coefficient value over `points`.
    pub fn coefficient_sup(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .flat_map(|x| (0..self.drivers()).flat_map(|j| self.fields.sigma(j, x)).chain(self.fields.drift(x)).collect::<Vec<f64>>())
            .fold(0.0, |a: f64, v| a.max(v.abs()))
    }
}

/// States of a batch of Euler paths.
#[derive(Clone, Debug)]
pub struct EulerPath {
    pub states: Vec<Vec<f64>>,
}

pub fn euler_simulate<C: VectorFields>(model: &DiffusionModel<C>, batch: &PathBatch) -> Result<Vec<EulerPath>> {
    if batch.drivers != model.drivers() {
        return Err(Error::InvalidArgument(format!("batch has {} drivers, model {}", batch.drivers, model.drivers())));
    }
    let ctx = Ctx::of(batch);
    let paths = par_map(batch.n_paths, |p| model.euler(&batch.path(p), &ctx, ctx.cells));
    for (p, path) in paths.iter().enumerate() {
        if let Some(node) = path.iter().position(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::NumericalBlowup { path: p, node });
        }
    }
    Ok(paths.into_iter().map(|states| EulerPath { states }).collect())
}

/// The projected terminal value `X̄_{t_end}` as a grid functional.
#[derive(Clone, Debug)]
pub struct EulerMap<C: VectorFields> {
    pub model: DiffusionModel<C>,
    pub end: usize,
}

impl<C: VectorFields> SmoothMap for EulerMap<C> {
    fn dim(&self) -> usize {
        self.model.n
    }
    fn name(&self) -> String {
        format!("euler[{}]", self.model.fields.name())
    }
    fn map<S: Scalar>(&self, dw: &[S], ctx: &Ctx) -> Vec<S> {
        let mut x = self.model.terminal(dw, ctx, self.end);
        x.truncate(self.model.n);
        x
    }
}

pub fn heisenberg() -> DiffusionModel<Shipped> {
    DiffusionModel::new(Shipped::Heisenberg, 3, vec![0.0; 3]).unwrap()
}

pub fn additive(sigma: Vec<Vec<f64>>, drift: Vec<f64>, x0: Vec<f64>) -> Result<DiffusionModel<Shipped>> {
    if sigma.iter().any(|c| c.len() != drift.len()) {
        return Err(Error::InvalidArgument("every diffusion column needs N entries".into()));
    }
    let n = drift.len();
    DiffusionModel::new(Shipped::Additive { sigma, drift }, n, x0)
}

pub fn scalar_linear(a: f64, x0: f64) -> DiffusionModel<Shipped> {
    DiffusionModel::new(Shipped::ScalarLinear { a }, 1, vec![x0]).unwrap()
}

pub fn degenerate() -> DiffusionModel<Shipped> {
    DiffusionModel::new(Shipped::Degenerate, 2, vec![0.0; 3]).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timegrid::{make_grid, sample_increments};

    #[test]
    fn heisenberg_coefficients() {
        let m = heisenberg();
        let (a, ajp) = m.coefficients_a(&[0.0; 3]);
        assert_eq!(a, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert_eq!(ajp[0][1], vec![0.0, 0.0, 1.0]);
        assert_eq!(ajp[1][0], vec![0.0, 0.0, 0.0]);
        for x in [[0.0, 0.0, 0.0], [1.3, -0.2, 4.0]] {
            assert_eq!(m.lie_bracket(0, 1, &x), vec![0.0, 0.0, 1.0]);
            assert_eq!(m.lie_bracket(1, 1, &x), vec![0.0; 3]);
        }
    }

    #[test]
    fn linear_model_unrolls() {
        let g = make_grid(1.0, 6).unwrap();
        let b = sample_increments(g, 1, 4, 2).unwrap();
        let m = DiffusionModel::new(Shipped::ScalarLinear { a: 0.7 }, 1, vec![1.5]).unwrap();
        let paths = euler_simulate(&m, &b).unwrap();
        for p in 0..4 {
            let prod: f64 = b.path(p).iter().map(|x| 1.0 + 0.7 * x).product();
            assert!((paths[p].states[6][0] - 1.5 * prod).abs() < 1e-12);
        }
    }

    fn shipped() -> Vec<DiffusionModel<Shipped>> {
        vec![
            additive(vec![vec![1.0, 0.5], vec![-0.3, 2.0]], vec![0.1, -0.2], vec![0.0, 1.0]).unwrap(),
            scalar_linear(0.8, 1.0),
            heisenberg(),
        ]
    }

    #[test]
    fn first_variation_matches_jets() {
        use crate::funcalc::{malliavin_derivative, Scope};
        for model in shipped() {
            let g = make_grid(1.0, 5).unwrap();
            let b = sample_increments(g, model.drivers(), 20, 3).unwrap();
            let ctx = Ctx::of(&b);
            let map = EulerMap { model: model.clone(), end: 5 };
            let dt = malliavin_derivative(&map, 1, &b, &Scope::Full).unwrap();
            for p in 0..20 {
                let dw = b.path(p);
                for s in 0..5 {
                    let y = model.first_variation(&dw, &ctx, s, 5).unwrap();
                    for j in 0..model.drivers() {
                        for l in 0..model.n {
                            let a = dt.get(p, l, &[(s, j)]);
                            assert!((y[j][l] - a).abs() <= 1e-10 * a.abs().max(1.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn linear_first_variation_formula() {
        let g = make_grid(1.0, 6).unwrap();
        let b = sample_increments(g, 1, 3, 4).unwrap();
        let ctx = Ctx::of(&b);
        let m = scalar_linear(0.6, 2.0);
        for p in 0..3 {
            let dw = b.path(p);
            let xs = m.euler(&dw, &ctx, 6);
            for s in 0..6 {
                let tail: f64 = dw[s + 1..].iter().map(|x| 1.0 + 0.6 * x).product();
                let y = m.first_variation(&dw, &ctx, s, 6).unwrap();
                assert!((y[0][0] - 0.6 * xs[s][0] * tail).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn second_variation_of_heisenberg() {
        let g = make_grid(1.0, 4).unwrap();
        let b = sample_increments(g, 2, 1, 4).unwrap();
        let ctx = Ctx::of(&b);
        let m = heisenberg();
        let dw = b.path(0);
        // X³_T = Σ_k X¹_{t_k} ΔW²_k, so ∂²/∂ΔW¹_1∂ΔW²_3 = 1 and the reverse order 0.
        assert_eq!(m.second_variation(&dw, &ctx, (1, 0), (3, 1), 4).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(m.second_variation(&dw, &ctx, (3, 0), (1, 1), 4).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        use crate::rng::NoiseKey;
        let pts: Vec<Vec<f64>> = (0..100)
            .map(|p| {
                let mut v = vec![0.0; 3];
                NoiseKey::new(5, 0).stream(p).fill(0, &mut v);
                v
            })
            .collect();
        assert!(heisenberg().jacobian_fd_gap(&pts) < 1e-6);
        let lin: Vec<Vec<f64>> = pts.iter().map(|x| vec![x[0]]).collect();
        assert!(scalar_linear(1.3, 0.0).jacobian_fd_gap(&lin) < 1e-6);
        let box3: Vec<Vec<f64>> = pts.iter().map(|x| x.iter().map(|v| v.clamp(-3.0, 3.0)).collect()).collect();
        assert!(heisenberg().coefficient_sup(&box3) <= 3.0);
    }

    #[test]
    fn brackets_are_antisymmetric() {
        let m = heisenberg();
        let x = [0.4, -1.0, 2.0];
        let (_, ajp) = m.coefficients_a(&x);
        for j in 0..2 {
            for p in 0..2 {
                let (u, v) = (m.lie_bracket(j, p, &x), m.lie_bracket(p, j, &x));
                assert!(u.iter().zip(&v).all(|(a, b)| *a == -*b));
                for l in 0..3 {
                    assert_eq!(ajp[j][p][l] - ajp[p][j][l], u[l]);
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_stay_put() {
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_increments(g, 2, 3, 1).unwrap();
        let m = additive(vec![vec![0.0; 2]; 2], vec![0.0; 2], vec![1.0, -2.0]).unwrap();
        for path in euler_simulate(&m, &b).unwrap() {
            assert!(path.states.iter().all(|x| x == &vec![1.0, -2.0]));
        }
    }

    #[test]
    fn drivers_must_match() {
        let g = make_grid(1.0, 2).unwrap();
        let b = sample_increments(g, 1, 1, 2).unwrap();
        assert!(euler_simulate(&heisenberg(), &b).is_err());
    }
}
