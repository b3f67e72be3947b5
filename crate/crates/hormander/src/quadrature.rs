//! Gaussian quadrature rules used as deterministic expectation oracles.

use crate::stats::par_map;
use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights for `E f(X)` under some law of `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    /// Same rule for `s·X`.
    pub fn scaled(&self, s: f64) -> Rule {
        Rule { nodes: self.nodes.iter().map(|x| x * s).collect(), weights: self.weights.clone() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss–Hermite rule for a standard normal (probabilists' weight), by the
/// Golub–Welsch eigenproblem. Weights sum to one.
pub fn gauss_hermite(n: usize) -> Rule {
    let j = DMatrix::from_fn(n, n, |r, c| if r + 1 == c || c + 1 == r { (r.max(c) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Rule { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1 / total).collect() }
}

/// Gauss–Legendre rule on `[a, b]` (Lebesgue weight), by Newton iteration.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Rule {
    let (mut nodes, mut weights) = (vec![0.0; n], vec![0.0; n]);
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = mid - half * x;
        nodes[n - 1 - i] = mid + half * x;
        weights[i] = half * w;
        weights[n - 1 - i] = half * w;
    }
    Rule { nodes, weights }
}

/// Composite Gauss–Legendre rule for a standard normal truncated to
/// `[-half_width, half_width]`; suited to integrands with sharp but smooth
/// transitions.
pub fn composite_gaussian(half_width: f64, panels: usize, per_panel: usize) -> Rule {
    let step = 2.0 * half_width / panels as f64;
    let (mut nodes, mut weights) = (Vec::new(), Vec::new());
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    for k in 0..panels {
        let a = -half_width + k as f64 * step;
        let r = gauss_legendre(per_panel, a, a + step);
        for (x, w) in r.nodes.into_iter().zip(r.weights) {
            weights.push(w * (-0.5 * x * x).exp() / norm);
            nodes.push(x);
        }
    }
    Rule { nodes, weights }
}

/// `Σ w₁…w_k f(x₁,…,x_k)` over the tensor grid, reduced in a fixed order.
pub fn tensor_expect<F>(rules: &[Rule], f: F) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    if rules.is_empty() {
        return f(&[]);
    }
    let first = &rules[0];
    let rest = &rules[1..];
    let parts = par_map(first.len(), |i| {
        let mut x = vec![0.0; rules.len()];
        x[0] = first.nodes[i];
        let mut idx = vec![0usize; rest.len()];
        let mut s = 0.0;
        loop {
            let mut w = first.weights[i];
            for (d, (&k, r)) in idx.iter().zip(rest).enumerate() {
                x[d + 1] = r.nodes[k];
                w *= r.weights[k];
            }
            s += w * f(&x);
            let mut d = 0;
            loop {
                if d == rest.len() {
                    return s;
                }
                idx[d] += 1;
                if idx[d] < rest[d].len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    });
    parts.iter().sum()
}
