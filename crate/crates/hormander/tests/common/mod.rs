#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

use hormander::funcalc::{lift, Ctx, GridFunctional};
use hormander::ibp::weights_at;
use hormander::jet::{Jet, Scalar};
use hormander::localize::Localization;
use hormander::quadrature::{gauss_legendre, Rule};
use hormander::timegrid::Window;

pub const TEST_FUNCTIONS: usize = 10;

/// Ten entire test functions on `Rⁿ`.
pub fn test_function<S: Scalar>(k: usize, x: &[S]) -> S {
    let mut s = x[0].clone();
    for xi in &x[1..] {
        s = s + xi.clone() * 0.6;
    }
    let last = x[x.len() - 1].clone();
    match k {
        0 => (s + 0.3).sin(),
        1 => (s * 0.7 - 0.2).cos(),
        2 => {
            let u = s - 0.5;
            (-(u.clone() * u)).exp()
        }
        3 => s.clone() * (-(s.clone() * s) * 0.25).exp(),
        4 => (-(s.clone() * s.clone()) * 0.5).exp() * (s * 1.5).cos(),
        5 => s.clone() * s.clone() * 0.5 - s,
        6 => s.clone() * s.clone() * s / 6.0,
        7 => (s * 0.3).exp(),
        8 => x[0].sin() * (last * 0.5).cos(),
        _ => (s.clone() - 0.2) * (s * 0.5).sin(),
    }
}

/// Value, gradient and Hessian of a test function at `y`.
pub fn test_function_jet(k: usize, y: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let n = y.len();
    let j: Jet = test_function(k, &lift(y, 0..n, 2));
    let g = (0..n).map(|i| j.grad(i)).collect();
    let h = (0..n).map(|a| (0..n).map(|b| j.hess(a, b)).collect()).collect();
    (j.value(), g, h)
}

/// Duality integrand layout: for each test function, `n` first-order pairs
/// then `n²` second-order pairs, each pair `(U ∂f, U f H)`.
pub fn duality_terms(
    f: &dyn GridFunctional,
    loc: &dyn Localization,
    w: &Window,
    ctx: &Ctx,
    dw: &[f64],
    depth: usize,
) -> Vec<f64> {
    let n = f.dim();
    let per = 2 * (n + if depth == 2 { n * n } else { 0 });
    let mut out = vec![0.0; TEST_FUNCTIONS * per];
    let Some(pw) = weights_at(f, None, loc, w, ctx, dw, depth, 0).expect("weights") else {
        return out;
    };
    for k in 0..TEST_FUNCTIONS {
        let (v, g, h) = test_function_jet(k, &pw.f);
        let o = &mut out[k * per..(k + 1) * per];
        for i in 0..n {
            o[2 * i] = pw.u * g[i];
            o[2 * i + 1] = pw.u * v * pw.first[i];
        }
        if depth == 2 {
            for a in 0..n {
                for b in 0..n {
                    let s = 2 * (n + a * n + b);
                    o[s] = pw.u * h[a][b];
                    o[s + 1] = pw.u * v * pw.second[a][b];
                }
            }
        }
    }
    out
}

/// Largest `|lhs − rhs|` over the pairs of a duality integral.
pub fn max_gap(v: &[f64]) -> f64 {
    v.chunks(2).map(|p| (p[0] - p[1]).abs()).fold(0.0, f64::max)
}

/// Vector-valued tensor-product quadrature.
pub fn tensor_vec(rules: &[Rule], f: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut idx = vec![0usize; rules.len()];
    let mut x = vec![0.0; rules.len()];
    let mut acc: Vec<f64> = Vec::new();
    loop {
        let mut wt = 1.0;
        for (d, r) in rules.iter().enumerate() {
            x[d] = r.nodes[idx[d]];
            wt *= r.weights[idx[d]];
        }
        let v = f(&x);
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, b) in acc.iter_mut().zip(v) {
            *a += wt * b;
        }
        let mut d = 0;
        loop {
            if d == rules.len() {
                return acc;
            }
            idx[d] += 1;
            if idx[d] < rules[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Points in `[lo, hi]` where `level` crosses any of `cuts`, found on a
/// uniform scan and polished by bisection.
pub fn crossings(level: &dyn Fn(f64) -> f64, cuts: &[f64], lo: f64, hi: f64, scan: usize) -> Vec<f64> {
    let xs: Vec<f64> = (0..=scan).map(|k| lo + (hi - lo) * k as f64 / scan as f64).collect();
    let ls: Vec<f64> = xs.iter().map(|&x| level(x)).collect();
    let mut out = Vec::new();
    for &c in cuts {
        for k in 0..scan {
            let (sa, sb) = (ls[k] - c, ls[k + 1] - c);
            if sa == 0.0 {
                out.push(xs[k]);
            } else if sa * sb < 0.0 {
                let (mut a, mut b) = (xs[k], xs[k + 1]);
                for _ in 0..80 {
                    let m = 0.5 * (a + b);
                    if (level(m) - c) * sa > 0.0 {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                out.push(0.5 * (a + b));
            }
        }
    }
    out
}

/// Sorted breakpoints: uniform panels on `[lo, hi]` plus geometric
/// refinement (ratio 0.4, `refine` levels) on both sides of each point.
fn breakpoints(lo: f64, hi: f64, panels: usize, points: &[f64], refine: usize) -> Vec<f64> {
    let mut b: Vec<f64> = (0..=panels).map(|k| lo + (hi - lo) * k as f64 / panels as f64).collect();
    for &p in points {
        b.push(p);
        for j in 1..=refine {
            let off = 0.25 * 0.4f64.powi(j as i32);
            b.extend([p - off, p + off]);
        }
    }
    b.retain(|x| (lo..=hi).contains(x));
    b.sort_by(f64::total_cmp);
    b.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    b
}

/// `∫ φ_sd(x) g(x) dx` over consecutive breakpoints, skipping panels whose
/// midpoint fails `keep`.
fn panel_sum(sd: f64, breaks: &[f64], nodes: usize, keep: &dyn Fn(f64) -> bool, g: &dyn Fn(f64) -> Vec<f64>) -> Vec<f64> {
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let mut acc: Vec<f64> = Vec::new();
    for win in breaks.windows(2) {
        if !keep(0.5 * (win[0] + win[1])) {
            continue;
        }
        let r = gauss_legendre(nodes, win[0], win[1]);
        for (&x, &wt) in r.nodes.iter().zip(&r.weights) {
            let v = g(x);
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            let c = wt * norm * (-0.5 * (x / sd).powi(2)).exp();
            for (a, b) in acc.iter_mut().zip(v) {
                *a += c * b;
            }
        }
    }
    acc
}

/// `E g(Z)` for `Z ~ N(0, sd²)` in one dimension, splitting the range at the
/// points where `level(x)` crosses any of `cuts`, so piecewise-smooth
/// integrands are integrated at full Gauss–Legendre order. The integrand is
/// taken as zero where `level ≥ cuts.last()`.
pub fn split_normal(sd: f64, level: &dyn Fn(f64) -> f64, cuts: &[f64], g: &dyn Fn(f64) -> Vec<f64>) -> Vec<f64> {
    let half = 9.0 * sd;
    let top = cuts[cuts.len() - 1];
    let roots = crossings(level, cuts, -half, half, 1440);
    let breaks = breakpoints(-half, half, 72, &roots, 12);
    panel_sum(sd, &breaks, 10, &|x| level(x) < top, g)
}

/// Two-dimensional version of [`split_normal`] over `(z, x)`: the inner
/// variable is split at level crossings, the outer one where the number of
/// inner crossings changes.
pub fn split_normal_2d(
    sd: f64,
    level: &dyn Fn(f64, f64) -> f64,
    cuts: &[f64],
    g: &dyn Fn(f64, f64) -> Vec<f64>,
) -> Vec<f64> {
    let half = 9.0 * sd;
    let top = cuts[cuts.len() - 1];
    let count = |z: f64| crossings(&|x| level(z, x), cuts, -half, half, 720).len() as f64;
    let mut marks = Vec::new();
    let scan = 720;
    let zs: Vec<f64> = (0..=scan).map(|k| -half + 2.0 * half * k as f64 / scan as f64).collect();
    let cs: Vec<f64> = zs.iter().map(|&z| count(z)).collect();
    for k in 0..scan {
        if cs[k] != cs[k + 1] {
            let (mut a, mut b) = (zs[k], zs[k + 1]);
            for _ in 0..50 {
                let m = 0.5 * (a + b);
                if count(m) == cs[k] {
                    a = m;
                } else {
                    b = m;
                }
            }
            marks.push(0.5 * (a + b));
        }
    }
    let breaks = breakpoints(-half, half, 72, &marks, 16);
    let alive = |z: f64| (0..=720).any(|k| level(z, -half + 2.0 * half * k as f64 / 720.0) < top);
    panel_sum(sd, &breaks, 8, &alive, &|z| split_normal(sd, &|x| level(z, x), cuts, &|x| g(z, x)))
}

/// Duality gap against a Gauss–Hermite tensor rule over all `m·d` increments.
pub fn duality_gap_hermite(
    f: &dyn GridFunctional,
    loc: &dyn Localization,
    m: usize,
    d: usize,
    delta: f64,
    nodes: usize,
    depth: usize,
) -> f64 {
    let grid = hormander::timegrid::make_grid(1.0, m).unwrap();
    let ctx = Ctx::new(&grid, d);
    let w = Window::new(&grid, 1.0, delta).unwrap();
    let rule = hormander::quadrature::gauss_hermite(nodes).scaled(grid.step.sqrt());
    let rules = vec![rule; m * d];
    max_gap(&tensor_vec(&rules, &|x| duality_terms(f, loc, &w, &ctx, x, depth)))
}

/// Duality gap for `U = ψ(|F − y|/r)` on one or two increments, with the
/// quadrature split where `|F − y|/r` crosses the edges of the transition band.
pub fn duality_gap_split(
    f: &dyn GridFunctional,
    loc: &dyn Localization,
    y: &[f64],
    r: f64,
    m: usize,
    d: usize,
    delta: f64,
    depth: usize,
) -> f64 {
    let grid = hormander::timegrid::make_grid(1.0, m).unwrap();
    let ctx = Ctx::new(&grid, d);
    let w = Window::new(&grid, 1.0, delta).unwrap();
    let sd = grid.step.sqrt();
    let level = |dw: &[f64]| {
        let fv = f.eval(dw, &ctx);
        fv.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / r
    };
    let terms = |dw: &[f64]| duality_terms(f, loc, &w, &ctx, dw, depth);
    let v = match m * d {
        1 => split_normal(sd, &|x| level(&[x]), &[0.5, 1.0], &|x| terms(&[x])),
        2 => split_normal_2d(sd, &|z, x| level(&[z, x]), &[0.5, 1.0], &|z, x| terms(&[z, x])),
        k => panic!("split quadrature covers at most two increments, got {k}"),
    };
    max_gap(&v)
}
