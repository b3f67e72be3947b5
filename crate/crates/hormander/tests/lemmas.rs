use hormander::funcalc::{brownian, BrownianAt, BrownianSquare, Ctx};
use hormander::ibp::remainder_at;
use hormander::localize::LocalizerParams;
use hormander::nondegen::{CoefficientFamily, DiffusionFamily};
use hormander::sde::{heisenberg, scalar_linear, EulerMap};
use hormander::timegrid::{make_grid, NestedOpts, PathBatch, Window};
use hormander::verify::*;

fn unit_family(_: &[f64], _: &Ctx, w: &Window) -> CoefficientFamily {
    CoefficientFamily::new(vec![vec![1.0]], vec![vec![vec![0.0]]], w.first_cell).unwrap()
}

/// `W_T² = W_{T−δ}² + 2W_{T−δ}(W_T − W_{T−δ}) + (W_T − W_{T−δ})²`.
fn square_family(dw: &[f64], ctx: &Ctx, w: &Window) -> CoefficientFamily {
    let w0 = brownian(dw, ctx, w.first_cell, 0);
    CoefficientFamily::new(vec![vec![2.0 * w0]], vec![vec![vec![2.0]]], w.first_cell).unwrap()
}

#[test]
fn heisenberg_remainder_vanishes() {
    let m = heisenberg();
    let b = PathBatch::new(make_grid(1.0, 32).unwrap(), 2, 500, 1).unwrap();
    let f = EulerMap { model: m.clone(), end: 32 };
    let fam = DiffusionFamily { model: m };
    let tail = gdelta_tail(&f, &fam, 1.0, &[0.5, 0.25], &b).unwrap();
    assert!(tail.rows.iter().all(|r| r.prob.hits == 0 && r.mean_g.mean.abs() < 1e-24));
    let norm = gdelta_norm_boundedness(&f, &fam, 1.0, &[0.5, 0.25], 1, 2.0, &b).unwrap();
    assert!(norm.rows.iter().all(|r| r.norm.mean < 1e-12), "{norm:?}");
}

#[test]
fn square_remainder_is_the_grid_quadratic_variation() {
    let b = PathBatch::new(make_grid(1.0, 16).unwrap(), 1, 200, 2).unwrap();
    let ctx = Ctx::of(&b);
    let w = Window::new(&b.grid, 1.0, 0.25).unwrap();
    let f = BrownianSquare { node: 16, driver: 0 };
    for p in 0..b.n_paths {
        let dw = b.path(p);
        let g = remainder_at(&f, &square_family, &w, &ctx, &dw, 1.0).unwrap().g;
        let qv: f64 = w.cells().map(|k| dw[k] * dw[k]).sum();
        assert!((g - 4.0 * ctx.step * qv).abs() < 1e-12 * (1.0 + g), "{g} vs {qv}");
    }
}

#[test]
fn scalar_linear_remainder_tail_decays() {
    let m = scalar_linear(1.0, 1.0);
    let b = PathBatch::new(make_grid(1.0, 64).unwrap(), 1, 4000, 3).unwrap();
    let f = EulerMap { model: m.clone(), end: 64 };
    let fam = DiffusionFamily { model: m };
    let tail = gdelta_tail(&f, &fam, 1.0, &[0.5, 0.25, 0.125, 0.0625], &b).unwrap();
    assert!(tail.rate.unwrap() > 0.0, "{tail:?}");
    let norm = gdelta_norm_boundedness(&f, &fam, 1.0, &[0.5, 0.25, 0.125], 0, 2.0, &b).unwrap();
    assert!(norm.rows.iter().all(|r| r.bound_ratio.is_finite() && r.norm.mean > 0.0));
    // the norm shrinks with the window rather than blowing up
    assert!(norm.rows.windows(2).all(|p| p[1].norm.mean <= p[0].norm.mean));
}

#[test]
fn norm_rejects_unsupported_orders() {
    let b = PathBatch::new(make_grid(1.0, 8).unwrap(), 1, 10, 4).unwrap();
    let f = BrownianAt { node: 8, driver: 0 };
    assert!(gdelta_norm_boundedness(&f, &unit_family, 1.0, &[0.5], 2, 2.0, &b).is_err());
    assert!(gdelta_norm_boundedness(&f, &unit_family, 1.0, &[0.5], 1, 0.5, &b).is_err());
}

#[test]
fn determinant_lemma_on_the_explicit_model() {
    let b = PathBatch::new(make_grid(1.0, 40).unwrap(), 1, 300, 5).unwrap();
    let rows = determinant_lemma_check(&BrownianAt { node: 40, driver: 0 }, &unit_family, 0.5, 1.0, &[0.2, 0.1], 1.0, &b, NestedOpts::antithetic(8)).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(CheckReport::ok));
    let pooled: Vec<&CheckReport> = rows.iter().filter(|r| r.verdict != Verdict::ReportedOnly).collect();
    // det σ = δ for W_T, so E det^{-1} on Λ is at most 1/δ
    for (r, d) in pooled.iter().zip([0.2, 0.1]) {
        assert!(r.lhs.mean <= 1.0 / d + 1e-9);
    }
}

#[test]
fn tv_literal_events_sit_inside_active_ones() {
    let m = heisenberg();
    let b = PathBatch::new(make_grid(1.0, 32).unwrap(), 2, 2000, 6).unwrap();
    let base = LocalizerParams { y: vec![0.0; 3], r: 1.0, delta: 1.0, lambda_star: 0.5, gamma: 0.45 };
    let rows = tv_decomposition(&EulerMap { model: m.clone(), end: 32 }, &DiffusionFamily { model: m }, &base, 1.0, &[0.125, 0.0625], &b).unwrap();
    for r in &rows {
        assert!(r.check.ok(), "{:?}", r.check);
        for i in 0..4 {
            assert!(r.literal[i].hits <= r.active[i].hits);
        }
        assert!(r.eps2_exact.0 <= r.eps2_exact.1);
        assert!((0.0..=1.0).contains(&r.abs_diff.mean));
    }
}
