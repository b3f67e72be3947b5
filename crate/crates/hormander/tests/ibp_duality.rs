#![allow(clippy::type_complexity, clippy::needless_range_loop)]

mod common;

use common::*;
use hormander::funcalc::*;
use hormander::localize::{NoLocalization, PsiLocalization};

#[test]
fn unlocalized_weights_satisfy_duality() {
    let cases: Vec<(Box<dyn GridFunctional>, usize, usize, f64, usize)> = vec![
        (Box::new(BrownianAt { node: 3, driver: 0 }), 3, 1, 1.0, 20),
        (Box::new(LinearFunctional { coeffs: vec![0.5, -1.0, 2.0] }), 3, 1, 2.0 / 3.0, 20),
        (Box::new(Wobble { node: 3, eps: 0.4 }), 3, 1, 1.0 / 3.0, 20),
        (Box::new(Coupled { node: 1 }), 1, 2, 1.0, 60),
    ];
    for (f, m, d, delta, nodes) in &cases {
        let gap = duality_gap_hermite(f.as_ref(), &NoLocalization, *m, *d, *delta, *nodes, 2);
        assert!(gap < 1e-6, "{} gap {gap}", f.name());
    }
}

#[test]
fn psi_localized_weights_satisfy_duality() {
    let square = BrownianSquare { node: 2, driver: 0 };
    let wobble = Wobble { node: 2, eps: 0.4 };
    let cases: Vec<(&dyn GridFunctional, Vec<f64>, f64, f64)> =
        vec![(&wobble, vec![0.3], 0.8, 1.0), (&square, vec![1.2], 0.8, 0.5)];
    for (f, y, r, delta) in cases {
        let loc = PsiLocalization { f, y: y.clone(), r };
        let gap = duality_gap_split(f, &loc, &y, r, 2, 1, delta, 2);
        assert!(gap < 1e-9, "{} gap {gap}", f.name());
    }
}

#[test]
fn localized_weight_vanishes_off_support() {
    let f = BrownianAt { node: 1, driver: 0 };
    let grid = hormander::timegrid::make_grid(1.0, 1).unwrap();
    let ctx = Ctx::new(&grid, 1);
    let w = hormander::timegrid::Window::new(&grid, 1.0, 1.0).unwrap();
    let loc = PsiLocalization { f: &f, y: vec![0.0], r: 0.5 };
    assert!(hormander::ibp::weights_at(&f, None, &loc, &w, &ctx, &[0.6], 1, 0).unwrap().is_none());
    let inside = hormander::ibp::weights_at(&f, None, &loc, &w, &ctx, &[0.1], 1, 0).unwrap().unwrap();
    assert_eq!(inside.u, 1.0);
    assert!((inside.first[0] - 0.1).abs() < 1e-12);
}
