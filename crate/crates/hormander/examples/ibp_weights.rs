//! Integration by parts on a grid: E f'(F) against E f(F)·H for a
//! nonlinear functional, with and without a localizing bump.

use hormander::funcalc::{Ctx, GridFunctional, Wobble};
use hormander::ibp::ibp_weight;
use hormander::localize::{NoLocalization, PsiLocalization};
use hormander::stats::estimate_of;
use hormander::timegrid::{make_grid, PathBatch, Window};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let b = PathBatch::new(make_grid(1.0, 8)?, 1, 400_000, 11)?;
    let ctx = Ctx::of(&b);
    let w = Window::new(&b.grid, 1.0, 0.5)?;
    let f = Wobble { node: 8, eps: 0.4 };
    let psi = PsiLocalization { f: &f, y: vec![0.2], r: 1.5 };
    let (g, dg) = (|x: f64| (x + 0.3).sin(), |x: f64| (x + 0.3).cos());
    for (name, loc) in [("U = 1", &NoLocalization as &dyn hormander::localize::Localization), ("U = ψ", &psi)] {
        let h = ibp_weight(&f, None, loc, &w, &b)?;
        let (mut lhs, mut rhs) = (Vec::new(), Vec::new());
        for (p, hp) in h.iter().enumerate() {
            let dw = b.path(p);
            let x = f.eval(&dw, &ctx)[0];
            let u = loc.u(&dw, &ctx);
            lhs.push(u * dg(x));
            rhs.push(u * g(x) * hp[0]);
        }
        let (l, r) = (estimate_of(&lhs, b.seed), estimate_of(&rhs, b.seed));
        println!("{name}: E U f'(F) = {:.5} ± {:.5}   E U f(F) H = {:.5} ± {:.5}", l.mean, l.se, r.mean, r.se);
    }
    Ok(())
}
