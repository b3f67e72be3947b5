//! Order-one Hörmander checks: the Λ gate, small-λ tail probabilities and
//! the approximation error ε along δ-halvings.

use hormander::nondegen::{capital_lambda, epsilon_alpha, tail_probability, DiffusionFamily, EpsMode, HeisenbergOracle};
use hormander::sde::{heisenberg, EulerMap};
use hormander::timegrid::{make_grid, NestedOpts, PathBatch, Window};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = heisenberg();
    let gate = capital_lambda(&model, &[0.0; 3], &[], &[], 100, 1)?;
    println!("Λ(0) = {} at {:?}", gate.value, gate.xhat);
    let b = PathBatch::new(make_grid(1.0, 64)?, 2, 100_000, 2)?;
    let f = EulerMap { model: model.clone(), end: 64 };
    let fam = DiffusionFamily { model };
    let deltas = [0.5, 0.25, 0.125];
    let t = tail_probability(&f, &fam, &[0.0; 3], 1.0, 0.5, 1.0, &deltas, &b)?;
    for r in &t.rows {
        println!("P(|F| ≤ 1, λ < 1/2) at δ={:<6} {:.5} [{:.5}, {:.5}]", r.delta, r.prob.estimate, r.prob.lo, r.prob.hi);
    }
    let small = b.with_paths(500);
    for d in deltas {
        let w = Window::new(&b.grid, 1.0, d)?;
        let exact = epsilon_alpha(&f, &fam, 0.5, 1, &w, &small, EpsMode::Exact(&HeisenbergOracle))?;
        let nested = epsilon_alpha(&f, &fam, 0.5, 1, &w, &small.with_paths(100), EpsMode::Nested(NestedOpts::antithetic(16)))?;
        println!("ε at δ={d:<6} exact {:.5}  nested {:.5} ± {:.5}", exact.total.mean, nested.total.mean, nested.total.se);
    }
    Ok(())
}
