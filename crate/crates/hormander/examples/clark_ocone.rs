//! Clark–Ocone residual on a window: zero for first-chaos functionals,
//! O(h) for W_T².

use hormander::funcalc::{clark_ocone_residual, BrownianAt, BrownianSquare, CondExp};
use hormander::timegrid::{make_grid, NestedOpts, PathBatch, Window};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let b = PathBatch::new(make_grid(1.0, 16)?, 1, 2000, 5)?;
    let w = Window::new(&b.grid, 1.0, 0.5)?;
    let r = clark_ocone_residual(&BrownianAt { node: 16, driver: 0 }, 0, &w, &b, CondExp::Nested(NestedOpts::antithetic(8)))?;
    println!("W_T: mean square residual {:.2e} ± {:.2e}", r.mean, r.se);
    for m in [64, 256, 1024] {
        let b = PathBatch::new(make_grid(1.0, m)?, 1, 20_000, 6)?;
        let w = Window::new(&b.grid, 1.0, 1.0)?;
        let f = BrownianSquare { node: m, driver: 0 };
        let r = clark_ocone_residual(&f, 0, &w, &b, CondExp::Exact(&f))?;
        println!("W_T², m={m:<5} residual {:.5} ± {:.5}  (2h = {:.5})", r.mean, r.se, 2.0 / m as f64);
    }
    Ok(())
}
