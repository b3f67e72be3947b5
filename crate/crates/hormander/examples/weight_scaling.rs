//! Growth of the localized weight norm as the window shrinks.

use hormander::ibp::weight_norm_scaling;
use hormander::localize::LocalizerParams;
use hormander::nondegen::DiffusionFamily;
use hormander::sde::{heisenberg, EulerMap};
use hormander::timegrid::{make_grid, PathBatch};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = heisenberg();
    let b = PathBatch::new(make_grid(1.0, 160)?, 2, 5000, 4)?;
    let base = LocalizerParams { y: vec![0.0; 3], r: 1.0, delta: 1.0, lambda_star: 0.5, gamma: 0.45 };
    let f = EulerMap { model: model.clone(), end: 160 };
    let s = weight_norm_scaling(&f, &DiffusionFamily { model }, &base, 1.0, &[0.2, 0.1, 0.05, 0.025], &[0], 2.0, &b)?;
    for r in &s.rows {
        println!("δ={:<6} ‖H‖₂ = {:.4} ± {:.4}  P(U_δ > 0) = {:.4}", r.delta, r.norm.mean, r.norm.se, r.support);
    }
    println!("log-log slope {:?}, blow-up bound {}", s.slope, s.bound_slope);
    Ok(())
}
