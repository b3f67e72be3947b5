//! Λ gate, tail and ε tables, then IBP vs kernel densities for the
//! Heisenberg diffusion.

use hormander::estimate::{example_experiment, ExperimentConfig};
use hormander::nondegen::HeisenbergOracle;
use hormander::sde::heisenberg;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let paths: usize = std::env::args().nth(1).map_or(Ok(200_000), |s| s.parse())?;
    let arg = |i: usize, d: f64| std::env::args().nth(i).map_or(d, |s| s.parse().unwrap());
    let cfg = ExperimentConfig { n_paths: paths, tail_paths: paths, density_delta: arg(2, 0.125), radius: arg(3, 1.0), ..Default::default() };
    let t0 = std::time::Instant::now();
    let r = example_experiment(&heisenberg(), &cfg, Some(&HeisenbergOracle))?;
    println!("Λ(ȳ) = {}", r.gate.value);
    for row in &r.tails.rows {
        println!("tail δ={:<6} p={:.5} [{:.5}, {:.5}]", row.delta, row.prob.estimate, row.prob.lo, row.prob.hi);
    }
    println!("tail slope vs 1/δ: {:?}", r.tails.inverse_slope);
    for e in &r.epsilon {
        println!("ε δ={:<6} {:.5} ± {:.5}", e.delta, e.eps.mean, e.eps.se);
    }
    println!("largest ε ratio {:.4}", r.eps_max_ratio);
    let d = &r.density;
    println!("mass E U_δ = {:.5}, bandwidth {:?}", d.mass.mean, d.bandwidth);
    for (i, x) in d.points.iter().enumerate() {
        let ibp = d.ibp.as_ref().map(|v| v[i]);
        println!("x={x:?} ibp={:?} kde={:.5}±{:.5}", ibp.map(|e| (e.mean, e.se)), d.kde[i].mean, d.kde[i].se);
    }
    println!("sup discrepancy {:.4}, agreement {}", r.sup_discrepancy, r.agreement);
    println!("elapsed {:?}", t0.elapsed());
    Ok(())
}
