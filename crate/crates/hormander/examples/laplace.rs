//! Laplace transform of the variance of a Brownian path.

use hormander::verify::{laplace_check, laplace_exact, laplace_target};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let paths: usize = std::env::args().nth(1).map_or(Ok(200_000), |s| s.parse())?;
    let run = laplace_check(&[0.5, 1.0, 2.0, 5.0], paths, 1024, 7)?;
    println!("E V = {:.6} ± {:.6} (1/6 = {:.6})", run.variance.lhs.mean, run.variance.lhs.se, 1.0 / 6.0);
    println!("{:>5} {:>10} {:>10} {:>12} {:>12}", "λ", "MC", "SE", "2λ/sinh2λ", "exact law");
    for (r, l) in run.rows.iter().zip([0.5, 1.0, 2.0, 5.0]) {
        println!("{l:>5} {:>10.6} {:>10.6} {:>12.6} {:>12.6}", r.lhs.mean, r.lhs.se, laplace_target(l), laplace_exact(l));
    }
    Ok(())
}
