//! The two bump families and the scale law of their log-derivatives.

use hormander::localize::{scale_law_check, BumpKind, PHI, PSI};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for x in [0.0, 0.4, 0.6, 0.8, 0.95, 1.0, 1.2, 1.6, 2.0] {
        println!("x={x:<5} ψ={:.5} φ={:.5}", PSI.eval(x), PHI.eval(x));
    }
    for kind in [BumpKind::NearZero, BumpKind::FarFromZero] {
        for k in 1..=3 {
            let rows = scale_law_check(kind, k, 2, &[0.1, 0.5, 0.9], 1001)?;
            println!("{kind:?} k={k} p=2: {:?}", rows.iter().map(|r| r.1).collect::<Vec<_>>());
        }
    }
    Ok(())
}
