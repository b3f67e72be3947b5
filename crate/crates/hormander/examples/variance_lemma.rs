//! Exponential bound for the integral of a drifted Brownian square on a
//! small event.

use hormander::verify::{standard_scenarios, variance_lemma_check, EventVariant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rows = variance_lemma_check(&standard_scenarios(), &[EventVariant::Wide, EventVariant::Tight], 64, 50_000, 3)?;
    for r in rows {
        let s = r.scenario;
        println!(
            "α={:<5} β={:<4} δ={:<5} {:?}: LHS {:.3e} ± {:.1e}  bound {:.3e}  event rate {:.3}  {:?}",
            s.alpha, s.beta, s.delta, r.variant, r.check.lhs.mean, r.check.lhs.se, r.check.rhs.mean, r.event_rate, r.check.verdict
        );
    }
    Ok(())
}
