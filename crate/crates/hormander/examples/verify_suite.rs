//! The full lemma-verification suite at a small budget.

use hormander::config::RunConfig;
use hormander::verify::Verdict;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig { paths: Some(20_000), m: Some(256), ..Default::default() };
    let rows = hormander::cli::verify_suite(&cfg)?;
    for r in &rows {
        println!("{:<14} {:<48} {:.4e} vs {:.4e}", format!("{:?}", r.verdict), r.name, r.lhs.mean, r.rhs.mean);
    }
    let failed = rows.iter().filter(|r| r.verdict == Verdict::Fail).count();
    println!("{} checks, {failed} failed", rows.len());
    Ok(())
}
