//! Finite-difference check of every op, block and loss term.
//!
//! cargo run --release --example gradcheck_block [double]

use scb_detr::audit::{run_suite, Precision};

fn main() -> scb_detr::Result<()> {
    let precision = match std::env::args().nth(1).as_deref() {
        Some("double") => Precision::Double,
        _ => Precision::Single,
    };
    let seeds: Vec<u64> = (0..std::env::var("SEEDS").map(|s| s.parse().unwrap()).unwrap_or(3)).collect();
    let results = run_suite(precision, &seeds, None, |r| {
        let status = if r.report.passed() { "ok" } else { "FAIL" };
        println!("{:<28} seed {}  max rel err {:.2e}  {status}", r.name, r.seed, r.report.max_rel_err());
    })?;
    let failed = results.iter().filter(|r| !r.report.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(())
}
