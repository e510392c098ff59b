//! Central-difference gradient checks of every differentiable primitive
//! and of the complete episode loss.
//!
//! ```text
//! cargo run --release --example gradient_check
//! cargo run --release --example gradient_check -- 100
//! ```

use hcfsln::checks::{run_suite, SuiteConfig};

fn main() -> hcfsln::Result<()> {
    let trials = std::env::args().nth(1).map_or(10, |t| t.parse().expect("trial count"));
    let cfg = SuiteConfig {
        trials,
        ..SuiteConfig::default()
    };
    println!("step {}  tolerance {}  trials {}", cfg.step, cfg.tol, cfg.trials);
    let results = run_suite(&cfg)?;
    for r in &results {
        println!(
            "{:<28} {:>10.3e}  {:>6} entries  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        std::process::exit(3);
    }
    Ok(())
}
