//! Fixed-curvature sweep: every cell pins alpha, reuses the same data and
//! seeds, and all pairs of cells are compared with Welch's t-test.
//!
//! ```text
//! cargo run --release --example curvature_ablation
//! cargo run --release --example curvature_ablation -- 0.25,1,4
//! ```

use hcfsln::data::{generate_synthetic, SynthSpec};
use hcfsln::stats::{run_ablation, AblationAxis, AblationGrid};
use hcfsln::train::TrainConfig;

fn main() -> hcfsln::Result<()> {
    let alphas: Vec<f64> = std::env::args()
        .nth(1)
        .map_or_else(|| vec![0.5, 1.0, 2.0], |a| a.split(',').map(|v| v.parse().expect("number")).collect());
    let ds = generate_synthetic(&SynthSpec {
        separation: 3.0,
        ..SynthSpec::default()
    })?;
    let mut base = TrainConfig {
        episodes_per_epoch: 10,
        epochs: 10,
        repeats: 3,
        ..TrainConfig::default()
    };
    base.encoder.embed_dim = 16;
    let report = run_ablation(
        &ds,
        &AblationGrid {
            axis: AblationAxis::Curvature(alphas),
            base,
        },
        1,
    )?;
    println!("alpha   mean     std");
    for r in &report.rows {
        println!("{:<7} {:.4}  {:.4}", r.label, r.mean, r.std);
    }
    println!("\npairwise Welch tests, uncorrected");
    for t in &report.tests {
        println!("{} vs {}: t = {:.3}  p = {:.4}", t.a, t.b, t.result.t, t.result.p);
    }
    Ok(())
}
