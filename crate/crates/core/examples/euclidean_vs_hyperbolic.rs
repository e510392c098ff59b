//! The same hierarchical data and seeds under both geometries. The
//! Euclidean baseline uses the fused embedding, mean prototypes and squared
//! distances.
//!
//! ```text
//! cargo run --release --example euclidean_vs_hyperbolic
//! ```

use hcfsln::data::{generate_synthetic, SynthSpec};
use hcfsln::model::Geometry;
use hcfsln::stats::welch_t_test;
use hcfsln::train::{run_repeats, TrainConfig};

fn main() -> hcfsln::Result<()> {
    let ds = generate_synthetic(&SynthSpec {
        separation: 2.0,
        hierarchy_depth: 3,
        ..SynthSpec::default()
    })?;
    let mut base = TrainConfig {
        episodes_per_epoch: 10,
        epochs: 20,
        repeats: 3,
        ..TrainConfig::default()
    };
    base.encoder.embed_dim = 16;

    let mut accuracies = Vec::new();
    for geometry in [Geometry::Hyperbolic, Geometry::Euclidean] {
        let cfg = TrainConfig { geometry, ..base.clone() };
        let r = run_repeats(&ds, &cfg, 1)?;
        println!("{geometry:<10} accuracy {:.4} +/- {:.4}  {:?}", r.mean, r.std, r.accuracies);
        accuracies.push(r.accuracies);
    }
    let w = welch_t_test(&accuracies[0], &accuracies[1])?;
    println!("Welch t = {:.3}, dof = {:.2}, p = {:.4}", w.t, w.dof, w.p);
    Ok(())
}
