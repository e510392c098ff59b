//! Repeated training on synthetic data: stratified splits, episodic Adam
//! training, evaluation on held-out episodes, then a save/load round trip
//! of the first model.
//!
//! ```text
//! cargo run --release --example train_synthetic
//! cargo run --release --example train_synthetic -- 64 100 50 5
//! ```
//!
//! Arguments: embedding width, episodes per epoch, epochs, repeats.

use hcfsln::blob::{load_model, save_model, SplitInfo};
use hcfsln::data::{generate_synthetic, SynthSpec};
use hcfsln::train::{evaluate, run_repeats, split_stratified, TrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).map_or(default, |a| a.parse().expect("integer argument"))
}

fn main() -> hcfsln::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let ds = generate_synthetic(&SynthSpec::default())?;
    let mut cfg = TrainConfig {
        episodes_per_epoch: arg(2, 10),
        epochs: arg(3, 20),
        repeats: arg(4, 3),
        ..TrainConfig::default()
    };
    cfg.encoder.embed_dim = arg(1, 16);
    println!(
        "d' = {}, {} epochs x {} episodes, {} repeats, K = {}, B = {}",
        cfg.encoder.embed_dim, cfg.epochs, cfg.episodes_per_epoch, cfg.repeats, cfg.k, cfg.b
    );

    let report = run_repeats(&ds, &cfg, 1)?;
    for o in &report.outcomes {
        println!(
            "repeat {} seed {}: accuracy {:.4}  loss {:.4} -> {:.4}  alpha {:.4}  max |y| {:.4}",
            o.repeat,
            o.seed,
            o.accuracy,
            o.loss_curve.first().copied().unwrap_or(f64::NAN),
            o.loss_curve.last().copied().unwrap_or(f64::NAN),
            o.model.alpha(),
            o.max_embedding_norm
        );
    }
    for f in &report.failures {
        println!("repeat {} failed: {}", f.repeat, f.reason);
    }
    println!("accuracy {:.4} +/- {:.4} ({:.1} s)", report.mean, report.std, report.wall_seconds);

    if let Some(first) = report.outcomes.first() {
        let dir = std::env::temp_dir().join("hcfsln-example");
        std::fs::create_dir_all(&dir).map_err(|e| hcfsln::Error::io(&dir, e))?;
        let path = dir.join("model.bin");
        let split = SplitInfo {
            seed: first.seed,
            test_fraction: cfg.test_fraction,
        };
        save_model(&first.model, &split, &path)?;
        let (loaded, split) = load_model(&path)?;
        let (_, test) = split_stratified(&ds.samples, split.test_fraction, split.seed)?;
        let again = evaluate(&loaded, &test, &cfg.episode_spec()?, cfg.eval_episodes, first.seed)?;
        println!("reloaded {}: accuracy {again:.4} (was {:.4})", path.display(), first.accuracy);
    }
    Ok(())
}
