//! One training episode end to end: sample K support and B query items per
//! class, embed them, build prototypes, classify the queries and take one
//! Adam step on the combined loss.
//!
//! ```text
//! cargo run --release --example episode_protocol
//! ```

use hcfsln::data::{generate_synthetic, standardize_fit_transform, SynthSpec};
use hcfsln::fewshot::{embed_point, episode_loss, prototypes_of, classify_point, sample_episode, EpisodeSpec, LossConfig};
use hcfsln::model::{ModelConfig, ModelParams};
use hcfsln::tensor::{Tape, Tensor};
use hcfsln::train::{adam_step, clip_global_norm, AdamConfig, AdamState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hcfsln::Result<()> {
    let ds = generate_synthetic(&SynthSpec {
        n_per_class: 20,
        seq_len: 32,
        ..SynthSpec::default()
    })?;
    let (scaler, pool) = standardize_fit_transform(&ds.samples)?;

    let mut config = ModelConfig::new(ds.meta.modality_configs()?);
    config.encoder.embed_dim = 16;
    let mut model = ModelParams::init(config, 7)?;
    model.scaler = Some(scaler);
    println!("{} parameters, alpha = {}", model.store.numel(), model.alpha());

    let spec = EpisodeSpec::new(2, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let episode = sample_episode(&pool, &spec, &mut rng)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| pool[i].id).collect::<Vec<_>>();
    println!("support ids {:?}", ids(&episode.support));
    println!("query ids   {:?}", ids(&episode.query));

    // point-level view: prototypes and class probabilities
    let support: Vec<_> = episode
        .support_samples(&pool)
        .map(|s| Ok((embed_point(&model, s)?, s.label)))
        .collect::<hcfsln::Result<_>>()?;
    let protos = prototypes_of(&support)?;
    for p in &protos {
        println!("prototype {}: norm {:.4}", p.class_id, p.point.norm());
    }
    for s in episode.query_samples(&pool) {
        let probs = classify_point(&embed_point(&model, s)?, &protos)?;
        println!("query {:>2} label {}  p = {:.4?}", s.id, s.label, probs);
    }

    // graph view: loss, gradient and one update
    let loss_cfg = LossConfig::default();
    let adam_cfg = AdamConfig::default();
    let mut state = AdamState::new(&model.store);
    for step in 0..3 {
        let mut tape = Tape::training(step);
        let bound = model.store.bind(&mut tape, true);
        let loss = episode_loss(&mut tape, &bound, &model, &pool, &episode, &loss_cfg)?;
        println!(
            "step {step}: total {:.6}  proto {:.6}  angular {:.6}",
            tape.value(loss.total).item(),
            tape.value(loss.proto).item(),
            tape.value(loss.angular).item()
        );
        let mut grads = tape.backward(loss.total)?;
        let mut per_param: Vec<Option<Tensor>> = bound.vars().iter().map(|v| grads.take(*v)).collect();
        clip_global_norm(&mut per_param, 10.0);
        adam_step(&mut model.store, &per_param, &mut state, &adam_cfg)?;
    }
    Ok(())
}
