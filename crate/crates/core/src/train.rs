//! Adam, the episodic trainer, evaluation and repeated runs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{standardize_apply, standardize_fit_transform, Dataset};
use crate::encoder::{EncoderConfig, ModalityConfig};
use crate::error::{Error, Result};
use crate::fewshot::{compute_prototypes, distances, embed_values, episode_loss, sample_episode, EpisodeSpec, LossConfig, Sample};
use crate::geometry::MAX_NORM;
use crate::model::{Geometry, ModelConfig, ModelParams};
use crate::params::ParamStore;
use crate::report::Metrics;
use crate::tensor::{Tape, Tensor};

/// Independent random streams derived from one seed.
const STREAM_EPISODES: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_EVAL: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero;
/// non-trainable parameters are left untouched.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters, {} gradients, {} moment buffers", store.len(), grads.len(), state.m.len()),
        ));
    }
    for (e, g) in store.entries().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != e.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient of {} has shape {:?}, parameter {:?}", e.name, g.shape(), e.value.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, e) in store.entries_mut().iter_mut().enumerate() {
        if !e.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_ref().map(|g| g.data());
        for (j, p) in e.value.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping when clipping happened.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> Option<f64> {
    let sq: f64 = grads.iter().flatten().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm <= max_norm {
        return None;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Some(norm)
}

/// Everything that controls one train/evaluate cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub k: usize,
    pub b: usize,
    pub seed: u64,
    pub repeats: usize,
    pub test_fraction: f64,
    pub eval_episodes: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub alpha_init: f64,
    pub alpha_trainable: bool,
    pub geometry: Geometry,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            episodes_per_epoch: 100,
            k: 1,
            b: 4,
            seed: 0,
            repeats: 5,
            test_fraction: 0.2,
            eval_episodes: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            alpha_init: 1.0,
            alpha_trainable: true,
            geometry: Geometry::Hyperbolic,
        }
    }
}

impl TrainConfig {
    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.repeats == 0 || self.eval_episodes == 0 {
            return bad("repeats and eval_episodes must be >= 1".into());
        }
        if !(self.clip_norm > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("clip_norm and adam_eps must be > 0, betas in [0, 1)".into());
        }
        EpisodeSpec::new(self.k, self.b)?;
        self.loss.validate()?;
        self.encoder.validate()?;
        Ok(())
    }

    pub fn episode_spec(&self) -> Result<EpisodeSpec> {
        EpisodeSpec::new(self.k, self.b)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn model_config(&self, modalities: Vec<ModalityConfig>) -> ModelConfig {
        ModelConfig {
            modalities,
            encoder: self.encoder.clone(),
            alpha_init: self.alpha_init,
            alpha_trainable: self.alpha_trainable,
            geometry: self.geometry,
        }
    }
}

fn round_half_even(x: f64) -> usize {
    x.round_ties_even().max(0.0) as usize
}

/// Per-class shuffled split. Each class contributes `round(n_c · fraction)`
/// test samples (ties to even); if the per-class counts do not add up to
/// `round(N · fraction)`, the larger class absorbs the difference. Every
/// class keeps at least one sample on each side.
pub fn split_stratified(samples: &[Sample], test_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut by_class: [Vec<usize>; 2] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        by_class
            .get_mut(s.label as usize)
            .ok_or_else(|| Error::Format(format!("sample {} has label {}", s.id, s.label)))?
            .push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::InsufficientSamples {
                class: c as u8,
                have: members.len(),
                need: 2,
            });
        }
    }
    let mut n_test: Vec<usize> = by_class.iter().map(|m| round_half_even(m.len() as f64 * test_fraction)).collect();
    let total = round_half_even(samples.len() as f64 * test_fraction);
    let larger = if by_class[1].len() > by_class[0].len() { 1 } else { 0 };
    let assigned: usize = n_test.iter().sum();
    n_test[larger] = (n_test[larger] + total).saturating_sub(assigned);
    for (n, members) in n_test.iter_mut().zip(&by_class) {
        *n = (*n).clamp(1, members.len() - 1);
    }

    let mut rng = stream_rng(seed, STREAM_SPLIT);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut test_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (members, n) in by_class.iter().zip(&n_test) {
        let mut order = members.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        test_idx.extend_from_slice(&order[..*n]);
        train_idx.extend_from_slice(&order[*n..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    for i in train_idx {
        train.push(samples[i].clone());
    }
    for i in test_idx {
        test.push(samples[i].clone());
    }
    Ok((train, test))
}

/// Result of [`train_model`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    /// Mean total loss of each epoch.
    pub loss_curve: Vec<f64>,
    /// Updates whose gradient norm exceeded the clip threshold.
    pub clip_events: usize,
    /// Largest embedding norm seen during training (hyperbolic only).
    pub max_embedding_norm: f64,
    /// Distance evaluations that hit the acosh floor.
    pub acosh_clamps: usize,
}

/// Fit the scaler on `pool`, then run `epochs × episodes_per_epoch` Adam
/// steps, one per episode, on the total loss.
pub fn train_model(pool: &[Sample], modalities: &[ModalityConfig], cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.episode_spec()?;
    let mut model = ModelParams::init(cfg.model_config(modalities.to_vec()), seed)?;
    let (scaler, scaled) = standardize_fit_transform(pool)?;
    model.scaler = Some(scaler);
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.store);
    let mut rng = stream_rng(seed, STREAM_EPISODES);
    let mut outcome_curve = Vec::with_capacity(cfg.epochs);
    let (mut clip_events, mut max_norm_seen, mut clamps) = (0usize, 0.0f64, 0usize);

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for step in 0..cfg.episodes_per_epoch {
            let context = |e: Error| Error::Numeric(format!("epoch {epoch} episode {step}: {e}"));
            let episode = sample_episode(&scaled, &spec, &mut rng)?;
            let mut tape = Tape::training(rng.gen());
            let bound = model.store.bind(&mut tape, true);
            let loss = episode_loss(&mut tape, &bound, &model, &scaled, &episode, &cfg.loss).map_err(|e| match e {
                Error::NonFinite { .. } | Error::Domain { .. } | Error::OutsideBall { .. } => context(e),
                other => other,
            })?;
            if model.geometry() == Geometry::Hyperbolic {
                for e in &loss.embeddings {
                    let n = tape.value(*e).norm();
                    if n > MAX_NORM + 1e-12 {
                        return Err(context(Error::OutsideBall { norm: n }));
                    }
                    max_norm_seen = max_norm_seen.max(n);
                }
            }
            let value = tape.value(loss.total).item();
            if !value.is_finite() || value < 0.0 {
                return Err(context(Error::Numeric(format!("loss {value}"))));
            }
            epoch_loss += value;
            clamps += tape.acosh_clamps();
            let mut grads = tape.backward(loss.total).map_err(context)?;
            let mut per_param: Vec<Option<Tensor>> = bound.vars().iter().map(|v| grads.take(*v)).collect();
            if let Some(norm) = clip_global_norm(&mut per_param, cfg.clip_norm) {
                clip_events += 1;
                log::debug!("epoch {epoch} episode {step}: gradient norm {norm:.3e} clipped to {}", cfg.clip_norm);
            }
            adam_step(&mut model.store, &per_param, &mut state, &adam).map_err(context)?;
            if !model.store.all_finite() {
                return Err(context(Error::Numeric("non-finite parameter after update".into())));
            }
        }
        let mean = epoch_loss / cfg.episodes_per_epoch.max(1) as f64;
        if cfg.episodes_per_epoch > 0 {
            outcome_curve.push(mean);
        }
        log::info!("epoch {epoch}: mean loss {mean:.6} alpha {:.4}", model.alpha());
    }
    Ok(TrainOutcome {
        model,
        loss_curve: outcome_curve,
        clip_events,
        max_embedding_norm: max_norm_seen,
        acosh_clamps: clamps,
    })
}

/// Embeddings of every sample, standardised with the model's scaler.
pub fn embed_pool(model: &ModelParams, pool: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let scaled;
    let pool = match &model.scaler {
        Some(s) => {
            scaled = standardize_apply(s, pool)?;
            scaled.as_slice()
        }
        None => pool,
    };
    pool.iter().map(|s| embed_values(model, s)).collect()
}

/// Fraction of correctly classified queries over `n_episodes` episodes
/// drawn from `pool`. Each sample is embedded once with dropout off.
pub fn evaluate(model: &ModelParams, pool: &[Sample], spec: &EpisodeSpec, n_episodes: usize, seed: u64) -> Result<f64> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let cache = embed_pool(model, pool)?;
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let (mut correct, mut total) = (0usize, 0usize);
    for _ in 0..n_episodes {
        let ep = sample_episode(pool, spec, &mut rng)?;
        let mut tape = Tape::new();
        let support: Vec<_> = ep
            .support
            .iter()
            .map(|&i| (tape.constant(Tensor::vector(cache[i].clone())), pool[i].label))
            .collect();
        let protos = compute_prototypes(&mut tape, model.geometry(), &support)?;
        for &i in &ep.query {
            let q = tape.constant(Tensor::vector(cache[i].clone()));
            let d = distances(&mut tape, model.geometry(), q, &protos)?;
            let d = tape.value(d).data();
            let predicted = if d[1] < d[0] { 1 } else { 0 };
            correct += (predicted == pool[i].label) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Outcome of one split/train/evaluate cycle.
#[derive(Clone, Debug)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub clip_events: usize,
    pub max_embedding_norm: f64,
    pub model: ModelParams,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatFailure {
    pub repeat: usize,
    pub seed: u64,
    pub reason: String,
    /// Exit status the error would map to on its own.
    pub exit_code: i32,
}

/// Aggregate of repeated runs. `wall_seconds` is the only field that is not
/// reproducible.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: TrainConfig,
    pub outcomes: Vec<RepeatOutcome>,
    pub failures: Vec<RepeatFailure>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); 0 for a single run.
    pub std: f64,
    pub single_run: bool,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }

    /// Deterministic summary; wall-clock time is left out.
    pub fn to_metrics(&self) -> Metrics {
        let c = &self.config;
        let mut m = Metrics::new();
        m.set("kind", "train")
            .set("geometry", c.geometry)
            .set("k", c.k)
            .set("b", c.b)
            .set("repeats", c.repeats)
            .set("failed", self.failed())
            .set("single_run", self.single_run)
            .set_list("accuracies", &self.accuracies)
            .set("mean_accuracy", self.mean)
            .set("std_accuracy", self.std);
        for o in &self.outcomes {
            let r = o.repeat;
            m.set(format!("repeat.{r}.seed"), o.seed)
                .set(format!("repeat.{r}.accuracy"), o.accuracy)
                .set(format!("repeat.{r}.alpha"), o.model.alpha())
                .set(format!("repeat.{r}.clip_events"), o.clip_events)
                .set(format!("repeat.{r}.max_embedding_norm"), o.max_embedding_norm)
                .set_list(format!("repeat.{r}.loss_curve"), &o.loss_curve);
        }
        for f in &self.failures {
            m.set(format!("failure.{}.seed", f.repeat), f.seed)
                .set(format!("failure.{}.reason", f.repeat), f.reason.replace(['\t', '\n'], " "));
        }
        m
    }
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_one(dataset: &Dataset, cfg: &TrainConfig, repeat: usize, seed: u64) -> Result<RepeatOutcome> {
    let (train, test) = split_stratified(&dataset.samples, cfg.test_fraction, seed)?;
    let train_ids: Vec<usize> = train.iter().map(|s| s.id).collect();
    let test_ids: Vec<usize> = test.iter().map(|s| s.id).collect();
    assert!(
        train_ids.iter().all(|id| test_ids.binary_search(id).is_err()),
        "train/test split overlaps"
    );
    let modalities = dataset.meta.modality_configs()?;
    let trained = train_model(&train, &modalities, cfg, seed)?;
    let accuracy = evaluate(&trained.model, &test, &cfg.episode_spec()?, cfg.eval_episodes, seed)?;
    Ok(RepeatOutcome {
        repeat,
        seed,
        accuracy,
        loss_curve: trained.loss_curve,
        clip_events: trained.clip_events,
        max_embedding_norm: trained.max_embedding_norm,
        model: trained.model,
        train_ids,
        test_ids,
    })
}

/// Run one cycle per seed on a pool of `threads` workers. Results are
/// ordered by repeat index whatever the thread count.
pub fn run_with_seeds(dataset: &Dataset, cfg: &TrainConfig, seeds: &[u64], threads: usize) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<RepeatOutcome>> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| run_one(dataset, cfg, i, seed))
            .collect()
    });
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("repeat {i} (seed {}) failed: {e}", seeds[i]);
                failures.push(RepeatFailure {
                    repeat: i,
                    seed: seeds[i],
                    reason: e.to_string(),
                    exit_code: e.exit_code(),
                });
            }
        }
    }
    let accuracies: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let (mean, std) = mean_std(&accuracies);
    Ok(RunReport {
        config: cfg.clone(),
        outcomes,
        failures,
        single_run: seeds.len() == 1,
        accuracies,
        mean,
        std,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// `repeats` independent cycles with seeds `seed, seed + 1, ...`.
pub fn run_repeats(dataset: &Dataset, cfg: &TrainConfig, threads: usize) -> Result<RunReport> {
    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    run_with_seeds(dataset, cfg, &seeds, threads)
}
