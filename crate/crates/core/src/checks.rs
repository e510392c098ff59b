//! Finite-difference checks of every differentiable primitive and of the
//! complete episode loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::ModalityConfig;
use crate::error::Result;
use crate::fewshot::{cosine, episode_loss, Episode, LossConfig, Sample};
use crate::geometry;
use crate::model::{ModelConfig, ModelParams};
use crate::params::Bound;
use crate::tensor::{grad_check, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    /// Random inputs per primitive.
    pub trials: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            step: 1e-3,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error over all trials.
    pub max_rel_error: f64,
    /// Gradient entries compared.
    pub checked: usize,
    pub passed: bool,
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Point strictly inside the ball with norm at most `max`.
fn ball_point(rng: &mut ChaCha8Rng, dim: usize, max: f64) -> Tensor {
    let v = uniform(rng, &[dim], -1.0, 1.0);
    let target = rng.gen_range(0.05..max);
    let n = v.norm();
    Tensor::vector(v.data().iter().map(|x| x * target / n).collect())
}

/// Scalarise an output with fixed pseudo-random weights so every output
/// entry contributes a distinct amount.
fn reduce(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn primitives() -> Vec<(&'static str, Inputs, Build)> {
    vec![
        ("add", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], |t, v| {
            let y = t.add(v[0], v[1])?;
            reduce(t, y)
        }),
        ("sub", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            reduce(t, y)
        }),
        ("mul", |r| vec![uniform(r, &[2, 5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            reduce(t, y)
        }),
        ("div", |r| vec![uniform(r, &[4], -1.0, 1.0), uniform(r, &[4], 0.5, 2.0)], |t, v| {
            let y = t.div(v[0], v[1])?;
            reduce(t, y)
        }),
        ("affine", |r| vec![uniform(r, &[5], -1.0, 1.0)], |t, v| {
            let y = t.affine(v[0], -1.7, 0.4)?;
            reduce(t, y)
        }),
        ("matmul", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            reduce(t, y)
        }),
        ("transpose", |r| vec![uniform(r, &[3, 2], -1.0, 1.0)], |t, v| {
            let y = t.transpose(v[0])?;
            reduce(t, y)
        }),
        ("reshape", |r| vec![uniform(r, &[2, 3], -1.0, 1.0)], |t, v| {
            let y = t.reshape(v[0], &[3, 2])?;
            reduce(t, y)
        }),
        (
            "conv1d",
            |r| vec![uniform(r, &[6, 2], -1.0, 1.0), uniform(r, &[3, 2, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |t, v| {
                let y = t.conv1d(v[0], v[1], v[2])?;
                reduce(t, y)
            },
        ),
        ("relu", |r| vec![uniform(r, &[6], -1.0, 1.0)], |t, v| {
            let y = t.relu(v[0])?;
            reduce(t, y)
        }),
        ("tanh", |r| vec![uniform(r, &[6], -2.0, 2.0)], |t, v| {
            let y = t.tanh(v[0])?;
            reduce(t, y)
        }),
        ("exp", |r| vec![uniform(r, &[4], -1.0, 1.0)], |t, v| {
            let y = t.exp(v[0])?;
            reduce(t, y)
        }),
        ("ln", |r| vec![uniform(r, &[4], 0.2, 3.0)], |t, v| {
            let y = t.ln(v[0])?;
            reduce(t, y)
        }),
        ("acosh", |r| vec![uniform(r, &[4], 1.2, 4.0)], |t, v| {
            let y = t.acosh(v[0])?;
            reduce(t, y)
        }),
        ("softmax", |r| vec![uniform(r, &[3, 4], -2.0, 2.0)], |t, v| {
            let y = t.softmax(v[0], 1)?;
            reduce(t, y)
        }),
        ("log_softmax", |r| vec![uniform(r, &[5], -2.0, 2.0)], |t, v| {
            let y = t.log_softmax(v[0], 0)?;
            reduce(t, y)
        }),
        ("sum", |r| vec![uniform(r, &[2, 3], -1.0, 1.0)], |t, v| {
            let y = t.sum(v[0])?;
            t.mul(y, y)
        }),
        ("mean", |r| vec![uniform(r, &[2, 3], -1.0, 1.0)], |t, v| {
            let y = t.mean(v[0])?;
            t.mul(y, y)
        }),
        ("mean_rows", |r| vec![uniform(r, &[4, 3], -1.0, 1.0)], |t, v| {
            let y = t.mean_rows(v[0])?;
            reduce(t, y)
        }),
        ("sum_squares", |r| vec![uniform(r, &[5], -1.0, 1.0)], |t, v| t.sum_squares(v[0])),
        ("norm", |r| vec![uniform(r, &[5], -1.0, 1.0)], |t, v| t.norm(v[0], 1e-12)),
        ("max", |r| vec![uniform(r, &[5], -1.0, 1.0)], |t, v| {
            let m = t.max(v[0])?;
            t.mul(m, m)
        }),
        ("layer_norm", |r| vec![uniform(r, &[3, 5], -2.0, 2.0)], |t, v| {
            let y = t.layer_norm(v[0], 1e-6)?;
            reduce(t, y)
        }),
        (
            "attention",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
            |t, v| {
                let y = t.attention(v[0], v[1], v[2], 2)?;
                reduce(t, y)
            },
        ),
        ("stack", |r| vec![uniform(r, &[3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], |t, v| {
            let y = t.stack(&[v[0], v[1]])?;
            reduce(t, y)
        }),
        ("index", |r| vec![uniform(r, &[4], -1.0, 1.0)], |t, v| {
            let y = t.index(v[0], 2)?;
            t.mul(y, y)
        }),
        ("row", |r| vec![uniform(r, &[3, 2], -1.0, 1.0)], |t, v| {
            let y = t.row(v[0], 1)?;
            reduce(t, y)
        }),
        ("ball_project", |r| vec![uniform(r, &[4], -1.0, 1.0), uniform(r, &[], 0.5, 2.0)], |t, v| {
            let y = t.ball_project(v[0], v[1], geometry::MAX_NORM)?;
            reduce(t, y)
        }),
        ("ball_clip", |r| vec![ball_point(r, 4, 0.9)], |t, v| {
            let y = t.ball_clip(v[0], geometry::MAX_NORM)?;
            reduce(t, y)
        }),
        ("poincare_distance", |r| vec![ball_point(r, 3, 0.9), ball_point(r, 3, 0.9)], |t, v| {
            geometry::poincare_distance(t, v[0], v[1])
        }),
        (
            "weighted_prototype",
            |r| vec![ball_point(r, 3, 0.8), ball_point(r, 3, 0.8), ball_point(r, 3, 0.8)],
            |t, v| {
                let (p, _) = geometry::weighted_prototype(t, v)?;
                reduce(t, p)
            },
        ),
        (
            "residual_hyperbolic_block",
            |r| vec![ball_point(r, 3, 0.8), uniform(r, &[3, 3], -0.5, 0.5), uniform(r, &[3], -0.5, 0.5), uniform(r, &[], -0.3, 0.3)],
            |t, v| {
                let alpha = geometry::alpha_from_rho(t, v[3])?;
                let y = geometry::residual_hyperbolic_block(t, v[0], v[1], v[2], alpha)?;
                reduce(t, y)
            },
        ),
        ("cosine", |r| vec![uniform(r, &[4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], |t, v| cosine(t, v[0], v[1])),
    ]
}

/// Check every primitive on `trials` random inputs each.
pub fn primitive_checks(cfg: &SuiteConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for (name, inputs, build) in primitives() {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for _ in 0..cfg.trials {
            let params = inputs(&mut rng);
            let report = grad_check(build, &params, cfg.step, cfg.tol)?;
            worst = worst.max(report.max_rel_error);
            checked += report.checked;
        }
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: worst,
            checked,
            passed: worst < cfg.tol,
        });
    }
    Ok(out)
}

/// Combined loss of a one-shot, one-query episode with two modalities,
/// `d' = 16` and `L = 8`, differentiated with respect to every weight,
/// including the curvature parameter.
pub fn episode_check(cfg: &SuiteConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let seq_len = 8;
    let modalities = vec![ModalityConfig::new("a", 3, seq_len)?, ModalityConfig::new("b", 2, seq_len)?];
    let mut model_cfg = ModelConfig::new(modalities);
    model_cfg.encoder.embed_dim = 16;
    model_cfg.encoder.heads = 4;
    let mut model = ModelParams::init(model_cfg, cfg.seed)?;
    // Move zero-initialised projections off zero so their gradients are exercised.
    model.perturb(&mut rng, 0.05);
    let pool: Vec<Sample> = (0..4)
        .map(|i| Sample {
            id: i,
            label: (i % 2) as u8,
            modalities: model
                .config
                .modalities
                .iter()
                .map(|m| uniform(&mut rng, &[m.seq_len, m.input_dim], -1.5, 1.5))
                .collect(),
        })
        .collect();
    let episode = Episode {
        support: vec![0, 1],
        query: vec![2, 3],
    };
    let loss = LossConfig::default();
    let params: Vec<Tensor> = model.store.entries().iter().map(|e| e.value.clone()).collect();
    let report = grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            Ok(episode_loss(tape, &bound, &model, &pool, &episode, &loss)?.total)
        },
        &params,
        cfg.step,
        cfg.tol,
    )?;
    Ok(CheckResult {
        name: "episode_loss".to_string(),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
        passed: report.passed,
    })
}

/// Primitive checks followed by the episode check.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckResult>> {
    let mut all = primitive_checks(cfg)?;
    all.push(episode_check(cfg)?);
    Ok(all)
}
