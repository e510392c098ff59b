//! Episodes, end-to-end embedding, prototype classification and the
//! prototypical, angular-margin and combined losses.
//!
//! Classes are binary throughout. Within an episode the support set is
//! ordered class 0 then class 1, as is the query set.

use rand::seq::index;
use rand::Rng;

use crate::encoder::{cross_modal_attention, encode_modality, gate_fuse};
use crate::error::{Error, Result};
use crate::geometry::{self, PoincarePoint};
use crate::model::{Geometry, ModelParams};
use crate::params::Bound;
use crate::tensor::{Tape, Tensor, Var};

pub const N_CLASSES: usize = 2;
/// Norm floor used by the cosine in the angular loss.
pub const COSINE_EPS: f64 = 1e-12;

/// One labelled multimodal sequence sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// 0 or 1.
    pub label: u8,
    /// One `(L, d_m)` tensor per modality.
    pub modalities: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    /// Support samples per class.
    pub k: usize,
    /// Query samples per class.
    pub b: usize,
}

impl EpisodeSpec {
    pub fn new(k: usize, b: usize) -> Result<Self> {
        if k == 0 || b == 0 {
            return Err(Error::Config(format!("episode needs K >= 1 and B >= 1, got K={k} B={b}")));
        }
        Ok(Self { k, b })
    }

    pub fn support_size(&self) -> usize {
        N_CLASSES * self.k
    }

    pub fn query_size(&self) -> usize {
        N_CLASSES * self.b
    }
}

/// Support and query positions into a sample pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn support_samples<'a>(&'a self, pool: &'a [Sample]) -> impl Iterator<Item = &'a Sample> + 'a {
        self.support.iter().map(move |&i| &pool[i])
    }

    pub fn query_samples<'a>(&'a self, pool: &'a [Sample]) -> impl Iterator<Item = &'a Sample> + 'a {
        self.query.iter().map(move |&i| &pool[i])
    }
}

/// Draw `K + B` distinct samples per class, uniformly without replacement.
pub fn sample_episode(pool: &[Sample], spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    let need = spec.k + spec.b;
    let mut by_class: [Vec<usize>; N_CLASSES] = Default::default();
    for (i, s) in pool.iter().enumerate() {
        by_class
            .get_mut(s.label as usize)
            .ok_or_else(|| Error::Format(format!("sample {} has label {}", s.id, s.label)))?
            .push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < need {
            return Err(Error::InsufficientSamples {
                class: class as u8,
                have: members.len(),
                need,
            });
        }
    }
    let mut support = Vec::with_capacity(spec.support_size());
    let mut query = Vec::with_capacity(spec.query_size());
    for members in &by_class {
        let picked = index::sample(rng, members.len(), need);
        for (j, p) in picked.into_iter().enumerate() {
            if j < spec.k {
                support.push(members[p]);
            } else {
                query.push(members[p]);
            }
        }
    }
    Ok(Episode { support, query })
}

/// Run the embedding function on one sample: modality encoders, cross-modal
/// attention, gated fusion and, for the hyperbolic geometry, ball projection
/// followed by the residual hyperbolic block.
pub fn embed(tape: &mut Tape, p: &Bound, model: &ModelParams, sample: &Sample) -> Result<Var> {
    let cfg = &model.config;
    if sample.modalities.len() != cfg.modalities.len() {
        return Err(Error::shape(
            "embed",
            format!("sample {} has {} modalities, model expects {}", sample.id, sample.modalities.len(), cfg.modalities.len()),
        ));
    }
    let mut tokens = Vec::with_capacity(cfg.modalities.len());
    for ((x, enc), m) in sample.modalities.iter().zip(&model.encoders).zip(&cfg.modalities) {
        if x.shape() != [m.seq_len, m.input_dim] {
            return Err(Error::shape(
                "embed",
                format!("sample {} modality {} has shape {:?}, expected [{}, {}]", sample.id, m.name, x.shape(), m.seq_len, m.input_dim),
            ));
        }
        let xv = tape.constant(x.clone());
        tokens.push(encode_modality(tape, p, enc, &cfg.encoder, xv)?);
    }
    let stack = tape.stack(&tokens)?;
    let refined = cross_modal_attention(tape, p, &model.cross, &cfg.encoder, stack)?;
    let fused = gate_fuse(tape, p, &model.gating, refined)?;
    match cfg.geometry {
        Geometry::Euclidean => Ok(fused.h),
        Geometry::Hyperbolic => {
            let alpha = geometry::alpha_from_rho(tape, p.var(model.rho))?;
            let y = geometry::project(tape, fused.h, alpha)?;
            geometry::residual_hyperbolic_block(tape, y, p.var(model.residual.w), p.var(model.residual.b), alpha)
        }
    }
}

/// Embed with dropout off and no gradients.
pub fn embed_values(model: &ModelParams, sample: &Sample) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let e = embed(&mut tape, &p, model, sample)?;
    Ok(tape.value(e).data().to_vec())
}

/// Embed onto the ball; fails for a Euclidean model.
pub fn embed_point(model: &ModelParams, sample: &Sample) -> Result<PoincarePoint> {
    if model.geometry() != Geometry::Hyperbolic {
        return Err(Error::Config("embed_point needs a hyperbolic model".into()));
    }
    PoincarePoint::new(embed_values(model, sample)?)
}

/// Representative point of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub class_id: u8,
    pub point: PoincarePoint,
}

/// One prototype per class from labelled support embeddings.
///
/// Hyperbolic prototypes are distance-weighted ([`geometry::weighted_prototype`]);
/// Euclidean prototypes are plain means.
pub fn compute_prototypes(tape: &mut Tape, geometry: Geometry, support: &[(Var, u8)]) -> Result<[Var; N_CLASSES]> {
    let mut protos = Vec::with_capacity(N_CLASSES);
    for class in 0..N_CLASSES as u8 {
        let members: Vec<Var> = support.iter().filter(|(_, l)| *l == class).map(|(v, _)| *v).collect();
        if members.is_empty() {
            return Err(Error::MissingClass(class));
        }
        let proto = match geometry {
            Geometry::Hyperbolic => geometry::weighted_prototype(tape, &members)?.0,
            Geometry::Euclidean => {
                let s = tape.stack(&members)?;
                tape.mean_rows(s)?
            }
        };
        protos.push(proto);
    }
    Ok([protos[0], protos[1]])
}

/// Point-level prototypes for a hyperbolic support set.
pub fn prototypes_of(support: &[(PoincarePoint, u8)]) -> Result<Vec<Prototype>> {
    (0..N_CLASSES as u8)
        .map(|class| {
            let members: Vec<PoincarePoint> = support.iter().filter(|(_, l)| *l == class).map(|(p, _)| p.clone()).collect();
            if members.is_empty() {
                return Err(Error::MissingClass(class));
            }
            Ok(Prototype {
                class_id: class,
                point: geometry::prototype_of(&members)?.0,
            })
        })
        .collect()
}

/// `(2)` vector of distances from `query` to each prototype. Euclidean
/// distances are squared.
pub fn distances(tape: &mut Tape, geometry: Geometry, query: Var, protos: &[Var; N_CLASSES]) -> Result<Var> {
    let d = protos
        .iter()
        .map(|p| match geometry {
            Geometry::Hyperbolic => geometry::poincare_distance(tape, query, *p),
            Geometry::Euclidean => {
                let diff = tape.sub(query, *p)?;
                tape.sum_squares(diff)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    tape.stack(&d)
}

/// Class probabilities `softmax(-d)`.
pub fn classify(tape: &mut Tape, geometry: Geometry, query: Var, protos: &[Var; N_CLASSES]) -> Result<Var> {
    let d = distances(tape, geometry, query, protos)?;
    let neg = tape.neg(d)?;
    tape.softmax(neg, 0)
}

/// `log softmax(-d)`, the numerically stable form used by the loss.
pub fn log_probabilities(tape: &mut Tape, geometry: Geometry, query: Var, protos: &[Var; N_CLASSES]) -> Result<Var> {
    let d = distances(tape, geometry, query, protos)?;
    let neg = tape.neg(d)?;
    tape.log_softmax(neg, 0)
}

/// Point-level classification of a ball point against hyperbolic prototypes.
pub fn classify_point(query: &PoincarePoint, protos: &[Prototype]) -> Result<Vec<f64>> {
    let d = protos
        .iter()
        .map(|p| geometry::distance(query, &p.point))
        .collect::<Result<Vec<_>>>()?;
    let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|v| (m - v).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Mean over queries of `-log p(true class)`, given per-query log-probabilities.
pub fn proto_loss(tape: &mut Tape, log_probs: &[Var], labels: &[u8]) -> Result<Var> {
    if log_probs.is_empty() || log_probs.len() != labels.len() {
        return Err(Error::shape("proto_loss", format!("{} queries, {} labels", log_probs.len(), labels.len())));
    }
    let picked = log_probs
        .iter()
        .zip(labels)
        .map(|(lp, l)| tape.index(*lp, *l as usize))
        .collect::<Result<Vec<_>>>()?;
    let s = tape.stack(&picked)?;
    let m = tape.mean(s)?;
    tape.neg(m)
}

/// Sign convention of the angular margin hinge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AngularForm {
    /// `max(0, γ - cos(q, p_true) + max_other cos(q, p_other))`.
    Corrected,
    /// `max(0, cos(q, p_true) + γ - max_other cos(q, p_other))`.
    Literal,
}

impl std::str::FromStr for AngularForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(AngularForm::Corrected),
            "literal" => Ok(AngularForm::Literal),
            other => Err(Error::Config(format!("angular_form must be corrected|literal, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for AngularForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AngularForm::Corrected => "corrected",
            AngularForm::Literal => "literal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Proto,
    Angular,
    Combined,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proto" => Ok(LossMode::Proto),
            "angular" => Ok(LossMode::Angular),
            "combined" => Ok(LossMode::Combined),
            other => Err(Error::Config(format!("loss mode must be proto|angular|combined, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Proto => "proto",
            LossMode::Angular => "angular",
            LossMode::Combined => "combined",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub mode: LossMode,
    pub angular_form: AngularForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            lambda: 1.0,
            mode: LossMode::Combined,
            angular_form: AngularForm::Corrected,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "loss gamma and lambda must be >= 0, got {} and {}",
                self.gamma, self.lambda
            )));
        }
        Ok(())
    }
}

/// Ambient cosine between two vectors; zero when either is the zero vector.
pub fn cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    let dot = tape.sum(prod)?;
    let na = tape.norm(a, COSINE_EPS)?;
    let nb = tape.norm(b, COSINE_EPS)?;
    let den = tape.mul(na, nb)?;
    tape.div(dot, den)
}

/// Hinge on the cosine gap between the true prototype and the best other
/// prototype, averaged over queries.
pub fn angular_loss(
    tape: &mut Tape,
    queries: &[Var],
    labels: &[u8],
    protos: &[Var; N_CLASSES],
    gamma: f64,
    form: AngularForm,
) -> Result<Var> {
    if queries.is_empty() || queries.len() != labels.len() {
        return Err(Error::shape("angular_loss", format!("{} queries, {} labels", queries.len(), labels.len())));
    }
    let mut terms = Vec::with_capacity(queries.len());
    for (q, &label) in queries.iter().zip(labels) {
        let true_cos = cosine(tape, *q, protos[label as usize])?;
        let others = protos
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != label as usize)
            .map(|(_, p)| cosine(tape, *q, *p))
            .collect::<Result<Vec<_>>>()?;
        let others = tape.stack(&others)?;
        let best_other = tape.max(others)?;
        let gap = match form {
            AngularForm::Corrected => tape.sub(best_other, true_cos)?,
            AngularForm::Literal => tape.sub(true_cos, best_other)?,
        };
        let shifted = tape.affine(gap, 1.0, gamma)?;
        terms.push(tape.relu(shifted)?);
    }
    let s = tape.stack(&terms)?;
    tape.mean(s)
}

/// `proto + λ·angular` for the combined mode; single-term modes drop the other.
pub fn total_loss(tape: &mut Tape, proto: Var, angular: Var, cfg: &LossConfig) -> Result<Var> {
    match cfg.mode {
        LossMode::Proto => tape.affine(proto, 1.0, 0.0),
        LossMode::Angular => tape.affine(angular, 1.0, 0.0),
        LossMode::Combined => {
            let weighted = tape.affine(angular, cfg.lambda, 0.0)?;
            tape.add(proto, weighted)
        }
    }
}

/// Graph handles produced by [`episode_loss`].
#[derive(Clone, Debug)]
pub struct EpisodeLoss {
    pub total: Var,
    pub proto: Var,
    pub angular: Var,
    /// Support then query embeddings, in episode order.
    pub embeddings: Vec<Var>,
}

/// Embed an episode and build its total loss on `tape`.
pub fn episode_loss(
    tape: &mut Tape,
    p: &Bound,
    model: &ModelParams,
    pool: &[Sample],
    episode: &Episode,
    loss: &LossConfig,
) -> Result<EpisodeLoss> {
    let geometry = model.geometry();
    let mut support = Vec::with_capacity(episode.support.len());
    let mut embeddings = Vec::with_capacity(episode.support.len() + episode.query.len());
    for s in episode.support_samples(pool) {
        let e = embed(tape, p, model, s)?;
        support.push((e, s.label));
        embeddings.push(e);
    }
    let protos = compute_prototypes(tape, geometry, &support)?;
    let mut queries = Vec::with_capacity(episode.query.len());
    let mut labels = Vec::with_capacity(episode.query.len());
    let mut log_probs = Vec::with_capacity(episode.query.len());
    for s in episode.query_samples(pool) {
        let e = embed(tape, p, model, s)?;
        log_probs.push(log_probabilities(tape, geometry, e, &protos)?);
        queries.push(e);
        labels.push(s.label);
        embeddings.push(e);
    }
    let proto = proto_loss(tape, &log_probs, &labels)?;
    let angular = angular_loss(tape, &queries, &labels, &protos, loss.gamma, loss.angular_form)?;
    let total = total_loss(tape, proto, angular, loss)?;
    Ok(EpisodeLoss {
        total,
        proto,
        angular,
        embeddings,
    })
}
