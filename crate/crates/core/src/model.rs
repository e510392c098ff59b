//! The full set of trainable weights and how they are laid out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Scaler;
use crate::encoder::{CrossModalParams, Dense, EncoderConfig, EncoderParams, GatingParams, ModalityConfig};
use crate::error::{Error, Result};
use crate::geometry::CurvatureParam;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Space in which embeddings, prototypes and distances live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    /// Poincaré ball with learned curvature scale and residual block.
    Hyperbolic,
    /// Fused vectors used directly, mean prototypes, squared Euclidean distance.
    Euclidean,
}

impl std::str::FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyperbolic" => Ok(Geometry::Hyperbolic),
            "euclidean" => Ok(Geometry::Euclidean),
            other => Err(Error::Config(format!("geometry must be hyperbolic|euclidean, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Geometry::Hyperbolic => "hyperbolic",
            Geometry::Euclidean => "euclidean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modalities: Vec<ModalityConfig>,
    pub encoder: EncoderConfig,
    pub alpha_init: f64,
    pub alpha_trainable: bool,
    pub geometry: Geometry,
}

impl ModelConfig {
    pub fn new(modalities: Vec<ModalityConfig>) -> Self {
        Self {
            modalities,
            encoder: EncoderConfig::default(),
            alpha_init: 1.0,
            alpha_trainable: true,
            geometry: Geometry::Hyperbolic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        self.encoder.validate()?;
        CurvatureParam::from_alpha(self.alpha_init).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Every weight of the embedding function, held in one ordered store.
///
/// Declaration order: per-modality encoders, cross-modal attention, gate,
/// curvature `rho`, residual block. The output projections of all attention
/// layers and the residual block start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<EncoderParams>,
    pub cross: CrossModalParams,
    pub gating: GatingParams,
    /// Scalar `rho` with `alpha = exp(rho)`.
    pub rho: ParamId,
    pub residual: Dense,
    /// Feature standardisation fitted on the training pool.
    pub scaler: Option<Scaler>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = config
            .modalities
            .iter()
            .map(|m| EncoderParams::new(&mut store, &mut rng, m, &config.encoder))
            .collect();
        let cross = CrossModalParams::new(&mut store, &mut rng, &config.encoder);
        let gating = GatingParams::new(&mut store, &mut rng, &config.encoder);
        let rho = store.add(
            "rho",
            Tensor::scalar(CurvatureParam::from_alpha(config.alpha_init)?.rho),
            config.alpha_trainable,
        );
        let d = config.encoder.embed_dim;
        let residual = Dense::zeroed(&mut store, "res", d, d);
        Ok(Self {
            config,
            store,
            encoders,
            cross,
            gating,
            rho,
            residual,
            scaler: None,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.encoder.embed_dim
    }

    pub fn geometry(&self) -> Geometry {
        self.config.geometry
    }

    pub fn curvature(&self) -> CurvatureParam {
        CurvatureParam {
            rho: self.store.get(self.rho).item(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.curvature().alpha()
    }

    /// Pin `alpha` to a value; `trainable = false` freezes it.
    pub fn set_alpha(&mut self, alpha: f64, trainable: bool) -> Result<()> {
        let rho = CurvatureParam::from_alpha(alpha)?.rho;
        *self.store.get_mut(self.rho) = Tensor::scalar(rho);
        self.store.set_trainable(self.rho, trainable);
        self.config.alpha_init = alpha;
        self.config.alpha_trainable = trainable;
        Ok(())
    }

    /// Add uniform noise in `[-scale, scale)` to every weight, including the
    /// zero-initialised ones, so that no gradient path is dead.
    pub fn perturb(&mut self, rng: &mut impl Rng, scale: f64) {
        for e in self.store.entries_mut() {
            for v in e.value.data_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }
}
