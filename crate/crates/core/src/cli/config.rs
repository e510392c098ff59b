//! Flat `key = value` configuration with dotted section keys.

use std::path::Path;

use crate::checks::SuiteConfig;
use crate::data::SynthSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fewshot::LossConfig;
use crate::stats::AblationAxis;
use crate::train::TrainConfig;

/// Every recognised key with its default, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("data.path", ""),
    ("data.n_per_class", "100"),
    ("data.modalities", "mod0:4,mod1:3,mod2:2"),
    ("data.seq_len", "120"),
    ("data.separation", "8"),
    ("data.noise_sigma", "0.5"),
    ("data.hierarchy_depth", "2"),
    ("data.seed", "0"),
    ("model.path", ""),
    ("model.embed_dim", "64"),
    ("model.heads", "4"),
    ("model.dropout", "0.1"),
    ("model.pool", "mean"),
    ("model.ln_eps", "0.000001"),
    ("model.alpha_init", "1"),
    ("model.alpha_trainable", "true"),
    ("model.geometry", "hyperbolic"),
    ("loss.mode", "combined"),
    ("loss.gamma", "0.2"),
    ("loss.lambda", "1"),
    ("loss.angular_form", "corrected"),
    ("train.learning_rate", "0.001"),
    ("train.epochs", "50"),
    ("train.episodes_per_epoch", "100"),
    ("train.k", "1"),
    ("train.b", "4"),
    ("train.seed", "0"),
    ("train.repeats", "5"),
    ("train.test_fraction", "0.2"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.adam_eps", "0.00000001"),
    ("train.clip_norm", "10"),
    ("eval.episodes", "200"),
    ("eval.split", "test"),
    ("ablate.axis", "curvature"),
    ("ablate.values", "0.5,1,2"),
    ("gradcheck.trials", "100"),
    ("gradcheck.step", "0.001"),
    ("gradcheck.tol", "0.0001"),
    ("gradcheck.seed", "0"),
];

/// Resolved key/value pairs; every key in [`KEYS`] is present.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: Vec<(String, String)>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn nearest_key(key: &str) -> String {
    KEYS.iter()
        .min_by_key(|(k, _)| strsim::levenshtein(key, k))
        .map(|(k, _)| k.to_string())
        .unwrap_or_default()
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => {
                entry.1 = value.to_string();
                Ok(())
            }
            None => Err(Error::UnknownKey {
                key: key.to_string(),
                suggestion: nearest_key(key),
            }),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("config key {key} is not registered"))
    }

    /// Apply `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {item:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Text form that [`Config::apply_text`] reads back to the same values.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse value {raw:?}")))
    }

    fn parse_with<T>(&self, key: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<T> {
        f(self.get(key)).map_err(|e| Error::Config(format!("key `{key}`: {e}")))
    }

    pub fn modalities(&self) -> Result<Vec<(String, usize)>> {
        let raw = self.get("data.modalities");
        raw.split(',')
            .map(|part| {
                let (name, d) = part
                    .trim()
                    .rsplit_once(':')
                    .ok_or_else(|| Error::Config(format!("key `data.modalities`: expected name:dim, got {part:?}")))?;
                let d = d
                    .parse()
                    .map_err(|_| Error::Config(format!("key `data.modalities`: bad width in {part:?}")))?;
                Ok((name.to_string(), d))
            })
            .collect()
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let spec = SynthSpec {
            n_per_class: self.parse("data.n_per_class")?,
            modalities: self.modalities()?,
            seq_len: self.parse("data.seq_len")?,
            separation: self.parse("data.separation")?,
            noise_sigma: self.parse("data.noise_sigma")?,
            hierarchy_depth: self.parse("data.hierarchy_depth")?,
            seed: self.parse("data.seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.parse("train.learning_rate")?,
            epochs: self.parse("train.epochs")?,
            episodes_per_epoch: self.parse("train.episodes_per_epoch")?,
            k: self.parse("train.k")?,
            b: self.parse("train.b")?,
            seed: self.parse("train.seed")?,
            repeats: self.parse("train.repeats")?,
            test_fraction: self.parse("train.test_fraction")?,
            eval_episodes: self.parse("eval.episodes")?,
            beta1: self.parse("train.beta1")?,
            beta2: self.parse("train.beta2")?,
            adam_eps: self.parse("train.adam_eps")?,
            clip_norm: self.parse("train.clip_norm")?,
            loss: LossConfig {
                gamma: self.parse("loss.gamma")?,
                lambda: self.parse("loss.lambda")?,
                mode: self.parse_with("loss.mode", str::parse)?,
                angular_form: self.parse_with("loss.angular_form", str::parse)?,
            },
            encoder: EncoderConfig {
                embed_dim: self.parse("model.embed_dim")?,
                heads: self.parse("model.heads")?,
                dropout: self.parse("model.dropout")?,
                pool: self.parse_with("model.pool", str::parse)?,
                ln_eps: self.parse("model.ln_eps")?,
            },
            alpha_init: self.parse("model.alpha_init")?,
            alpha_trainable: self.parse("model.alpha_trainable")?,
            geometry: self.parse_with("model.geometry", str::parse)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ablation_axis(&self) -> Result<AblationAxis> {
        let values: Vec<&str> = self.get("ablate.values").split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        let floats = || {
            values
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("key `ablate.values`: {v:?} is not a number"))))
                .collect::<Result<Vec<_>>>()
        };
        let axis = match self.get("ablate.axis") {
            "loss" => AblationAxis::Loss(values.iter().map(|v| v.parse()).collect::<Result<Vec<_>>>()?),
            "curvature" => AblationAxis::Curvature(floats()?),
            "lambda" => AblationAxis::Lambda(floats()?),
            other => return Err(Error::Config(format!("key `ablate.axis`: expected loss|curvature|lambda, got {other:?}"))),
        };
        if axis.is_empty() {
            return Err(Error::Config("key `ablate.values` is empty".into()));
        }
        Ok(axis)
    }

    pub fn suite_config(&self) -> Result<SuiteConfig> {
        Ok(SuiteConfig {
            trials: self.parse("gradcheck.trials")?,
            step: self.parse("gradcheck.step")?,
            tol: self.parse("gradcheck.tol")?,
            seed: self.parse("gradcheck.seed")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_valid_configs() {
        let c = Config::default();
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.synth_spec().unwrap(), SynthSpec::default());
        assert_eq!(c.ablation_axis().unwrap(), AblationAxis::Curvature(vec![0.5, 1.0, 2.0]));
        assert_eq!(c.suite_config().unwrap(), SuiteConfig::default());
    }

    #[test]
    fn file_then_overrides() {
        let mut c = Config::default();
        c.apply_text("# comment\ntrain.k = 3\n\ntrain.b = 2 # trailing\n", "c.cfg").unwrap();
        c.apply_override("train.k=5").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!((t.k, t.b), (5, 2));
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let mut c = Config::default();
        let err = c.apply_override("train.lerning_rate=0.1").unwrap_err();
        match err {
            Error::UnknownKey { suggestion, .. } => assert_eq!(suggestion, "train.learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_are_reported() {
        let mut c = Config::default();
        c.set("train.k", "many").unwrap();
        let err = c.train_config().unwrap_err().to_string();
        assert!(err.contains("train.k"), "{err}");
        let mut c = Config::default();
        c.set("loss.mode", "hinge").unwrap();
        assert!(c.train_config().unwrap_err().to_string().contains("loss.mode"));
        assert!(Config::default().apply_override("train.k").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = Config::default();
        c.set("data.separation", "3.5").unwrap();
        let mut back = Config::default();
        back.apply_text(&c.render(), "echo").unwrap();
        assert_eq!(back, c);
    }
}
