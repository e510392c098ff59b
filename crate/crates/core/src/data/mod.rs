//! Datasets: synthetic generation, the `(N, L, D)` text format, sequence
//! length normalisation and z-score standardisation.

mod io;
mod scaler;
mod synth;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_TAG};
pub use scaler::{standardize_apply, standardize_fit_transform, Scaler};
pub use synth::{generate_synthetic, SynthSpec};

use crate::encoder::ModalityConfig;
use crate::error::{Error, Result};
use crate::fewshot::Sample;
use crate::tensor::Tensor;

/// Shape summary of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    /// `(name, d_m)` in column order.
    pub modalities: Vec<(String, usize)>,
    pub seq_len: usize,
    pub n: usize,
    pub class_counts: [usize; 2],
}

impl DatasetMeta {
    /// Total feature width `D = Σ d_m`.
    pub fn feature_dim(&self) -> usize {
        self.modalities.iter().map(|(_, d)| d).sum()
    }

    pub fn modality_configs(&self) -> Result<Vec<ModalityConfig>> {
        self.modalities
            .iter()
            .map(|(name, d)| ModalityConfig::new(name.clone(), *d, self.seq_len))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Build a dataset, checking every sample against the modality layout.
    pub fn new(modalities: Vec<(String, usize)>, seq_len: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut class_counts = [0usize; 2];
        for s in &samples {
            if s.label > 1 {
                return Err(Error::Format(format!("sample {} has label {}", s.id, s.label)));
            }
            if s.modalities.len() != modalities.len() {
                return Err(Error::Format(format!(
                    "sample {} has {} modalities, expected {}",
                    s.id,
                    s.modalities.len(),
                    modalities.len()
                )));
            }
            for (t, (name, d)) in s.modalities.iter().zip(&modalities) {
                if t.shape() != [seq_len, *d] {
                    return Err(Error::Format(format!(
                        "sample {} modality {name} has shape {:?}, expected [{seq_len}, {d}]",
                        s.id,
                        t.shape()
                    )));
                }
            }
            class_counts[s.label as usize] += 1;
        }
        Ok(Self {
            meta: DatasetMeta {
                modalities,
                seq_len,
                n: samples.len(),
                class_counts,
            },
            samples,
        })
    }
}

/// Keep the first `target` rows, or append zero rows up to `target`.
pub fn pad_trim(sequence: &Tensor, target: usize) -> Result<Tensor> {
    let (len, d) = sequence.dims2()?;
    if len == 0 {
        return Err(Error::Empty("pad_trim"));
    }
    let mut data = sequence.data()[..len.min(target) * d].to_vec();
    data.resize(target * d, 0.0);
    Tensor::matrix(target, d, data)
}
