use crate::error::{Error, Result};
use crate::fewshot::Sample;
use crate::tensor::Tensor;

/// Floor on the per-feature standard deviation.
const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-score statistics over the concatenated `D` feature columns.
///
/// Statistics pool every timestep of every training sample and use the
/// population (`n`) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(pool: &[Sample]) -> Result<Self> {
        let first = pool.first().ok_or(Error::Empty("standardize_fit_transform"))?;
        let widths: Vec<usize> = first.modalities.iter().map(|t| t.shape()[1]).collect();
        let d: usize = widths.iter().sum();
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for s in pool {
            for_each_row(s, &widths, |col, v| sum[col] += v)?;
            count += s.modalities[0].shape()[0];
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut sq = vec![0.0; d];
        for s in pool {
            for_each_row(s, &widths, |col, v| sq[col] += (v - mean[col]).powi(2))?;
        }
        let std = sq.iter().map(|v| (v / count as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        let mut offset = 0;
        let mut modalities = Vec::with_capacity(sample.modalities.len());
        for t in &sample.modalities {
            let (len, w) = t.dims2()?;
            if offset + w > self.mean.len() {
                return Err(Error::shape("standardize_apply", format!("sample {} is wider than the scaler ({})", sample.id, self.mean.len())));
            }
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(w) {
                for (j, v) in row.iter_mut().enumerate() {
                    let c = offset + j;
                    *v = (*v - self.mean[c]) / self.std[c].max(STD_FLOOR);
                }
            }
            modalities.push(Tensor::matrix(len, w, data)?);
            offset += w;
        }
        if offset != self.mean.len() {
            return Err(Error::shape("standardize_apply", format!("sample width {offset} vs scaler {}", self.mean.len())));
        }
        Ok(Sample {
            id: sample.id,
            label: sample.label,
            modalities,
        })
    }
}

fn for_each_row(s: &Sample, widths: &[usize], mut f: impl FnMut(usize, f64)) -> Result<()> {
    if s.modalities.len() != widths.len() {
        return Err(Error::shape("scaler", format!("sample {} modality count differs", s.id)));
    }
    let mut offset = 0;
    for (t, w) in s.modalities.iter().zip(widths) {
        if t.shape()[1] != *w {
            return Err(Error::shape("scaler", format!("sample {} modality width differs", s.id)));
        }
        for row in t.data().chunks(*w) {
            for (j, v) in row.iter().enumerate() {
                f(offset + j, *v);
            }
        }
        offset += w;
    }
    Ok(())
}

/// Fit a scaler on `pool` and return it with the transformed pool.
pub fn standardize_fit_transform(pool: &[Sample]) -> Result<(Scaler, Vec<Sample>)> {
    let scaler = Scaler::fit(pool)?;
    let out = standardize_apply(&scaler, pool)?;
    Ok((scaler, out))
}

/// Transform `pool` with previously fitted statistics.
pub fn standardize_apply(scaler: &Scaler, pool: &[Sample]) -> Result<Vec<Sample>> {
    pool.iter().map(|s| scaler.apply(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, cols: &[Vec<f64>]) -> Sample {
        // one modality, one row per timestep
        let len = cols[0].len();
        let d = cols.len();
        let mut data = Vec::with_capacity(len * d);
        for t in 0..len {
            for c in cols {
                data.push(c[t]);
            }
        }
        Sample {
            id,
            label: 0,
            modalities: vec![Tensor::matrix(len, d, data).unwrap()],
        }
    }

    #[test]
    fn population_z_scores() {
        let pool = vec![sample(0, &[vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]])];
        let (scaler, out) = standardize_fit_transform(&pool).unwrap();
        assert_eq!(scaler.mean, vec![2.0, 5.0]);
        let z = out[0].modalities[0].data();
        let expected = (1.5f64).sqrt(); // 1 / sqrt(2/3)
        assert!((z[0] + expected).abs() < 1e-12);
        assert!(z[2].abs() < 1e-12);
        assert!((z[4] - expected).abs() < 1e-12);
        assert!((z[4] - 1.2247).abs() < 1e-4);
        // constant column maps to zero
        assert_eq!([z[1], z[3], z[5]], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn transformed_train_pool_is_standard() {
        let pool: Vec<Sample> = (0..5)
            .map(|i| {
                let a: Vec<f64> = (0..7).map(|t| ((i * 7 + t) as f64).sin() * 3.0 + 2.0).collect();
                let b: Vec<f64> = (0..7).map(|t| ((i * 7 + t) as f64 * 0.3).cos() - 1.0).collect();
                sample(i, &[a, b])
            })
            .collect();
        let (_, out) = standardize_fit_transform(&pool).unwrap();
        for col in 0..2 {
            let vals: Vec<f64> = out.iter().flat_map(|s| s.modalities[0].data().iter().skip(col).step_by(2).copied()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn apply_is_affine_per_feature() {
        let train = vec![sample(0, &[vec![0.5, 2.0, -1.0, 4.0]])];
        let (scaler, _) = standardize_fit_transform(&train).unwrap();
        let at = |x: f64| scaler.apply(&sample(1, &[vec![x]])).unwrap().modalities[0].data()[0];
        let (x0, x1, x2) = (-3.0, 1.0, 7.5);
        let (y0, y1) = (at(x0), at(x1));
        let slope = (y1 - y0) / (x1 - x0);
        assert!((at(x2) - (y0 + slope * (x2 - x0))).abs() < 1e-12);
        // re-applying the stored statistics to the training pool reproduces the fit output
        let (_, fitted) = standardize_fit_transform(&train).unwrap();
        assert_eq!(standardize_apply(&scaler, &train).unwrap(), fitted);
    }

    #[test]
    fn empty_pool_is_rejected() {
        assert!(matches!(standardize_fit_transform(&[]), Err(Error::Empty(_))));
    }
}
