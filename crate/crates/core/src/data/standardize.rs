use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::dataset::{Dataset, Sample};

/// Granularity of z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Standardize {
    Off,
    /// One mean and std per modality over every element.
    Scalar,
    /// One mean and std per element position.
    PerElement,
}

impl fmt::Display for Standardize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Standardize::Off => "off",
            Standardize::Scalar => "scalar",
            Standardize::PerElement => "per_element",
        })
    }
}

impl FromStr for Standardize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "off" => Ok(Standardize::Off),
            "scalar" => Ok(Standardize::Scalar),
            "per_element" => Ok(Standardize::PerElement),
            other => Err(format!(
                "expected off, scalar or per_element, got {other:?}"
            )),
        }
    }
}

/// Mean and population std per modality; a single entry each in scalar
/// mode, one per element otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StandardizationStats {
    pub per_modality: BTreeMap<String, ModalityStats>,
}

/// Statistics of the training split. `Standardize::Off` yields empty stats
/// whose [`StandardizationStats::apply`] is the identity.
pub fn zscore(train: &Dataset, mode: Standardize) -> Result<StandardizationStats> {
    if mode == Standardize::Off {
        return Ok(StandardizationStats::default());
    }
    if train.len() < 2 {
        return Err(Error::Config(format!(
            "z-score needs at least 2 training samples, got {}",
            train.len()
        )));
    }
    let mut per_modality = BTreeMap::new();
    for spec in train.modalities() {
        let width = if mode == Standardize::Scalar {
            1
        } else {
            spec.numel()
        };
        let mut sum = vec![0.0; width];
        let mut count = 0usize;
        for s in train.samples() {
            for (i, v) in s.modalities[&spec.name].data().iter().enumerate() {
                sum[i % width] += v;
            }
            count += spec.numel() / width;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; width];
        for s in train.samples() {
            for (i, v) in s.modalities[&spec.name].data().iter().enumerate() {
                let d = v - mean[i % width];
                sq[i % width] += d * d;
            }
        }
        let std: Vec<f64> = sq.iter().map(|q| (q / count as f64).sqrt()).collect();
        for (i, (&sd, &mu)) in std.iter().zip(&mean).enumerate() {
            if !(sd > 1e-12 * (1.0 + mu.abs())) {
                let at = if width == 1 {
                    String::new()
                } else {
                    format!(" element {i}")
                };
                return Err(Error::Config(format!(
                    "modality {}{at} has zero standard deviation on the training split",
                    spec.name
                )));
            }
        }
        per_modality.insert(spec.name.clone(), ModalityStats { mean, std });
    }
    Ok(StandardizationStats { per_modality })
}

impl StandardizationStats {
    pub fn apply(&self, sample: &mut Sample) -> Result<()> {
        for (name, st) in &self.per_modality {
            let t = sample.modalities.get_mut(name).ok_or_else(|| {
                Error::Load(format!("sample {}: missing modality {name}", sample.id))
            })?;
            let width = st.mean.len();
            if t.numel() % width != 0 {
                return Err(Error::shape(
                    "standardize",
                    format!("{name}: stats width {width}"),
                ));
            }
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (*v - st.mean[i % width]) / st.std[i % width];
            }
        }
        Ok(())
    }

    pub fn apply_dataset(&self, ds: &mut Dataset) -> Result<()> {
        for s in ds.samples_mut() {
            self.apply(s)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModalitySpec;
    use crate::tensor::Tensor;

    fn ds(values: &[&[f64]]) -> Dataset {
        let n = values[0].len();
        let samples = values
            .iter()
            .enumerate()
            .map(|(i, v)| Sample {
                id: format!("x{i}"),
                subject: "s".into(),
                modalities: [("m".to_string(), Tensor::vector(v.to_vec()))]
                    .into_iter()
                    .collect(),
                labels: vec![0],
            })
            .collect();
        Dataset::new(vec![ModalitySpec::new("m", vec![n])], 1, samples).unwrap()
    }

    #[test]
    fn population_std() {
        let mut d = ds(&[&[1.0], &[3.0]]);
        let st = zscore(&d, Standardize::Scalar).unwrap();
        assert_eq!(st.per_modality["m"].mean, vec![2.0]);
        assert_eq!(st.per_modality["m"].std, vec![1.0]);
        st.apply_dataset(&mut d).unwrap();
        assert_eq!(d.samples()[0].modalities["m"].data(), &[-1.0]);
        assert_eq!(d.samples()[1].modalities["m"].data(), &[1.0]);
        // a second application shifts again
        st.apply_dataset(&mut d).unwrap();
        assert_eq!(d.samples()[0].modalities["m"].data(), &[-3.0]);
    }

    #[test]
    fn shifted_data_becomes_zero_mean() {
        let mut d = ds(&[&[101.0, 103.0], &[105.0, 99.0], &[100.0, 104.0]]);
        let st = zscore(&d, Standardize::Scalar).unwrap();
        st.apply_dataset(&mut d).unwrap();
        let all: Vec<f64> = d
            .samples()
            .iter()
            .flat_map(|s| s.modalities["m"].data().to_vec())
            .collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn per_element_and_errors() {
        let d = ds(&[&[1.0, 5.0], &[3.0, 5.0]]);
        assert!(zscore(&d, Standardize::Scalar).is_ok());
        let err = zscore(&d, Standardize::PerElement).unwrap_err().to_string();
        assert!(err.contains("element 1"), "{err}");
        assert!(zscore(&ds(&[&[1.0]]), Standardize::Scalar).is_err());
        assert!(zscore(&ds(&[&[0.1], &[0.1], &[0.1]]), Standardize::Scalar).is_err());
    }
}
