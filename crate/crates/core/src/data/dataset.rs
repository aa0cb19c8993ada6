use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::ModalitySpec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: String,
    pub modalities: BTreeMap<String, Tensor>,
    pub labels: Vec<u8>,
}

/// An in-memory labelled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    modalities: Vec<ModalitySpec>,
    num_aus: usize,
    samples: Vec<Sample>,
}

/// Stacked model inputs plus `[B, C]` targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: BTreeMap<String, Tensor>,
    pub targets: Tensor,
}

impl Dataset {
    /// Checks that every sample carries each declared modality at its
    /// declared shape and exactly `num_aus` binary labels.
    pub fn new(
        modalities: Vec<ModalitySpec>,
        num_aus: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Load(format!("duplicate sample id {}", s.id)));
            }
            if s.labels.len() != num_aus || s.labels.iter().any(|&y| y > 1) {
                return Err(Error::Load(format!(
                    "sample {}: expected {num_aus} binary labels",
                    s.id
                )));
            }
            if s.modalities.len() != modalities.len() {
                return Err(Error::Load(format!(
                    "sample {}: has {} modalities, expected {}",
                    s.id,
                    s.modalities.len(),
                    modalities.len()
                )));
            }
            for m in &modalities {
                match s.modalities.get(&m.name) {
                    Some(t) if t.shape() == m.shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Load(format!(
                            "sample {}: modality {} has shape {:?}, expected {:?}",
                            s.id,
                            m.name,
                            t.shape(),
                            m.shape
                        )))
                    }
                    None => {
                        return Err(Error::Load(format!(
                            "sample {}: missing modality {}",
                            s.id, m.name
                        )))
                    }
                }
            }
        }
        Ok(Dataset {
            modalities,
            num_aus,
            samples,
        })
    }

    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.modalities
    }

    pub fn num_aus(&self) -> usize {
        self.num_aus
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.subject.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            modalities: self.modalities.clone(),
            num_aus: self.num_aus,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stacks `indices` into `[B, ...shape]` inputs per modality.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let b = indices.len();
        let mut inputs = BTreeMap::new();
        for m in &self.modalities {
            let mut data = Vec::with_capacity(b * m.numel());
            for &i in indices {
                data.extend_from_slice(self.samples[i].modalities[&m.name].data());
            }
            let mut shape = vec![b];
            shape.extend_from_slice(&m.shape);
            inputs.insert(m.name.clone(), Tensor::new(shape, data)?);
        }
        let mut targets = Vec::with_capacity(b * self.num_aus);
        for &i in indices {
            targets.extend(self.samples[i].labels.iter().map(|&y| f64::from(y)));
        }
        Ok(Batch {
            inputs,
            targets: Tensor::new(vec![b, self.num_aus], targets)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, v: f64, labels: Vec<u8>) -> Sample {
        Sample {
            id: id.into(),
            subject: "s1".into(),
            modalities: [("a".to_string(), Tensor::vector(vec![v, v + 1.0]))]
                .into_iter()
                .collect(),
            labels,
        }
    }

    #[test]
    fn batches_stack_in_index_order() {
        let ds = Dataset::new(
            vec![ModalitySpec::new("a", vec![2])],
            2,
            vec![sample("x", 0.0, vec![1, 0]), sample("y", 10.0, vec![0, 1])],
        )
        .unwrap();
        let b = ds.batch(&[1, 0]).unwrap();
        assert_eq!(b.inputs["a"].shape(), &[2, 2]);
        assert_eq!(b.inputs["a"].data(), &[10.0, 11.0, 0.0, 1.0]);
        assert_eq!(b.targets.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn validation() {
        let spec = vec![ModalitySpec::new("a", vec![2])];
        assert!(Dataset::new(spec.clone(), 2, vec![sample("x", 0.0, vec![1])]).is_err());
        assert!(Dataset::new(spec.clone(), 2, vec![sample("x", 0.0, vec![1, 2])]).is_err());
        let dup = vec![sample("x", 0.0, vec![1, 0]), sample("x", 1.0, vec![1, 0])];
        assert!(Dataset::new(spec, 2, dup).is_err());
        let wrong = vec![ModalitySpec::new("a", vec![3])];
        assert!(Dataset::new(wrong, 2, vec![sample("x", 0.0, vec![1, 0])]).is_err());
    }
}
