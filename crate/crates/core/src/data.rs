//! Labeled image samples and datasets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One image with its class label and optional ground-truth mask.
///
/// `image` is `C×H×W`, row-major per channel, values in `[0,1]`.
/// `mask` is `H×W` with values in `{0,1}` and is only used for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub label: usize,
    pub mask: Option<Vec<u8>>,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        image: Vec<f32>,
        channels: usize,
        height: usize,
        width: usize,
        label: usize,
        mask: Option<Vec<u8>>,
    ) -> Result<Self> {
        let id = id.into();
        if image.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "sample {id}: {} values for a {channels}×{height}×{width} image",
                image.len()
            )));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!("sample {id}: image values must lie in [0,1]")));
        }
        if let Some(m) = &mask {
            if m.len() != height * width {
                return Err(Error::Dimension(format!("sample {id}: mask size differs from image")));
            }
            if m.iter().any(|v| *v > 1) {
                return Err(Error::InvalidInput(format!("sample {id}: mask must be binary")));
            }
        }
        Ok(Self { id, image, channels, height, width, label, mask })
    }
}

/// A list of samples sharing one label space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
    /// Human-readable class names, indexed by label.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<SampleRecord>, class_names: Vec<String>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::InvalidInput(format!(
                "sample {} has label {} but only {} classes exist",
                s.id,
                s.label,
                class_names.len()
            )));
        }
        Ok(Self { samples, class_names })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Number of distinct labels actually present.
    pub fn present_classes(&self) -> usize {
        self.by_class().len()
    }

    /// Sample indices grouped by label.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.label).or_default().push(i);
        }
        map
    }

    /// New dataset holding clones of the selected samples.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_invariants_are_checked() {
        assert!(SampleRecord::new("a", vec![0.5; 12], 3, 2, 2, 0, Some(vec![0, 1, 1, 0])).is_ok());
        assert!(SampleRecord::new("a", vec![1.5; 12], 3, 2, 2, 0, None).is_err());
        assert!(SampleRecord::new("a", vec![0.5; 11], 3, 2, 2, 0, None).is_err());
        assert!(SampleRecord::new("a", vec![0.5; 12], 3, 2, 2, 0, Some(vec![0, 2, 1, 0])).is_err());
        assert!(SampleRecord::new("a", vec![0.5; 12], 3, 2, 2, 0, Some(vec![0, 1])).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_range_labels() {
        let s = SampleRecord::new("a", vec![0.5; 3], 3, 1, 1, 2, None).unwrap();
        assert!(Dataset::new(vec![s], vec!["x".into(), "y".into()]).is_err());
    }
}
