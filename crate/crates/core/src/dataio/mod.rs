//! Labeled feature-map datasets: the `PPFM` file format, a synthetic
//! generator with planted parts, and stratified splitting.

mod format;
mod seeding;
mod split;
mod synth;

use std::path::Path;

pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, FormatError};
pub use seeding::{stream_rng, RngStream};
pub use split::{split, split_indices};
pub use synth::{
    generate_synthetic, nearest_part_oracle_accuracy, read_manifest, write_manifest, GroundTruthManifest, PartPlacement,
    SyntheticSpec,
};

use crate::poolcore::FeatureMap;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub map: FeatureMap,
}

/// Immutable set of equally-sized labeled feature maps.
///
/// Feature values are held at `f32` precision (widened to `f64`) so that a
/// write/read cycle through `PPFM` is bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapDataset {
    height: usize,
    width: usize,
    depth: usize,
    num_classes: usize,
    samples: Vec<Sample>,
}

impl FeatureMapDataset {
    /// Builds a dataset, taking H, W, D from the first sample.
    pub fn new(samples: Vec<Sample>) -> Result<Self, DataError> {
        let (h, w, d) = samples
            .first()
            .map_or((0, 0, 0), |s| (s.map.height(), s.map.width(), s.map.depth()));
        Self::with_dims(h, w, d, samples)
    }

    pub fn with_dims(height: usize, width: usize, depth: usize, samples: Vec<Sample>) -> Result<Self, DataError> {
        let mut samples = samples;
        let mut num_classes = 0;
        for s in &mut samples {
            if (s.map.height(), s.map.width(), s.map.depth()) != (height, width, depth) {
                return Err(DataError::Invalid(format!(
                    "map {}x{}x{} in a {height}x{width}x{depth} dataset",
                    s.map.height(),
                    s.map.width(),
                    s.map.depth()
                )));
            }
            if s.map.data().iter().any(|&v| f64::from(v as f32) != v) {
                let data = s.map.data().iter().map(|&v| f64::from(v as f32)).collect();
                s.map = FeatureMap::new(height, width, depth, data)
                    .map_err(|e| DataError::Invalid(e.to_string()))?;
            }
            num_classes = num_classes.max(s.label + 1);
        }
        let mut seen = vec![false; num_classes];
        for s in &samples {
            seen[s.label] = true;
        }
        if let Some(missing) = seen.iter().position(|&x| !x) {
            return Err(DataError::Invalid(format!(
                "labels must be dense in [0, {num_classes}); class {missing} has no samples"
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            num_classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(H, W, D)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }

    /// Subset keeping the class count of `self`.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let ds = Self::with_dims(self.height, self.width, self.depth, samples)?;
        if ds.num_classes != self.num_classes {
            return Err(DataError::Invalid("subset drops a class".into()));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: usize, v: f64) -> Sample {
        Sample {
            label,
            map: FeatureMap::new(1, 1, 2, vec![v, -v]).unwrap(),
        }
    }

    #[test]
    fn labels_must_be_dense() {
        assert!(FeatureMapDataset::new(vec![sample(0, 1.0), sample(2, 1.0)]).is_err());
        let ds = FeatureMapDataset::new(vec![sample(1, 1.0), sample(0, 1.0)]).unwrap();
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn values_are_held_at_f32_precision() {
        let ds = FeatureMapDataset::new(vec![sample(0, 0.1)]).unwrap();
        assert_eq!(ds.sample(0).map.data()[0], f64::from(0.1f32));
    }

    #[test]
    fn mixed_dims_rejected() {
        let other = Sample {
            label: 0,
            map: FeatureMap::new(1, 2, 1, vec![0.0, 0.0]).unwrap(),
        };
        assert!(FeatureMapDataset::new(vec![sample(0, 1.0), other]).is_err());
    }
}
