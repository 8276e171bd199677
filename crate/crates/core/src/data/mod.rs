//! Datasets: in-memory types, JSONL and packed binary files, the synthetic
//! corpus generator, and temporal segment pooling.

mod binary;
mod jsonl;
mod segments;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use binary::{read_binary, write_binary, BINARY_MAGIC, BINARY_VERSION};
pub use jsonl::{read_jsonl, write_jsonl};
pub use segments::{
    augment_dataset, augment_dataset_with, mean_pool, sample_frames, segment_bounds, segment_means, segment_pool,
    SegmentStat,
};
pub use synth::{generate_synthetic, GroundTruth, SynthConfig};

/// Whether a file holds pooled video vectors or frame sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Video,
    Frame,
}

/// One labeled video as a single pooled feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoExample {
    pub id: String,
    pub features: Vec<f64>,
    /// Strictly increasing class ids.
    pub labels: Vec<usize>,
}

/// One labeled video as a `[T × d]` frame matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameExample {
    pub id: String,
    pub frames: Tensor,
    pub labels: Vec<usize>,
}

pub trait Example {
    fn id(&self) -> &str;
    fn labels(&self) -> &[usize];
}

impl Example for VideoExample {
    fn id(&self) -> &str {
        &self.id
    }
    fn labels(&self) -> &[usize] {
        &self.labels
    }
}

impl Example for FrameExample {
    fn id(&self) -> &str {
        &self.id
    }
    fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<E> {
    /// Feature width `d`.
    pub dim: usize,
    pub num_classes: usize,
    pub examples: Vec<E>,
}

pub type VideoDataset = Dataset<VideoExample>;
pub type FrameDataset = Dataset<FrameExample>;

impl<E: Example> Dataset<E> {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            examples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.id().to_string()).collect()
    }

    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        self.examples.iter().map(|e| e.labels().to_vec()).collect()
    }

    /// Binary label matrix `[idx.len() × C]`.
    pub fn label_matrix(&self, idx: &[usize]) -> Tensor {
        let c = self.num_classes;
        let mut t = Tensor::zeros(&[idx.len().max(1), c.max(1)]);
        for (r, &i) in idx.iter().enumerate() {
            for &l in self.examples[i].labels() {
                t.values_mut()[r * c + l] = 1.0;
            }
        }
        t
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Self
    where
        E: Clone,
    {
        Self {
            dim: self.dim,
            num_classes: self.num_classes,
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// Deterministic split: the first `round(fraction · n)` examples and the rest.
    pub fn split(&self, fraction: f64) -> (Self, Self)
    where
        E: Clone,
    {
        let n = ((self.len() as f64) * fraction).round() as usize;
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

impl VideoDataset {
    /// Feature matrix `[idx.len() × d]`.
    pub fn feature_matrix(&self, idx: &[usize]) -> Tensor {
        let mut v = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            v.extend_from_slice(&self.examples[i].features);
        }
        Tensor::new(&[idx.len(), self.dim], v).expect("validated feature widths")
    }
}

impl FrameDataset {
    /// Video-level view: l2-normalized mean of each video's frames.
    pub fn to_video(&self) -> VideoDataset {
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            examples: self
                .examples
                .iter()
                .map(|e| VideoExample {
                    id: e.id.clone(),
                    features: mean_pool(&e.frames),
                    labels: e.labels.clone(),
                })
                .collect(),
        }
    }
}

/// A dataset of either kind, as read from a file.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyDataset {
    Video(VideoDataset),
    Frame(FrameDataset),
}

impl AnyDataset {
    pub fn kind(&self) -> Kind {
        match self {
            AnyDataset::Video(_) => Kind::Video,
            AnyDataset::Frame(_) => Kind::Frame,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyDataset::Video(d) => d.len(),
            AnyDataset::Frame(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        match self {
            AnyDataset::Video(d) => d.num_classes,
            AnyDataset::Frame(d) => d.num_classes,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        match self {
            AnyDataset::Video(d) => d.ids(),
            AnyDataset::Frame(d) => d.ids(),
        }
    }

    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        match self {
            AnyDataset::Video(d) => d.label_sets(),
            AnyDataset::Frame(d) => d.label_sets(),
        }
    }

    /// Video-level view (frames are mean-pooled).
    pub fn into_video(self) -> VideoDataset {
        match self {
            AnyDataset::Video(d) => d,
            AnyDataset::Frame(d) => d.to_video(),
        }
    }

    pub fn into_frames(self) -> Result<FrameDataset> {
        match self {
            AnyDataset::Frame(d) => Ok(d),
            AnyDataset::Video(_) => Err(Error::Data("expected a frame-level dataset, got video-level".into())),
        }
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "mtds")
}

/// Read a dataset; `.mtds` files use the packed binary format, anything else
/// JSON Lines. An empty JSONL file yields an empty video dataset.
pub fn load_dataset(path: &Path) -> Result<AnyDataset> {
    if is_binary(path) {
        read_binary(path)
    } else {
        read_jsonl(path)
    }
}

pub fn save_dataset(path: &Path, ds: &AnyDataset) -> Result<()> {
    if is_binary(path) {
        write_binary(path, ds)
    } else {
        write_jsonl(path, ds)
    }
}

/// Check one record against the dataset header; `at` names it in errors.
pub(crate) fn validate_labels(labels: &[i64], num_classes: usize, at: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        if l < 0 || l as usize >= num_classes {
            return Err(Error::Data(format!("{at}: label {l} out of range [0, {num_classes})")));
        }
        let l = l as usize;
        if out.last().is_some_and(|&p| p >= l) {
            return Err(Error::Data(format!("{at}: labels must be strictly increasing")));
        }
        out.push(l);
    }
    Ok(out)
}

pub(crate) fn validate_values(values: &[f64], at: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{at}: non-finite value at index {i}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_validation() {
        assert_eq!(validate_labels(&[0, 3], 4, "x").unwrap(), vec![0, 3]);
        let e = validate_labels(&[1, 4], 4, "line 2").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("label 4"), "{e}");
        assert!(validate_labels(&[2, 2], 4, "x").is_err());
        assert!(validate_labels(&[-1], 4, "x").is_err());
    }

    #[test]
    fn matrices_and_split() {
        let ds = VideoDataset {
            dim: 2,
            num_classes: 3,
            examples: (0..5)
                .map(|i| VideoExample {
                    id: format!("v{i}"),
                    features: vec![i as f64, -(i as f64)],
                    labels: vec![i % 3],
                })
                .collect(),
        };
        let x = ds.feature_matrix(&[4, 1]);
        assert_eq!(x.values(), &[4.0, -4.0, 1.0, -1.0]);
        let y = ds.label_matrix(&[4, 1]);
        assert_eq!(y.values(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let (a, b) = ds.split(0.6);
        assert_eq!((a.len(), b.len()), (3, 2));
        assert_eq!(b.examples[0].id, "v3");
    }
}
