//! Dataset schema, validation, label spaces and one-hot encoding.
//!
//! A dataset is a single JSON document:
//!
//! ```json
//! {
//!   "dim": 4,
//!   "images": [{"id": "a", "embedding": [1, 0, 0, 0], "mllm_label": "sparrow", "gt_label": "finch"}],
//!   "label_embeddings": {"sparrow": [0, 1, 0, 0], "finch": [0, 0, 1, 0]}
//! }
//! ```
//!
//! Ground-truth labels are carried through loading but are only reachable
//! through [`EmbeddingDataset::ground_truth`]; the trainer works on a
//! [`TrainingView`], which has no path to them.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NearError, Result};
use crate::linalg::norm;

/// Embeddings whose norm is further than this from 1 are rejected on load.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;
const UNIT_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub embedding: Vec<f64>,
    pub mllm_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RawDataset {
    dim: usize,
    images: Vec<ImageRecord>,
    label_embeddings: BTreeMap<String, Vec<f64>>,
}

/// Validated, immutable set of image embeddings with generated labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    images: Vec<ImageRecord>,
    label_embeddings: BTreeMap<String, Vec<f64>>,
}

fn unit_or_reject(id: &str, v: &mut [f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NearError::NonUnitEmbedding {
            id: id.to_string(),
            norm: f64::NAN,
        });
    }
    let n = norm(v);
    if (n - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(NearError::NonUnitEmbedding {
            id: id.to_string(),
            norm: n,
        });
    }
    // Leaving rounding-level deviations alone keeps save/load bit-exact.
    if (n - 1.0).abs() > UNIT_SLACK {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

impl EmbeddingDataset {
    /// Validates and builds a dataset, renormalizing near-unit embeddings.
    pub fn new(
        dim: usize,
        mut images: Vec<ImageRecord>,
        mut label_embeddings: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(NearError::ShapeMismatch("dim must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(images.len());
        for img in &mut images {
            if !seen.insert(img.id.clone()) {
                return Err(NearError::DuplicateId(img.id.clone()));
            }
            if img.mllm_label.is_empty() {
                return Err(NearError::EmptyLabel(img.id.clone()));
            }
            if img.embedding.len() != dim {
                return Err(NearError::DimensionMismatch {
                    id: img.id.clone(),
                    expected: dim,
                    got: img.embedding.len(),
                });
            }
            unit_or_reject(&img.id, &mut img.embedding)?;
        }
        for (label, v) in &mut label_embeddings {
            if v.len() != dim {
                return Err(NearError::DimensionMismatch {
                    id: format!("label {label:?}"),
                    expected: dim,
                    got: v.len(),
                });
            }
            unit_or_reject(&format!("label {label:?}"), v)?;
        }
        for img in &images {
            let labels = std::iter::once(&img.mllm_label).chain(img.gt_label.as_ref());
            for label in labels {
                if !label_embeddings.contains_key(label) {
                    return Err(NearError::MissingLabelEmbedding(label.clone()));
                }
            }
        }
        Ok(Self {
            dim,
            images,
            label_embeddings,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(s).map_err(|source| NearError::Parse {
            what: "dataset".into(),
            source,
        })?;
        Self::new(raw.dim, raw.images, raw.label_embeddings)
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawDataset {
            dim: self.dim,
            images: self.images.clone(),
            label_embeddings: self.label_embeddings.clone(),
        };
        serde_json::to_string(&raw).expect("dataset serialization is infallible")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label_embeddings(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.label_embeddings
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.images.iter().map(|img| img.id.as_str())
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.images[i].embedding
    }

    /// The label-blind view handed to training code.
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { dataset: self }
    }

    /// Ground-truth labels for evaluation; fails if any image lacks one.
    pub fn ground_truth(&self) -> Result<Vec<&str>> {
        self.images
            .iter()
            .map(|img| {
                img.gt_label
                    .as_deref()
                    .ok_or_else(|| NearError::MissingGroundTruth(img.id.clone()))
            })
            .collect()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.images.iter().all(|img| img.gt_label.is_some())
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NearError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EmbeddingDataset::from_json_str(&text)
}

pub fn save_dataset(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset.to_json_string()).map_err(|source| NearError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read-only access to embeddings and generated labels, without ground truth.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    dataset: &'a EmbeddingDataset,
}

impl<'a> TrainingView<'a> {
    pub fn len(&self) -> usize {
        self.dataset.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim
    }

    pub fn embedding(&self, i: usize) -> &'a [f64] {
        &self.dataset.images[i].embedding
    }

    pub fn embeddings(&self) -> Vec<&'a [f64]> {
        self.dataset
            .images
            .iter()
            .map(|img| img.embedding.as_slice())
            .collect()
    }

    pub fn label(&self, i: usize) -> &'a str {
        &self.dataset.images[i].mllm_label
    }

    pub fn labels(&self) -> impl Iterator<Item = &'a str> + 'a {
        self.dataset
            .images
            .iter()
            .map(|img| img.mllm_label.as_str())
    }

    pub fn label_embeddings(&self) -> &'a BTreeMap<String, Vec<f64>> {
        &self.dataset.label_embeddings
    }
}

/// Sorted distinct generated labels `c_1..c_k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    /// Builds a space from arbitrary labels: dedupes and sorts by byte order.
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(NearError::EmptyDataset);
        }
        labels.sort_unstable();
        labels.dedup();
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, j: usize) -> &str {
        &self.labels[j]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn one_hot(&self, label: &str) -> Result<OneHot> {
        one_hot(label, self)
    }
}

pub fn build_label_space(view: TrainingView<'_>) -> Result<LabelSpace> {
    LabelSpace::from_labels(view.labels())
}

/// One-hot label encoding, stored as the hot index and the space size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHot {
    pub index: usize,
    pub k: usize,
}

impl OneHot {
    pub fn to_vec(self) -> Vec<f64> {
        let mut v = vec![0.0; self.k];
        v[self.index] = 1.0;
        v
    }
}

pub fn one_hot(label: &str, space: &LabelSpace) -> Result<OneHot> {
    space
        .index_of(label)
        .map(|index| OneHot {
            index,
            k: space.k(),
        })
        .ok_or_else(|| NearError::UnknownLabel(label.to_string()))
}
