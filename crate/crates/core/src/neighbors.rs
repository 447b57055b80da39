//! Exact cosine k-NN and candidate label sets.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, TrainingView};
use crate::error::{NearError, Result};
use crate::linalg::dot;

/// RNG stream reserved for random candidate sets.
const CANDIDATE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateMode {
    Knn,
    Random,
}

/// For each image, `kappa` image indices: itself first, then the `kappa - 1`
/// most similar others by cosine, ties broken by ascending index.
///
/// Embeddings are assumed unit-norm, so cosine is the dot product.
pub fn knn_indices<E: AsRef<[f64]>>(embeddings: &[E], kappa: usize) -> Result<Vec<Vec<usize>>> {
    let n = embeddings.len();
    if kappa < 1 || kappa > n {
        return Err(NearError::InvalidNeighborCount { kappa, n });
    }
    let rows = (0..n)
        .map(|i| {
            let ei = embeddings[i].as_ref();
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(ei, embeddings[j].as_ref()), j))
                .collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            std::iter::once(i)
                .chain(others.into_iter().take(kappa - 1).map(|(_, j)| j))
                .collect()
        })
        .collect();
    Ok(rows)
}

/// Draws `kappa - 1` distinct other images per row, uniformly.
pub fn random_indices(n: usize, kappa: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if kappa < 1 || kappa > n {
        return Err(NearError::InvalidNeighborCount { kappa, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(CANDIDATE_STREAM);
    let rows = (0..n)
        .map(|i| {
            let picks = index::sample(&mut rng, n - 1, kappa - 1);
            std::iter::once(i)
                .chain(picks.into_iter().map(|j| if j >= i { j + 1 } else { j }))
                .collect()
        })
        .collect();
    Ok(rows)
}

/// Per-image candidate sets `S_i` and confidence vectors `q_i`.
///
/// Sets hold label indices into the [`LabelSpace`], own label first. Each
/// `q_i` is dense over the space, uniform over `S_i` and zero elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateState {
    pub sets: Vec<Vec<usize>>,
    pub confidence: Vec<Vec<f64>>,
}

impl CandidateState {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Candidate sets spelled out as label strings.
    pub fn named_sets<'a>(&self, space: &'a LabelSpace) -> Vec<Vec<&'a str>> {
        self.sets
            .iter()
            .map(|s| s.iter().map(|&j| space.label(j)).collect())
            .collect()
    }

    /// Support of `q_i` as sorted label indices.
    pub fn support(&self, i: usize) -> Vec<usize> {
        self.confidence[i]
            .iter()
            .enumerate()
            .filter(|(_, q)| **q > 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    /// Candidate sets where each image keeps only its own label.
    pub fn singletons(view: TrainingView<'_>, space: &LabelSpace) -> Result<Self> {
        let rows: Vec<Vec<usize>> = (0..view.len()).map(|i| vec![i]).collect();
        Self::from_neighbor_rows(view, space, &rows)
    }

    /// Collapses each row of image indices into a distinct label set.
    pub fn from_neighbor_rows(
        view: TrainingView<'_>,
        space: &LabelSpace,
        rows: &[Vec<usize>],
    ) -> Result<Self> {
        let k = space.k();
        let mut sets = Vec::with_capacity(rows.len());
        let mut confidence = Vec::with_capacity(rows.len());
        for row in rows {
            let mut set: Vec<usize> = Vec::with_capacity(row.len());
            for &img in row {
                let label = view.label(img);
                let j = space
                    .index_of(label)
                    .ok_or_else(|| NearError::UnknownLabel(label.to_string()))?;
                if !set.contains(&j) {
                    set.push(j);
                }
            }
            let mut q = vec![0.0; k];
            let mass = 1.0 / set.len() as f64;
            for &j in &set {
                q[j] = mass;
            }
            sets.push(set);
            confidence.push(q);
        }
        Ok(Self { sets, confidence })
    }
}

pub fn build_candidate_sets(
    view: TrainingView<'_>,
    space: &LabelSpace,
    kappa: usize,
    mode: CandidateMode,
    seed: u64,
) -> Result<CandidateState> {
    let rows = match mode {
        CandidateMode::Knn => knn_indices(&view.embeddings(), kappa)?,
        CandidateMode::Random => random_indices(view.len(), kappa, seed)?,
    };
    CandidateState::from_neighbor_rows(view, space, &rows)
}
