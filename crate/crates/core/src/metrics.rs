//! Vocabulary-free evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabelSpace;
use crate::error::{NearError, Result};
use crate::linalg::cosine;
use crate::neighbors::CandidateState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cacc: f64,
    pub sacc: f64,
    pub n_test: usize,
    pub label_space_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_quality: Option<f64>,
}

/// Minimum-cost perfect matching on a square matrix (Kuhn-Munkres with
/// potentials, O(n³)). Returns the total cost and `row -> column`.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> (i64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0, Vec::new());
    }
    assert!(
        cost.iter().all(|r| r.len() == n),
        "cost matrix must be square"
    );
    const INF: i64 = i64::MAX / 4;
    // 1-based internally; column 0 is the virtual start.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[i][assignment[i]]).sum();
    (total, assignment)
}

/// Contingency counts `counts[p][g]` between distinct predicted and distinct
/// ground-truth labels, zero-padded to square.
fn contingency<S: AsRef<str>>(gt: &[S], pred: &[S]) -> Vec<Vec<i64>> {
    let mut pred_ids = BTreeMap::new();
    let mut gt_ids = BTreeMap::new();
    for (g, p) in gt.iter().zip(pred) {
        let next = pred_ids.len();
        pred_ids.entry(p.as_ref()).or_insert(next);
        let next = gt_ids.len();
        gt_ids.entry(g.as_ref()).or_insert(next);
    }
    let size = pred_ids.len().max(gt_ids.len());
    let mut counts = vec![vec![0i64; size]; size];
    for (g, p) in gt.iter().zip(pred) {
        counts[pred_ids[p.as_ref()]][gt_ids[g.as_ref()]] += 1;
    }
    counts
}

/// Best accuracy over one-to-one relabelings of the predictions.
pub fn cluster_accuracy<S: AsRef<str>>(gt: &[S], pred: &[S]) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(NearError::LengthMismatch {
            left: gt.len(),
            right: pred.len(),
        });
    }
    if gt.is_empty() {
        return Err(NearError::EmptyDataset);
    }
    let counts = contingency(gt, pred);
    let cost: Vec<Vec<i64>> = counts
        .iter()
        .map(|row| row.iter().map(|c| -c).collect())
        .collect();
    let (total, _) = min_cost_assignment(&cost);
    Ok((-total) as f64 / gt.len() as f64)
}

fn lookup<'a>(emb: &'a BTreeMap<String, Vec<f64>>, label: &str) -> Result<&'a [f64]> {
    emb.get(label)
        .map(Vec::as_slice)
        .ok_or_else(|| NearError::MissingLabelEmbedding(label.to_string()))
}

/// Mean cosine between embeddings of predicted and ground-truth labels.
pub fn semantic_accuracy<S: AsRef<str>>(
    pred: &[S],
    gt: &[S],
    label_embeddings: &BTreeMap<String, Vec<f64>>,
) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(NearError::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(NearError::EmptyDataset);
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += cosine(
            lookup(label_embeddings, p.as_ref())?,
            lookup(label_embeddings, g.as_ref())?,
        );
    }
    Ok(total / gt.len() as f64)
}

/// Mean over images of the best cosine between any candidate and the
/// ground-truth label.
pub fn candidate_quality<S: AsRef<str>>(
    candidates: &CandidateState,
    space: &LabelSpace,
    gt: &[S],
    label_embeddings: &BTreeMap<String, Vec<f64>>,
) -> Result<f64> {
    if candidates.len() != gt.len() {
        return Err(NearError::LengthMismatch {
            left: candidates.len(),
            right: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(NearError::EmptyDataset);
    }
    let mut total = 0.0;
    for (set, g) in candidates.sets.iter().zip(gt) {
        let truth = lookup(label_embeddings, g.as_ref())?;
        let mut best = f64::NEG_INFINITY;
        for &j in set {
            best = best.max(cosine(lookup(label_embeddings, space.label(j))?, truth));
        }
        total += best;
    }
    Ok(total / gt.len() as f64)
}
