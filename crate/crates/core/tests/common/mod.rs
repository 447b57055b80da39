//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use near_core::classifier::{ce_loss, ClassifierParams};
use near_core::linalg::normalize;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Best matched count over every injective relabeling of predictions,
/// by enumerating permutations of the zero-padded label sets.
pub fn brute_force_matches(gt: &[String], pred: &[String]) -> usize {
    let mut gt_ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pred_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for (g, p) in gt.iter().zip(pred) {
        let n = gt_ids.len();
        gt_ids.entry(g).or_insert(n);
        let n = pred_ids.len();
        pred_ids.entry(p).or_insert(n);
    }
    let size = gt_ids.len().max(pred_ids.len());
    let pairs: Vec<(usize, usize)> = gt
        .iter()
        .zip(pred)
        .map(|(g, p)| (pred_ids[p.as_str()], gt_ids[g.as_str()]))
        .collect();
    let mut perm: Vec<usize> = (0..size).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |mapping| {
        let hits = pairs.iter().filter(|(p, g)| mapping[*p] == *g).count();
        best = best.max(hits);
    });
    best
}

fn permute(perm: &mut Vec<usize>, start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == perm.len() {
        visit(perm);
        return;
    }
    for i in start..perm.len() {
        perm.swap(start, i);
        permute(perm, start + 1, visit);
        perm.swap(start, i);
    }
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize(&v)
}

pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Mean cross-entropy over a batch, computed only through `forward`.
pub fn batch_loss(params: &ClassifierParams, batch: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    batch
        .iter()
        .map(|(x, t)| ce_loss(&params.forward(x).unwrap(), t))
        .sum::<f64>()
        / batch.len() as f64
}

/// Central finite differences of [`batch_loss`] with respect to every θ entry.
pub fn finite_difference_grad(
    params: &ClassifierParams,
    batch: &[(Vec<f64>, Vec<f64>)],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut out = params.theta.clone();
    for (r, row) in out.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.theta[r][c] += h;
            let mut minus = params.clone();
            minus.theta[r][c] -= h;
            *slot = (batch_loss(&plus, batch) - batch_loss(&minus, batch)) / (2.0 * h);
        }
    }
    out
}

/// Entries below this magnitude are compared absolutely: central differences
/// at h = 1e-6 carry roughly 1e-10 of rounding noise.
pub const FD_SCALE_FLOOR: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_SCALE_FLOOR)
}

/// k-NN rows by sorting all (i, j) pairs by key (self first, then (-sim, j)).
pub fn brute_force_knn(embeddings: &[Vec<f64>], kappa: usize) -> Vec<Vec<usize>> {
    let n = embeddings.len();
    (0..n)
        .map(|i| {
            let mut keyed: Vec<(u8, f64, usize)> = (0..n)
                .map(|j| {
                    let sim: f64 = embeddings[i]
                        .iter()
                        .zip(&embeddings[j])
                        .map(|(a, b)| a * b)
                        .sum();
                    (u8::from(j != i), -sim, j)
                })
                .collect();
            keyed.sort_by(|a, b| a.partial_cmp(b).unwrap());
            keyed.into_iter().take(kappa).map(|t| t.2).collect()
        })
        .collect()
}
