//! Seeded synthetic datasets that mimic a noisy open-vocabulary labeler.
//!
//! Classes are random unit centers; images scatter around their center.
//! Each training label is either the true class name, a spurious near-miss
//! variant of it (`"<name>#v<r>"`, embedded close to the true name), or the
//! name of the nearest other class.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, ImageRecord};
use crate::error::{NearError, Result};
use crate::linalg::{dot, normalize};

/// Centers are redrawn while any pairwise cosine exceeds this.
pub const MAX_CENTER_COSINE: f64 = 0.8;
/// Scale of the perturbation separating a spurious variant from its class name.
pub const SPURIOUS_PERTURBATION: f64 = 0.1;
/// Distinct spurious variants a class can produce.
pub const SPURIOUS_VARIANTS: u32 = 3;
const MAX_CENTER_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shots {
    Uniform(usize),
    PerClass(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub shots: Shots,
    pub test_per_class: usize,
    pub noise_rate: f64,
    pub spurious_fraction: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            dim: 64,
            shots: Shots::Uniform(5),
            test_per_class: 20,
            noise_rate: 0.3,
            spurious_fraction: 0.2,
            sigma: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn shots_per_class(&self) -> Vec<usize> {
        match &self.shots {
            Shots::Uniform(m) => vec![*m; self.num_classes],
            Shots::PerClass(v) => v.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NearError::InvalidConfig(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.dim < 2 {
            return bad(format!("need dim >= 2, got {}", self.dim));
        }
        let shots = self.shots_per_class();
        if shots.len() != self.num_classes {
            return bad(format!(
                "{} per-class shot counts for {} classes",
                shots.len(),
                self.num_classes
            ));
        }
        if shots.contains(&0) {
            return bad("every class needs at least one shot".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate {} outside [0, 1]", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.spurious_fraction) {
            return bad(format!(
                "spurious fraction {} outside [0, 1]",
                self.spurious_fraction
            ));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }
}

pub fn class_name(g: usize, num_classes: usize) -> String {
    let width = (num_classes - 1).to_string().len();
    format!("class_{g:0width$}")
}

/// `"<name>#v<r>"`
pub fn spurious_name(true_name: &str, variant: u32) -> String {
    format!("{true_name}#v{variant}")
}

pub fn is_spurious(label: &str) -> bool {
    label.contains("#v")
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn perturbed(rng: &mut ChaCha8Rng, base: &[f64], scale: f64) -> Vec<f64> {
    let z = gaussian_vector(rng, base.len());
    let v: Vec<f64> = base.iter().zip(&z).map(|(b, e)| b + scale * e).collect();
    normalize(&v)
}

fn draw_centers(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_CENTER_ATTEMPTS {
                return Err(NearError::InvalidConfig(format!(
                    "could not place {count} centers in {dim} dimensions with cosine <= {MAX_CENTER_COSINE}"
                )));
            }
            let c = normalize(&gaussian_vector(rng, dim));
            if centers.iter().all(|o| dot(o, &c) <= MAX_CENTER_COSINE) {
                centers.push(c);
                break;
            }
        }
    }
    Ok(centers)
}

fn nearest_other(centers: &[Vec<f64>], g: usize) -> usize {
    let mut best = None;
    for (h, c) in centers.iter().enumerate() {
        if h == g {
            continue;
        }
        let sim = dot(&centers[g], c);
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((h, sim));
        }
    }
    best.expect("at least two classes").0
}

/// Generates `(train, test)`; both share one label-embedding map.
pub fn generate(config: &SynthConfig) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let g_count = config.num_classes;
    let centers = draw_centers(&mut rng, g_count, config.dim)?;
    let names: Vec<String> = (0..g_count).map(|g| class_name(g, g_count)).collect();
    let confusions: Vec<usize> = (0..g_count).map(|g| nearest_other(&centers, g)).collect();

    let mut label_embeddings: BTreeMap<String, Vec<f64>> =
        names.iter().cloned().zip(centers.iter().cloned()).collect();

    let mut train = Vec::new();
    for (g, &shots) in config.shots_per_class().iter().enumerate() {
        for _ in 0..shots {
            let embedding = perturbed(&mut rng, &centers[g], config.sigma);
            let mllm_label = if rng.random::<f64>() < config.noise_rate {
                if rng.random::<f64>() < config.spurious_fraction {
                    let r = rng.random_range(0..SPURIOUS_VARIANTS);
                    let name = spurious_name(&names[g], r);
                    if !label_embeddings.contains_key(&name) {
                        let e = perturbed(&mut rng, &centers[g], SPURIOUS_PERTURBATION);
                        label_embeddings.insert(name.clone(), e);
                    }
                    name
                } else {
                    names[confusions[g]].clone()
                }
            } else {
                names[g].clone()
            };
            train.push(ImageRecord {
                id: format!("train_{:05}", train.len()),
                embedding,
                mllm_label,
                gt_label: Some(names[g].clone()),
            });
        }
    }

    let mut test = Vec::new();
    for g in 0..g_count {
        for _ in 0..config.test_per_class {
            test.push(ImageRecord {
                id: format!("test_{:05}", test.len()),
                embedding: perturbed(&mut rng, &centers[g], config.sigma),
                mllm_label: names[g].clone(),
                gt_label: Some(names[g].clone()),
            });
        }
    }

    let train = EmbeddingDataset::new(config.dim, train, label_embeddings.clone())?;
    let test = EmbeddingDataset::new(config.dim, test, label_embeddings)?;
    Ok((train, test))
}
