//! Embedding-space softmax classifier over cosine scores against class
//! weight vectors, with exact gradients and plain SGD.
//!
//! Class `j` is scored by `s * cos(x, w_j)`, where `w_j` is either a free
//! vector initialized at the label anchor `t_j` (linear probe), or `t_j + θ`
//! with one offset `θ` shared by every class (shared offset, zero at init).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::LabelSpace;
use crate::error::{NearError, Result};
use crate::linalg::{cosine, dot, norm};

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;
const MIN_WEIGHT_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierMode {
    #[default]
    SharedOffset,
    LinearProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub mode: ClassifierMode,
    /// Fixed unit-norm label anchors, one per class.
    pub anchors: Vec<Vec<f64>>,
    /// `k x d` for linear probe, `1 x d` for shared offset.
    pub theta: Vec<Vec<f64>>,
    pub logit_scale: f64,
}

/// Softmax output, strictly positive and summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVec(pub Vec<f64>);

impl ProbVec {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Gradient with the same shape as [`ClassifierParams::theta`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient(pub Vec<Vec<f64>>);

impl Gradient {
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .fold(0.0, |m: f64, g| m.max(g.abs()))
    }
}

impl ClassifierParams {
    pub fn new(mode: ClassifierMode, anchors: Vec<Vec<f64>>, logit_scale: f64) -> Result<Self> {
        if anchors.is_empty() {
            return Err(NearError::ShapeMismatch("no class anchors".into()));
        }
        if !(logit_scale > 0.0) {
            return Err(NearError::InvalidConfig(format!(
                "logit scale must be positive, got {logit_scale}"
            )));
        }
        let d = anchors[0].len();
        if anchors.iter().any(|a| a.len() != d) {
            return Err(NearError::ShapeMismatch("anchors differ in length".into()));
        }
        let theta = match mode {
            ClassifierMode::LinearProbe => anchors.clone(),
            ClassifierMode::SharedOffset => vec![vec![0.0; d]],
        };
        Ok(Self {
            mode,
            anchors,
            theta,
            logit_scale,
        })
    }

    /// Anchors taken from the label embeddings of every label in `space`.
    pub fn for_space(
        mode: ClassifierMode,
        space: &LabelSpace,
        label_embeddings: &BTreeMap<String, Vec<f64>>,
        logit_scale: f64,
    ) -> Result<Self> {
        let anchors = space
            .labels()
            .iter()
            .map(|l| {
                label_embeddings
                    .get(l)
                    .cloned()
                    .ok_or_else(|| NearError::MissingLabelEmbedding(l.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(mode, anchors, logit_scale)
    }

    pub fn k(&self) -> usize {
        self.anchors.len()
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].len()
    }

    fn raw_weight(&self, j: usize) -> Vec<f64> {
        match self.mode {
            ClassifierMode::LinearProbe => self.theta[j].clone(),
            ClassifierMode::SharedOffset => self.anchors[j]
                .iter()
                .zip(&self.theta[0])
                .map(|(t, o)| t + o)
                .collect(),
        }
    }

    /// Normalized class weights, computed once and reused across samples.
    pub fn scorer(&self) -> Result<Scorer<'_>> {
        let mut unit = Vec::with_capacity(self.k());
        let mut norms = Vec::with_capacity(self.k());
        for j in 0..self.k() {
            let mut w = self.raw_weight(j);
            let n = norm(&w);
            if !(n >= MIN_WEIGHT_NORM) {
                return Err(NearError::DegenerateWeight(j));
            }
            w.iter_mut().for_each(|x| *x /= n);
            unit.push(w);
            norms.push(n);
        }
        Ok(Scorer {
            params: self,
            unit,
            norms,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<ProbVec> {
        self.scorer()?.forward(x)
    }

    /// Mean cross-entropy and its gradient over `(embedding, target)` pairs.
    pub fn loss_and_grad(&self, batch: &[(&[f64], &[f64])]) -> Result<(f64, Gradient)> {
        self.scorer()?.loss_and_grad(batch)
    }

    pub fn grad(&self, batch: &[(&[f64], &[f64])]) -> Result<Gradient> {
        self.loss_and_grad(batch).map(|(_, g)| g)
    }

    /// `θ ← θ − lr · g`; anchors and scale are untouched.
    pub fn sgd_step(&mut self, grad: &Gradient, lr: f64) -> Result<()> {
        if grad.0.len() != self.theta.len()
            || grad
                .0
                .iter()
                .zip(&self.theta)
                .any(|(g, t)| g.len() != t.len())
        {
            return Err(NearError::ShapeMismatch("gradient does not match θ".into()));
        }
        for (t, g) in self.theta.iter_mut().zip(&grad.0) {
            for (ti, gi) in t.iter_mut().zip(g) {
                *ti -= lr * gi;
            }
        }
        Ok(())
    }
}

pub struct Scorer<'a> {
    params: &'a ClassifierParams,
    unit: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl Scorer<'_> {
    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.params.dim() {
            return Err(NearError::ShapeMismatch(format!(
                "embedding has length {}, classifier expects {}",
                x.len(),
                self.params.dim()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let s = self.params.logit_scale;
        Ok(self.unit.iter().map(|w| s * dot(w, x)).collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ProbVec> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn loss_and_grad(&self, batch: &[(&[f64], &[f64])]) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(NearError::ShapeMismatch("empty batch".into()));
        }
        let k = self.params.k();
        let d = self.params.dim();
        let s = self.params.logit_scale;
        let inv_b = 1.0 / batch.len() as f64;

        // Accumulate dL/dŵ_j over the batch, then push through normalization once.
        let mut d_unit = vec![vec![0.0; d]; k];
        let mut loss = 0.0;
        for (x, target) in batch {
            if target.len() != k {
                return Err(NearError::ShapeMismatch(format!(
                    "target has length {}, expected {k}",
                    target.len()
                )));
            }
            let p = self.forward(x)?;
            loss += ce_loss(&p, target);
            let mass: f64 = target.iter().sum();
            for j in 0..k {
                let dz = p.0[j] * mass - target[j];
                if dz == 0.0 {
                    continue;
                }
                let c = s * dz * inv_b;
                for (g, xi) in d_unit[j].iter_mut().zip(x.iter()) {
                    *g += c * xi;
                }
            }
        }

        // dL/dw = (I − ŵŵᵀ) dL/dŵ / ‖w‖
        let d_raw: Vec<Vec<f64>> = d_unit
            .into_iter()
            .zip(&self.unit)
            .zip(&self.norms)
            .map(|((g, w), n)| {
                let proj = dot(w, &g);
                g.iter()
                    .zip(w)
                    .map(|(gi, wi)| (gi - proj * wi) / n)
                    .collect()
            })
            .collect();

        let grad = match self.params.mode {
            ClassifierMode::LinearProbe => d_raw,
            ClassifierMode::SharedOffset => {
                let mut total = vec![0.0; d];
                for g in &d_raw {
                    total.iter_mut().zip(g).for_each(|(t, gi)| *t += gi);
                }
                vec![total]
            }
        };
        Ok((loss * inv_b, Gradient(grad)))
    }
}

pub fn softmax(z: &[f64]) -> ProbVec {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    ProbVec(e.into_iter().map(|v| v / total).collect())
}

/// `−Σ_j target_j · ln p_j`; zero-weight terms are skipped.
pub fn ce_loss(p: &ProbVec, target: &[f64]) -> f64 {
    p.0.iter()
        .zip(target)
        .filter(|(_, t)| **t != 0.0)
        .map(|(pj, t)| -t * pj.ln())
        .sum()
}

/// Constant learning rate for the warm-up epochs, cosine annealing after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warm_epochs: usize,
    pub total_epochs: usize,
    pub base_lr: f64,
}

impl LrSchedule {
    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch < 1 || epoch > self.total_epochs {
            return Err(NearError::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        if epoch <= self.warm_epochs {
            return Ok(self.base_lr);
        }
        let progress =
            (epoch - self.warm_epochs) as f64 / (self.total_epochs - self.warm_epochs) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// Argmax of cosine against label embeddings over `space`; ties go to the
/// lexicographically smaller label.
pub fn zero_shot_predict<'s>(
    label_embeddings: &BTreeMap<String, Vec<f64>>,
    space: &'s LabelSpace,
    x: &[f64],
) -> Result<&'s str> {
    let mut best: Option<(usize, f64)> = None;
    for (j, label) in space.labels().iter().enumerate() {
        let t = label_embeddings
            .get(label)
            .ok_or_else(|| NearError::MissingLabelEmbedding(label.clone()))?;
        let c = cosine(x, t);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((j, c));
        }
    }
    Ok(space.label(best.expect("label space is non-empty").0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthogonal(k: usize, d: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|j| {
                let mut v = vec![0.0; d];
                v[j] = 1.0;
                v
            })
            .collect()
    }

    #[test]
    fn zero_offset_is_zero_shot_distribution() {
        let anchors = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let params =
            ClassifierParams::new(ClassifierMode::SharedOffset, anchors.clone(), 10.0).unwrap();
        let x = [0.0, 1.0];
        let want = softmax(&[10.0 * 0.8, 0.0]);
        let got = params.forward(&x).unwrap();
        for (a, b) in got.0.iter().zip(&want.0) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_scale_is_nearly_uniform() {
        // scale 0 is rejected by construction; the uniform limit is approached
        let params =
            ClassifierParams::new(ClassifierMode::SharedOffset, orthogonal(2, 2), 1e-300).unwrap();
        let p = params.forward(&[1.0, 0.0]).unwrap();
        assert_eq!(p.0, vec![0.5, 0.5]);
        assert_eq!(softmax(&[0.0, 0.0]).0, vec![0.5, 0.5]);
    }

    #[test]
    fn scale_four_softmax() {
        let params =
            ClassifierParams::new(ClassifierMode::SharedOffset, orthogonal(2, 2), 4.0).unwrap();
        let p = params.forward(&[1.0, 0.0]).unwrap();
        let e4 = 4f64.exp();
        assert!((p.0[0] - e4 / (e4 + 1.0)).abs() < 1e-15);
        assert!((p.0[0] - 0.9820).abs() < 1e-4);
        assert!((p.0[1] - 0.0180).abs() < 1e-4);
    }

    #[test]
    fn degenerate_weight_is_an_error() {
        let mut params =
            ClassifierParams::new(ClassifierMode::SharedOffset, orthogonal(2, 2), 1.0).unwrap();
        params.theta[0] = vec![-1.0, 0.0];
        assert!(matches!(
            params.forward(&[1.0, 0.0]),
            Err(NearError::DegenerateWeight(0))
        ));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let params =
            ClassifierParams::new(ClassifierMode::LinearProbe, orthogonal(2, 2), 1.0).unwrap();
        assert!(matches!(
            params.forward(&[1.0, 0.0, 0.0]),
            Err(NearError::ShapeMismatch(_))
        ));
        let x = [1.0, 0.0];
        let t = [1.0, 0.0, 0.0];
        assert!(params.grad(&[(&x, &t)]).is_err());
        assert!(params.grad(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let p = ProbVec(vec![0.5, 0.5]);
        assert!((ce_loss(&p, &[1.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        let p = ProbVec(vec![0.5, 0.25, 0.25]);
        let h = ce_loss(&p, &[0.5, 0.25, 0.25]);
        assert!((h - 1.0397).abs() < 1e-4, "{h}");
        let p = ProbVec(vec![1.0 - 1e-12, 1e-12]);
        assert!(ce_loss(&p, &[1.0, 0.0]) < 1e-11);
    }

    #[test]
    fn gradient_vanishes_when_prediction_matches_target() {
        let params =
            ClassifierParams::new(ClassifierMode::LinearProbe, orthogonal(3, 3), 2.0).unwrap();
        let x = [0.6, 0.8, 0.0];
        let p = params.forward(&x).unwrap();
        let g = params.grad(&[(&x, p.as_slice())]).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn sgd_examples() {
        let mut params =
            ClassifierParams::new(ClassifierMode::SharedOffset, orthogonal(2, 2), 1.0).unwrap();
        let g = Gradient(vec![vec![0.5, -2.0]]);
        let before = params.clone();
        params.sgd_step(&g, 0.0).unwrap();
        assert_eq!(params, before);
        params.sgd_step(&g, 1.0).unwrap();
        assert_eq!(params.theta, vec![vec![-0.5, 2.0]]);

        let mut params = before.clone();
        params.sgd_step(&g, 0.002).unwrap();
        params.sgd_step(&g, 0.002).unwrap();
        assert!((params.theta[0][0] + 0.004 * 0.5).abs() < 1e-15);
        assert!((params.theta[0][1] - 0.004 * 2.0).abs() < 1e-15);
        assert_eq!(params.anchors, before.anchors);

        let bad = Gradient(vec![vec![0.0; 3]]);
        assert!(params.sgd_step(&bad, 1.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        let sched = LrSchedule {
            warm_epochs: 10,
            total_epochs: 50,
            base_lr: 0.002,
        };
        assert_eq!(sched.lr_at(5).unwrap(), 0.002);
        assert_eq!(sched.lr_at(10).unwrap(), 0.002);
        assert!((sched.lr_at(30).unwrap() - 0.001).abs() < 1e-15);
        assert!(sched.lr_at(50).unwrap().abs() < 1e-18);
        assert!(sched.lr_at(0).is_err());
        assert!(sched.lr_at(51).is_err());
        let mut prev = f64::INFINITY;
        for e in 1..=50 {
            let lr = sched.lr_at(e).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        // just past the boundary the rate is still close to base
        assert!(sched.lr_at(11).unwrap() > 0.00199);
    }

    #[test]
    fn zero_shot_examples() {
        let space = LabelSpace::from_labels(["a", "b"]).unwrap();
        let mut emb = BTreeMap::new();
        emb.insert("a".to_string(), vec![1.0, 0.0]);
        emb.insert("b".to_string(), vec![0.0, 1.0]);
        assert_eq!(zero_shot_predict(&emb, &space, &[0.0, 1.0]).unwrap(), "b");
        assert_eq!(zero_shot_predict(&emb, &space, &[0.6, 0.8]).unwrap(), "b");
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(zero_shot_predict(&emb, &space, &[h, h]).unwrap(), "a");

        let bigger = LabelSpace::from_labels(["a", "b", "c"]).unwrap();
        assert!(matches!(
            zero_shot_predict(&emb, &bigger, &[1.0, 0.0]),
            Err(NearError::MissingLabelEmbedding(_))
        ));
    }
}
