//! Training loop: warm-up on generated labels, then per-epoch mixture
//! partition, refined targets, balanced clean/noisy batches and confidence
//! updates, followed by label filtering. Also hosts the naive cross-entropy
//! and zero-shot baselines.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    ce_loss, zero_shot_predict, ClassifierMode, ClassifierParams, LrSchedule, DEFAULT_LOGIT_SCALE,
};
use crate::data::{build_label_space, EmbeddingDataset, LabelSpace, TrainingView};
use crate::error::{NearError, Result};
use crate::linalg::argmax;
use crate::metrics::{candidate_quality, cluster_accuracy, semantic_accuracy, EvalReport};
use crate::mixture::{
    clean_posteriors, fit_gmm_1d, partition, posterior_histogram, CleanPosteriors, GmmFit,
    ThresholdMode,
};
use crate::neighbors::{build_candidate_sets, CandidateMode, CandidateState};
use crate::refine::{refine_label, update_confidence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainerMode {
    #[default]
    #[serde(rename = "near")]
    Near,
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "zeroshot")]
    ZeroShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kappa: usize,
    /// Shots per class; informational only.
    pub shots: usize,
    pub temperature: f64,
    pub total_epochs: usize,
    pub warm_epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub logit_scale: f64,
    pub threshold_mode: ThresholdMode,
    pub candidate_mode: CandidateMode,
    pub classifier_mode: ClassifierMode,
    pub trainer_mode: TrainerMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kappa: 3,
            shots: 3,
            temperature: 2.0,
            total_epochs: 50,
            warm_epochs: 10,
            base_lr: 0.002,
            batch_size: 32,
            logit_scale: DEFAULT_LOGIT_SCALE,
            threshold_mode: ThresholdMode::Adaptive,
            candidate_mode: CandidateMode::Knn,
            classifier_mode: ClassifierMode::SharedOffset,
            trainer_mode: TrainerMode::Near,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NearError::InvalidConfig(msg));
        if self.warm_epochs > self.total_epochs {
            return bad(format!(
                "warm_epochs {} exceeds total_epochs {}",
                self.warm_epochs, self.total_epochs
            ));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad(format!(
                "batch_size must be a positive even number, got {}",
                self.batch_size
            ));
        }
        if self.kappa < 1 {
            return bad("kappa must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(self.base_lr >= 0.0) {
            return bad(format!(
                "learning rate must be non-negative, got {}",
                self.base_lr
            ));
        }
        if !(self.logit_scale > 0.0) {
            return bad(format!(
                "logit scale must be positive, got {}",
                self.logit_scale
            ));
        }
        if let ThresholdMode::Static(tau) = self.threshold_mode {
            if !(0.0..=1.0).contains(&tau) {
                return bad(format!("static threshold {tau} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warm_epochs: self.warm_epochs,
            total_epochs: self.total_epochs,
            base_lr: self.base_lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Refine,
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    /// Mean batch loss before each step.
    pub mean_batch_loss: f64,
    /// Mean cross-entropy against generated labels at epoch start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmm: Option<GmmFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_clean: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_noisy: Option<usize>,
    /// Clean posteriors binned into tenths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior_histogram: Option<Vec<usize>>,
}

/// Everything a trained run leaves behind; serialized as the model artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub trainer_mode: TrainerMode,
    pub params: ClassifierParams,
    /// Full generated label space; row `j` of the anchors belongs to label `j`.
    pub label_space: LabelSpace,
    /// Inference-time label space, a sorted subset of `label_space`.
    pub filtered_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateState>,
    pub diagnostics: Vec<EpochDiagnostics>,
}

impl TrainedModel {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s).map_err(|source| NearError::Parse {
            what: "model artifact".into(),
            source,
        })?;
        if model.params.k() != model.label_space.k() {
            return Err(NearError::ShapeMismatch(
                "anchor count differs from label space size".into(),
            ));
        }
        model.filtered_indices()?;
        Ok(model)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization is infallible")
    }

    fn filtered_indices(&self) -> Result<Vec<usize>> {
        if self.filtered_labels.is_empty() {
            return Err(NearError::ShapeMismatch(
                "filtered label space is empty".into(),
            ));
        }
        self.filtered_labels
            .iter()
            .map(|l| {
                self.label_space
                    .index_of(l)
                    .ok_or_else(|| NearError::UnknownLabel(l.clone()))
            })
            .collect()
    }

    /// Label embeddings recovered from the anchors.
    pub fn anchor_embeddings(&self) -> BTreeMap<String, Vec<f64>> {
        self.label_space
            .labels()
            .iter()
            .cloned()
            .zip(self.params.anchors.iter().cloned())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<String> {
        Ok(self.predict_all(&[x])?.remove(0))
    }

    /// Predictions restricted to the filtered label space; ties go to the
    /// lexicographically smaller label.
    pub fn predict_all<E: AsRef<[f64]>>(&self, xs: &[E]) -> Result<Vec<String>> {
        if self.trainer_mode == TrainerMode::ZeroShot {
            let filtered = LabelSpace::from_labels(self.filtered_labels.iter().cloned())?;
            let anchors = self.anchor_embeddings();
            return xs
                .iter()
                .map(|x| zero_shot_predict(&anchors, &filtered, x.as_ref()).map(str::to_string))
                .collect();
        }
        let allowed = self.filtered_indices()?;
        let scorer = self.params.scorer()?;
        xs.iter()
            .map(|x| {
                let z = scorer.logits(x.as_ref())?;
                let mut best = allowed[0];
                for &j in &allowed[1..] {
                    if z[j] > z[best] {
                        best = j;
                    }
                }
                Ok(self.label_space.label(best).to_string())
            })
            .collect()
    }
}

fn label_indices(view: TrainingView<'_>, space: &LabelSpace) -> Result<Vec<usize>> {
    view.labels()
        .map(|l| {
            space
                .index_of(l)
                .ok_or_else(|| NearError::UnknownLabel(l.to_string()))
        })
        .collect()
}

fn one_hot_rows(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&j| {
            let mut v = vec![0.0; k];
            v[j] = 1.0;
            v
        })
        .collect()
}

/// Training RNG; all shuffles and batch draws come from here.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn step_on(
    params: &mut ClassifierParams,
    view: TrainingView<'_>,
    targets: &[Vec<f64>],
    indices: &[usize],
    lr: f64,
) -> Result<f64> {
    let batch: Vec<(&[f64], &[f64])> = indices
        .iter()
        .map(|&i| (view.embedding(i), targets[i].as_slice()))
        .collect();
    let (loss, grad) = params.loss_and_grad(&batch)?;
    params.sgd_step(&grad, lr)?;
    Ok(loss)
}

/// One epoch of shuffled mini-batch SGD on fixed targets.
fn cross_entropy_epoch(
    params: &mut ClassifierParams,
    view: TrainingView<'_>,
    targets: &[Vec<f64>],
    batch_size: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..view.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size) {
        total += step_on(params, view, targets, chunk, lr)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Cross-entropy warm-up on the generated labels for `warm_epochs` epochs.
pub fn warmup(
    params: &mut ClassifierParams,
    view: TrainingView<'_>,
    space: &LabelSpace,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochDiagnostics>> {
    let targets = one_hot_rows(&label_indices(view, space)?, space.k());
    let schedule = config.schedule();
    (1..=config.warm_epochs)
        .map(|epoch| {
            let lr = schedule.lr_at(epoch)?;
            let loss = cross_entropy_epoch(params, view, &targets, config.batch_size, lr, rng)?;
            Ok(EpochDiagnostics {
                epoch,
                phase: Phase::Warmup,
                lr,
                mean_batch_loss: loss,
                label_loss: None,
                gmm: None,
                tau: None,
                n_clean: None,
                n_noisy: None,
                posterior_histogram: None,
            })
        })
        .collect()
}

/// Draws a shuffled pass over a pool, reshuffling when exhausted.
struct Cycle<'p> {
    pool: &'p [usize],
    order: Vec<usize>,
    pos: usize,
}

impl<'p> Cycle<'p> {
    fn new(pool: &'p [usize]) -> Self {
        Self {
            pool,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = self.pool.to_vec();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Index batches with half clean and half noisy members. The larger side is
/// walked in shuffled passes, the smaller side is sampled with replacement.
/// With one side empty every slot comes from the other.
pub fn balanced_batches(
    clean: &[usize],
    noisy: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let n = clean.len() + noisy.len();
    let count = n.div_ceil(batch_size);
    if clean.is_empty() || noisy.is_empty() {
        let pool = if clean.is_empty() { noisy } else { clean };
        let mut cycle = Cycle::new(pool);
        return (0..count)
            .map(|_| (0..batch_size).map(|_| cycle.next(rng)).collect())
            .collect();
    }
    let (large, small) = if clean.len() >= noisy.len() {
        (clean, noisy)
    } else {
        (noisy, clean)
    };
    let half = batch_size / 2;
    let mut cycle = Cycle::new(large);
    (0..count)
        .map(|_| {
            let mut batch = Vec::with_capacity(batch_size);
            for _ in 0..half {
                batch.push(cycle.next(rng));
            }
            for _ in 0..half {
                batch.push(small[rng.random_range(0..small.len())]);
            }
            batch
        })
        .collect()
}

/// Refined targets and the partition computed from one full forward pass.
#[derive(Clone, Debug)]
pub struct EpochTargets {
    pub predictions: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub gmm: GmmFit,
    pub clean_posteriors: Vec<f64>,
    pub tau: f64,
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub refined: Vec<Vec<f64>>,
}

/// The first half of a refinement epoch: forward pass, mixture partition and
/// refined labels, all from the current parameters.
pub fn epoch_targets(
    params: &ClassifierParams,
    view: TrainingView<'_>,
    labels: &[usize],
    candidates: &CandidateState,
    config: &TrainConfig,
) -> Result<EpochTargets> {
    let scorer = params.scorer()?;
    let predictions = (0..view.len())
        .map(|i| scorer.forward(view.embedding(i)).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = predictions
        .iter()
        .zip(labels)
        .map(|(p, &j)| -p[j].ln())
        .collect();
    let gmm = fit_gmm_1d(&losses)?;
    let w = clean_posteriors(&gmm, &losses);
    let tau = config.threshold_mode.threshold(&w);
    let split = partition(&w, tau);
    let k = params.k();
    let mut is_clean = vec![false; view.len()];
    split.clean.iter().for_each(|&i| is_clean[i] = true);
    let refined = (0..view.len())
        .map(|i| {
            let mut y = vec![0.0; k];
            y[labels[i]] = 1.0;
            refine_label(
                &y,
                &candidates.confidence[i],
                &predictions[i],
                w.0[i],
                is_clean[i],
                config.temperature,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpochTargets {
        predictions,
        losses,
        gmm,
        clean_posteriors: w.0,
        tau,
        clean: split.clean,
        noisy: split.noisy,
        refined,
    })
}

/// One post-warm-up epoch. Targets and confidence updates come from the
/// epoch-start forward pass; the targets stay fixed across the epoch's batches.
pub fn train_epoch(
    params: &mut ClassifierParams,
    view: TrainingView<'_>,
    space: &LabelSpace,
    candidates: &mut CandidateState,
    config: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochDiagnostics> {
    if epoch <= config.warm_epochs {
        return Err(NearError::InvalidConfig(format!(
            "epoch {epoch} is still inside warm-up"
        )));
    }
    let lr = config.schedule().lr_at(epoch)?;
    let labels = label_indices(view, space)?;
    let targets = epoch_targets(params, view, &labels, candidates, config)?;

    for (q, f) in candidates.confidence.iter_mut().zip(&targets.predictions) {
        *q = update_confidence(f, q)?;
    }

    let batches = balanced_batches(&targets.clean, &targets.noisy, config.batch_size, rng);
    let mut total = 0.0;
    for batch in &batches {
        total += step_on(params, view, &targets.refined, batch, lr)?;
    }

    let n = view.len() as f64;
    Ok(EpochDiagnostics {
        epoch,
        phase: Phase::Refine,
        lr,
        mean_batch_loss: total / batches.len() as f64,
        label_loss: Some(targets.losses.iter().sum::<f64>() / n),
        gmm: Some(targets.gmm),
        tau: Some(targets.tau),
        n_clean: Some(targets.clean.len()),
        n_noisy: Some(targets.noisy.len()),
        posterior_histogram: Some(posterior_histogram(
            &CleanPosteriors(targets.clean_posteriors),
            10,
        )),
    })
}

/// Labels that are both the classifier's argmax on some training image and
/// the confidence argmax of some candidate set. Falls back to the classifier
/// set when the intersection is empty. Returns sorted label indices.
pub fn filter_labels(
    params: &ClassifierParams,
    view: TrainingView<'_>,
    space: &LabelSpace,
    candidates: &CandidateState,
) -> Result<Vec<usize>> {
    let k = space.k();
    let scorer = params.scorer()?;
    let mut from_classifier = vec![false; k];
    for i in 0..view.len() {
        from_classifier[argmax(&scorer.logits(view.embedding(i))?)] = true;
    }
    let mut from_candidates = vec![false; k];
    for q in &candidates.confidence {
        from_candidates[argmax(q)] = true;
    }
    let both: Vec<usize> = (0..k)
        .filter(|&j| from_classifier[j] && from_candidates[j])
        .collect();
    if both.is_empty() {
        Ok((0..k).filter(|&j| from_classifier[j]).collect())
    } else {
        Ok(both)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: TrainedModel,
    pub report: Option<EvalReport>,
}

/// Trains in the configured mode and evaluates on `test` when given.
pub fn run(
    config: &TrainConfig,
    train: &EmbeddingDataset,
    test: Option<&EmbeddingDataset>,
) -> Result<RunOutput> {
    config.validate()?;
    let view = train.training_view();
    let space = build_label_space(view)?;
    let mut params = ClassifierParams::for_space(
        config.classifier_mode,
        &space,
        view.label_embeddings(),
        config.logit_scale,
    )?;
    let mut rng = training_rng(config.seed);
    let all_labels = space.labels().to_vec();

    let model = match config.trainer_mode {
        TrainerMode::ZeroShot => TrainedModel {
            trainer_mode: TrainerMode::ZeroShot,
            params,
            label_space: space,
            filtered_labels: all_labels,
            candidates: None,
            diagnostics: Vec::new(),
        },
        TrainerMode::Naive => {
            let targets = one_hot_rows(&label_indices(view, &space)?, space.k());
            let schedule = config.schedule();
            let mut diagnostics = Vec::with_capacity(config.total_epochs);
            for epoch in 1..=config.total_epochs {
                let lr = schedule.lr_at(epoch)?;
                let loss = cross_entropy_epoch(
                    &mut params,
                    view,
                    &targets,
                    config.batch_size,
                    lr,
                    &mut rng,
                )?;
                diagnostics.push(EpochDiagnostics {
                    epoch,
                    phase: Phase::Naive,
                    lr,
                    mean_batch_loss: loss,
                    label_loss: None,
                    gmm: None,
                    tau: None,
                    n_clean: None,
                    n_noisy: None,
                    posterior_histogram: None,
                });
            }
            TrainedModel {
                trainer_mode: TrainerMode::Naive,
                params,
                label_space: space,
                filtered_labels: all_labels,
                candidates: None,
                diagnostics,
            }
        }
        TrainerMode::Near => {
            let mut candidates = build_candidate_sets(
                view,
                &space,
                config.kappa,
                config.candidate_mode,
                config.seed,
            )?;
            let mut diagnostics = warmup(&mut params, view, &space, config, &mut rng)?;
            for epoch in config.warm_epochs + 1..=config.total_epochs {
                diagnostics.push(train_epoch(
                    &mut params,
                    view,
                    &space,
                    &mut candidates,
                    config,
                    epoch,
                    &mut rng,
                )?);
            }
            let kept = filter_labels(&params, view, &space, &candidates)?;
            let filtered_labels = kept.iter().map(|&j| space.label(j).to_string()).collect();
            TrainedModel {
                trainer_mode: TrainerMode::Near,
                params,
                label_space: space,
                filtered_labels,
                candidates: Some(candidates),
                diagnostics,
            }
        }
    };

    let report = match test {
        Some(test) => {
            let mut report = evaluate(&model, test)?;
            if let (Some(cs), true) = (&model.candidates, train.has_ground_truth()) {
                report.candidate_quality = Some(candidate_quality(
                    cs,
                    &model.label_space,
                    &train.ground_truth()?,
                    train.label_embeddings(),
                )?);
            }
            Some(report)
        }
        None => None,
    };
    Ok(RunOutput { model, report })
}

/// cACC and sACC of a model on a dataset with ground-truth labels.
pub fn evaluate(model: &TrainedModel, test: &EmbeddingDataset) -> Result<EvalReport> {
    let gt = test.ground_truth()?;
    let embeddings: Vec<&[f64]> = (0..test.len()).map(|i| test.embedding(i)).collect();
    let pred = model.predict_all(&embeddings)?;
    let pred: Vec<&str> = pred.iter().map(String::as_str).collect();
    let mut label_embeddings = model.anchor_embeddings();
    for (label, e) in test.label_embeddings() {
        label_embeddings
            .entry(label.clone())
            .or_insert_with(|| e.clone());
    }
    Ok(EvalReport {
        cacc: cluster_accuracy(&gt, &pred)?,
        sacc: semantic_accuracy(&pred, &gt, &label_embeddings)?,
        n_test: gt.len(),
        label_space_size: model.filtered_labels.len(),
        candidate_quality: None,
    })
}

/// Candidate quality of own-label, random and k-NN candidate sets on a
/// training set with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateQualityComparison {
    pub raw: f64,
    pub random: f64,
    pub knn: f64,
}

pub fn compare_candidate_quality(
    train: &EmbeddingDataset,
    kappa: usize,
    seed: u64,
) -> Result<CandidateQualityComparison> {
    let view = train.training_view();
    let space = build_label_space(view)?;
    let gt = train.ground_truth()?;
    let emb = train.label_embeddings();
    let raw = CandidateState::singletons(view, &space)?;
    let random = build_candidate_sets(view, &space, kappa, CandidateMode::Random, seed)?;
    let knn = build_candidate_sets(view, &space, kappa, CandidateMode::Knn, seed)?;
    Ok(CandidateQualityComparison {
        raw: candidate_quality(&raw, &space, &gt, emb)?,
        random: candidate_quality(&random, &space, &gt, emb)?,
        knn: candidate_quality(&knn, &space, &gt, emb)?,
    })
}

/// Mean cross-entropy of `params` against one-hot generated labels.
pub fn label_loss(
    params: &ClassifierParams,
    view: TrainingView<'_>,
    space: &LabelSpace,
) -> Result<f64> {
    let scorer = params.scorer()?;
    let labels = label_indices(view, space)?;
    let mut total = 0.0;
    for (i, &j) in labels.iter().enumerate() {
        let p = scorer.forward(view.embedding(i))?;
        let mut y = vec![0.0; space.k()];
        y[j] = 1.0;
        total += ce_loss(&p, &y);
    }
    Ok(total / labels.len() as f64)
}
