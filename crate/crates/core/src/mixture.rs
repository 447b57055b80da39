//! Two-component 1-D Gaussian mixture over per-sample losses.
//!
//! The component with the smaller mean models clean samples. Fitting is plain
//! EM from a deterministic percentile initialization.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{NearError, Result};

pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 200;
/// Relative log-likelihood change below which EM stops.
pub const TOLERANCE: f64 = 1e-6;
/// Loss vectors with variance below this skip EM and count as all-clean.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;
const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub mean_clean: f64,
    pub mean_noisy: f64,
    pub var_clean: f64,
    pub var_noisy: f64,
    pub weight_clean: f64,
    pub weight_noisy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the loss vector was constant and EM was skipped.
    pub degenerate: bool,
    /// Final log-likelihood; absent for degenerate fits.
    pub log_likelihood: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Component {
    mean: f64,
    var: f64,
    weight: f64,
}

impl Component {
    fn log_joint(&self, x: f64) -> f64 {
        let d = x - self.mean;
        self.weight.ln() - 0.5 * ((2.0 * PI * self.var).ln() + d * d / self.var)
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Linear-interpolation percentile of an already sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn validate(losses: &[f64]) -> Result<()> {
    if losses.len() < 2 {
        return Err(NearError::TooFewSamples(losses.len()));
    }
    if let Some(i) = losses.iter().position(|x| !x.is_finite()) {
        return Err(NearError::NonFiniteLoss(i));
    }
    Ok(())
}

pub fn fit_gmm_1d(losses: &[f64]) -> Result<GmmFit> {
    fit_gmm_1d_traced(losses).map(|(fit, _)| fit)
}

/// Like [`fit_gmm_1d`], also returning the log-likelihood after every E-step.
pub fn fit_gmm_1d_traced(losses: &[f64]) -> Result<(GmmFit, Vec<f64>)> {
    validate(losses)?;
    let (mean, var) = mean_and_variance(losses);
    if var < DEGENERATE_VARIANCE {
        let fit = GmmFit {
            mean_clean: mean,
            mean_noisy: mean,
            var_clean: VARIANCE_FLOOR,
            var_noisy: VARIANCE_FLOOR,
            weight_clean: 0.5,
            weight_noisy: 0.5,
            iterations: 0,
            converged: true,
            degenerate: true,
            log_likelihood: None,
        };
        return Ok((fit, Vec::new()));
    }

    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let init_var = var.max(VARIANCE_FLOOR);
    let mut comps = [
        Component {
            mean: percentile(&sorted, 0.10),
            var: init_var,
            weight: 0.5,
        },
        Component {
            mean: percentile(&sorted, 0.90),
            var: init_var,
            weight: 0.5,
        },
    ];

    let n = losses.len();
    let mut resp = vec![0.0; n];
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        // E-step: responsibilities of component 0.
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(losses) {
            let a = comps[0].log_joint(x);
            let b = comps[1].log_joint(x);
            let lse = log_sum_exp(a, b);
            ll += lse;
            *r = (a - lse).exp();
        }
        if let Some(&prev) = trace.last() {
            let change: f64 = ll - prev;
            if change.abs() <= TOLERANCE * f64::max(prev.abs(), f64::MIN_POSITIVE) {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iterations == MAX_ITERATIONS {
            break;
        }

        // M-step.
        for (c, comp) in comps.iter_mut().enumerate() {
            let r_of = |i: usize| if c == 0 { resp[i] } else { 1.0 - resp[i] };
            let mass: f64 = (0..n).map(r_of).sum();
            if mass <= f64::MIN_POSITIVE {
                comp.weight = WEIGHT_FLOOR;
                continue;
            }
            let mean = (0..n).map(|i| r_of(i) * losses[i]).sum::<f64>() / mass;
            let var = (0..n)
                .map(|i| r_of(i) * (losses[i] - mean).powi(2))
                .sum::<f64>()
                / mass;
            comp.mean = mean;
            comp.var = var.max(VARIANCE_FLOOR);
            comp.weight = (mass / n as f64).max(WEIGHT_FLOOR);
        }
        let total = comps[0].weight + comps[1].weight;
        comps.iter_mut().for_each(|c| c.weight /= total);
        iterations += 1;
    }

    if comps[0].mean > comps[1].mean {
        comps.swap(0, 1);
    }
    let [clean, noisy] = comps;
    let fit = GmmFit {
        mean_clean: clean.mean,
        mean_noisy: noisy.mean,
        var_clean: clean.var,
        var_noisy: noisy.var,
        weight_clean: clean.weight,
        weight_noisy: noisy.weight,
        iterations,
        converged,
        degenerate: false,
        log_likelihood: trace.last().copied(),
    };
    Ok((fit, trace))
}

/// Per-sample posterior probability of the clean component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CleanPosteriors(pub Vec<f64>);

impl CleanPosteriors {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn clean_posteriors(fit: &GmmFit, losses: &[f64]) -> CleanPosteriors {
    if fit.degenerate {
        return CleanPosteriors(vec![1.0; losses.len()]);
    }
    let clean = Component {
        mean: fit.mean_clean,
        var: fit.var_clean,
        weight: fit.weight_clean,
    };
    let noisy = Component {
        mean: fit.mean_noisy,
        var: fit.var_noisy,
        weight: fit.weight_noisy,
    };
    let w = losses
        .iter()
        .map(|&x| {
            let a = clean.log_joint(x);
            let b = noisy.log_joint(x);
            (1.0 / (1.0 + (b - a).exp())).clamp(0.0, 1.0)
        })
        .collect();
    CleanPosteriors(w)
}

/// Counts of posteriors in `bins` equal-width bins over `[0, 1]`.
pub fn posterior_histogram(w: &CleanPosteriors, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &x in &w.0 {
        let b = ((x * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

pub fn adaptive_threshold(w: &CleanPosteriors) -> f64 {
    w.0.iter().sum::<f64>() / w.0.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Mean clean posterior of the epoch.
    Adaptive,
    Static(f64),
}

impl ThresholdMode {
    pub fn threshold(&self, w: &CleanPosteriors) -> f64 {
        match *self {
            ThresholdMode::Adaptive => adaptive_threshold(w),
            ThresholdMode::Static(tau) => tau,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
}

/// Clean set is `{i : w_i >= tau}`, inclusive.
pub fn partition(w: &CleanPosteriors, tau: f64) -> Partition {
    let mut p = Partition::default();
    for (i, &wi) in w.0.iter().enumerate() {
        if wi >= tau {
            p.clean.push(i);
        } else {
            p.noisy.push(i);
        }
    }
    p
}
