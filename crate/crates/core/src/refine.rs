//! Sharpen and rescale operators, refined targets, and confidence updates.

use crate::error::{NearError, Result};

/// Entries at or below this are treated as exact zeros when sharpening.
const ZERO_CUTOFF: f64 = 1e-300;
const MIN_OVERLAP: f64 = 1e-12;

/// `y_i^{1/T} / Σ_j y_j^{1/T}`.
pub fn sharpen(y: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(NearError::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let inv_t = 1.0 / temperature;
    let powered: Vec<f64> = y
        .iter()
        .map(|&v| {
            if v <= ZERO_CUTOFF {
                0.0
            } else {
                (inv_t * v.ln()).exp()
            }
        })
        .collect();
    let total: f64 = powered.iter().sum();
    if total == 0.0 {
        return Err(NearError::ZeroDistribution);
    }
    Ok(powered.into_iter().map(|v| v / total).collect())
}

/// `(y ⊙ q) / Σ (y ⊙ q)`; mass outside the support of `q` becomes exactly zero.
///
/// Fails when the overlap `Σ (y ⊙ q)` is at most 1e-12.
pub fn rescale(y: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    rescale_above(y, q, MIN_OVERLAP)
}

/// Rescale that only rejects an overlap that is not strictly above `floor`.
///
/// The training path uses a zero floor: at large logit scales a prediction can
/// put far less than 1e-12 of its mass on the candidate support while still
/// being strictly positive there.
fn rescale_above(y: &[f64], q: &[f64], floor: f64) -> Result<Vec<f64>> {
    if y.len() != q.len() {
        return Err(NearError::LengthMismatch {
            left: y.len(),
            right: q.len(),
        });
    }
    let prod: Vec<f64> = y.iter().zip(q).map(|(a, b)| a * b).collect();
    let total: f64 = prod.iter().sum();
    if !(total > floor) || !total.is_finite() {
        return Err(NearError::EmptyOverlap);
    }
    Ok(prod.into_iter().map(|v| v / total).collect())
}

fn mix(w: f64, a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| w * x + (1.0 - w) * y)
        .collect()
}

/// Refined training target for one image.
///
/// Clean images blend their one-hot label with the prediction and sharpen.
/// Noisy images blend the candidate confidence with the prediction, sharpen,
/// then rescale onto the candidate support.
pub fn refine_label(
    one_hot: &[f64],
    confidence: &[f64],
    prediction: &[f64],
    clean_posterior: f64,
    is_clean: bool,
    temperature: f64,
) -> Result<Vec<f64>> {
    if one_hot.len() != prediction.len() || confidence.len() != prediction.len() {
        return Err(NearError::LengthMismatch {
            left: prediction.len(),
            right: if one_hot.len() != prediction.len() {
                one_hot.len()
            } else {
                confidence.len()
            },
        });
    }
    let w = clean_posterior;
    if is_clean {
        sharpen(&mix(w, one_hot, prediction), temperature)
    } else {
        let sharpened = sharpen(&mix(w, confidence, prediction), temperature)?;
        rescale_above(&sharpened, confidence, 0.0)
    }
}

/// Re-estimates candidate confidence from a prediction, keeping the support.
pub fn update_confidence(prediction: &[f64], confidence: &[f64]) -> Result<Vec<f64>> {
    let indicator: Vec<f64> = confidence
        .iter()
        .map(|&q| if q > 0.0 { 1.0 } else { 0.0 })
        .collect();
    rescale_above(prediction, &indicator, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn sharpen_examples() {
        let y = [0.1, 0.6, 0.3];
        assert!(close(&sharpen(&y, 1.0).unwrap(), &y));
        assert!(close(
            &sharpen(&[0.8, 0.2], 2.0).unwrap(),
            &[2.0 / 3.0, 1.0 / 3.0]
        ));
        for t in [0.3, 1.0, 2.0, 7.5] {
            assert_eq!(sharpen(&[0.0, 1.0, 0.0], t).unwrap(), vec![0.0, 1.0, 0.0]);
        }
        assert!(matches!(
            sharpen(&[0.0, 0.0], 2.0),
            Err(NearError::ZeroDistribution)
        ));
        assert!(sharpen(&[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn rescale_examples() {
        let y = [0.1, 0.6, 0.3];
        assert!(close(&rescale(&y, &[0.25; 3]).unwrap(), &y));
        assert_eq!(
            rescale(&[0.25; 4], &[0.5, 0.5, 0.0, 0.0]).unwrap(),
            vec![0.5, 0.5, 0.0, 0.0]
        );
        let r = rescale(&[0.7, 0.2, 0.1], &[0.0, 0.5, 0.5]).unwrap();
        assert_eq!(r[0], 0.0);
        assert!(close(&r, &[0.0, 2.0 / 3.0, 1.0 / 3.0]));
        assert!(matches!(
            rescale(&[1.0, 0.0], &[0.0, 1.0]),
            Err(NearError::EmptyOverlap)
        ));
    }

    #[test]
    fn refine_examples() {
        let y = [0.0, 1.0, 0.0];
        let f = [0.3, 0.3, 0.4];
        let q = [0.5, 0.5, 0.0];
        assert_eq!(
            refine_label(&y, &q, &f, 1.0, true, 2.0).unwrap(),
            y.to_vec()
        );

        let r = refine_label(&[1.0, 0.0], &[1.0, 0.0], &[0.8, 0.2], 0.0, true, 2.0).unwrap();
        assert!(close(&r, &[2.0 / 3.0, 1.0 / 3.0]));

        let r = refine_label(
            &[0.0, 1.0, 0.0],
            &[0.0, 0.5, 0.5],
            &[0.7, 0.2, 0.1],
            0.0,
            false,
            1.0,
        )
        .unwrap();
        assert_eq!(r[0], 0.0);
        assert!(close(&r, &[0.0, 2.0 / 3.0, 1.0 / 3.0]));
    }

    #[test]
    fn confidence_update_examples() {
        let q = update_confidence(&[0.6, 0.2, 0.2], &[0.5, 0.5, 0.0]).unwrap();
        assert!(close(&q, &[0.75, 0.25, 0.0]));
        assert_eq!(q[2], 0.0);
        assert_eq!(
            update_confidence(&[0.6, 0.2, 0.2], &[0.0, 1.0, 0.0]).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        let f = [0.6, 0.3, 0.1];
        assert!(close(&update_confidence(&f, &[1.0 / 3.0; 3]).unwrap(), &f));
    }

    #[test]
    fn tiny_candidate_mass_still_refines() {
        let f = [1.0 - 2e-40, 1e-40, 1e-40];
        let q = [0.0, 0.5, 0.5];
        assert!(rescale(&f, &q).is_err());
        let q2 = update_confidence(&f, &q).unwrap();
        assert!(close(&q2, &[0.0, 0.5, 0.5]));
        let r = refine_label(&[1.0, 0.0, 0.0], &q, &f, 0.0, false, 2.0).unwrap();
        assert!(close(&r, &[0.0, 0.5, 0.5]));
    }
}
