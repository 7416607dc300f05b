use crate::data::NUM_CLASSES;
use crate::diff::PROB_FLOOR;
use crate::error::{Error, Result};

/// Class-weighted focal loss of one predicted distribution.
///
/// `-w[y] (1 - p_y)^gamma ln(p_y)`, with `p_y` clamped at `1e-12` before the log.
pub fn focal_loss(probs: &[f64], label: usize, class_weights: &[f64], gamma: f64) -> f64 {
    let p = probs[label];
    if p < PROB_FLOOR {
        log::warn!("focal loss clamped p={p:e} at {PROB_FLOOR:e}");
    }
    -class_weights[label] * (1.0 - p).powf(gamma) * p.max(PROB_FLOOR).ln()
}

/// Mean focal loss over a batch of distributions.
pub fn focal_loss_batch(probs: &[[f64; NUM_CLASSES]], labels: &[usize], class_weights: &[f64], gamma: f64) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} distributions for {} labels", probs.len(), labels.len())));
    }
    let total: f64 = probs.iter().zip(labels).map(|(p, &y)| focal_loss(p, y, class_weights, gamma)).sum();
    Ok(total / probs.len() as f64)
}

/// Inverse-frequency weights `w_c = N / (K n_c)`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {c} has no training samples; class weights are undefined")));
    }
    let n: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&c| n as f64 / (k * c as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_probability_gamma_two() {
        let l = focal_loss(&[0.5, 0.25, 0.25], 0, &[1.0; 3], 2.0);
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn gamma_zero_is_weighted_cross_entropy() {
        let p = [0.2, 0.3, 0.5];
        let w = [2.0, 1.0, 0.5];
        for y in 0..3 {
            assert!((focal_loss(&p, y, &w, 0.0) + w[y] * p[y].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        assert_eq!(focal_loss(&[0.0, 1.0, 0.0], 1, &[1.0; 3], 2.0), 0.0);
        assert!(focal_loss(&[0.0, 1.0, 0.0], 0, &[1.0; 3], 2.0).is_finite());
    }

    #[test]
    fn weights_follow_inverse_frequency() {
        assert_eq!(class_weights(&[5, 5, 5]).unwrap(), vec![1.0; 3]);
        let w = class_weights(&[10, 20, 40]).unwrap();
        for (a, b) in w.iter().zip([7.0 / 3.0, 7.0 / 6.0, 7.0 / 12.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(class_weights(&[100, 200, 400]).unwrap(), w);
        let mean: f64 = w.iter().zip([10.0, 20.0, 40.0]).map(|(w, n)| w * n / 70.0).sum();
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(matches!(class_weights(&[1, 0, 3]), Err(Error::Config(_))));
    }
}
