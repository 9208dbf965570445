use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class of a density under `threshold`; ties count as solid.
#[inline]
pub fn is_solid(value: f64, threshold: f64) -> bool {
    value >= threshold
}

fn check_shapes(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Shape {
            expected: format!("{b} voxels"),
            got: format!("{a} voxels"),
        });
    }
    Ok(())
}

/// `(w00 + w11) / (n0 + n1)`: share of voxels whose thresholded classes agree.
pub fn binary_accuracy(pred: &[f64], target: &[f64], threshold: f64) -> Result<f64> {
    check_shapes(pred.len(), target.len())?;
    Ok(binary_accuracy_values(pred, target, threshold))
}

/// [`binary_accuracy`] without the shape check.
pub fn binary_accuracy_values(pred: &[f64], target: &[f64], threshold: f64) -> f64 {
    let agree = pred
        .iter()
        .zip(target)
        .filter(|(p, t)| is_solid(**p, threshold) == is_solid(**t, threshold))
        .count();
    agree as f64 / pred.len() as f64
}

/// `1 - sqrt(mean((target - pred)^2))`.
pub fn rms_accuracy(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_shapes(pred.len(), target.len())?;
    let mse = pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / pred.len() as f64;
    Ok(1.0 - mse.sqrt())
}

/// Binary and RMS accuracy averaged over a set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub binary_accuracy: f64,
    pub rms_accuracy: f64,
    pub samples: usize,
    pub threshold: f64,
}

impl MetricReport {
    /// Averages per-sample metrics over `(prediction, target)` pairs.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>, threshold: f64) -> Result<Self> {
        let (mut bin, mut rms, mut n) = (0.0, 0.0, 0usize);
        for (p, t) in pairs {
            bin += binary_accuracy(p, t, threshold)?;
            rms += rms_accuracy(p, t)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Invalid("no samples to evaluate".into()));
        }
        Ok(Self {
            binary_accuracy: bin / n as f64,
            rms_accuracy: rms / n as f64,
            samples: n,
            threshold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_hand_cases() {
        let t = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(binary_accuracy(&[0.6, 0.4, 0.7, 0.2], &t, 0.5).unwrap(), 0.75);
        assert_eq!(binary_accuracy(&t, &t, 0.5).unwrap(), 1.0);
        let comp = [0.0, 1.0, 1.0, 1.0];
        assert_eq!(binary_accuracy(&comp, &t, 0.5).unwrap(), 0.0);
        // ties are solid
        assert_eq!(binary_accuracy(&[0.5], &[1.0], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn rms_hand_cases() {
        assert_eq!(rms_accuracy(&[0.3, 0.9], &[0.3, 0.9]).unwrap(), 1.0);
        assert_eq!(rms_accuracy(&[0.0; 4], &[1.0; 4]).unwrap(), 0.0);
        assert_eq!(rms_accuracy(&[0.5; 4], &[1.0; 4]).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(binary_accuracy(&[0.1], &[0.1, 0.2], 0.5).is_err());
        assert!(rms_accuracy(&[0.1, 0.3], &[0.1], ).is_err());
    }
}
