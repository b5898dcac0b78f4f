//! Choosing the MAM distance threshold from labeled distance samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledDistance {
    pub distance: f64,
    /// Whether the pair really is the same lesion instance.
    pub same_instance: bool,
}

/// Largest threshold whose kept set `{distance < theta}` still has precision
/// at least `target`. Candidate thresholds sit halfway between consecutive
/// distinct distances (or just past the largest). Returns `None` when no
/// non-empty kept set reaches the target.
pub fn calibrate_theta(samples: &[LabeledDistance], target: f64) -> Result<Option<f64>> {
    if samples.iter().any(|s| !s.distance.is_finite() || s.distance < 0.0) {
        return Err(Error::InvalidInput("distances must be finite and non-negative".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let (mut tp, mut n) = (0usize, 0usize);
    let mut best = None;
    let mut i = 0;
    while i < sorted.len() {
        let d = sorted[i].distance;
        while i < sorted.len() && sorted[i].distance == d {
            tp += usize::from(sorted[i].same_instance);
            n += 1;
            i += 1;
        }
        let next = sorted.get(i).map_or(d + 1e-3, |s| s.distance);
        if tp as f64 >= target * n as f64 {
            best = Some(0.5 * (d + next));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(d: f64, same: bool) -> LabeledDistance {
        LabeledDistance {
            distance: d,
            same_instance: same,
        }
    }

    #[test]
    fn picks_largest_threshold_meeting_precision() {
        let v = [s(0.1, true), s(0.2, true), s(0.3, false), s(0.4, true), s(0.5, false), s(0.6, false)];
        // Prefixes: 1/1, 2/2, 2/3, 3/4, 3/5, 3/6.
        assert_eq!(calibrate_theta(&v, 0.75).unwrap(), Some(0.45));
        assert_eq!(calibrate_theta(&v, 0.9).unwrap(), Some(0.25));
        assert_eq!(calibrate_theta(&[s(0.1, false)], 0.9).unwrap(), None);
        assert!(calibrate_theta(&[s(f64::NAN, true)], 0.9).is_err());
    }
}
