//! Slice sampling and the finetuning slice set.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volio::VolumeMeta;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceKey {
    pub volume_id: String,
    pub z: u32,
}

impl SliceKey {
    pub fn new(volume_id: &str, z: u32) -> Self {
        SliceKey {
            volume_id: volume_id.to_string(),
            z,
        }
    }
}

/// Every `ceil(step / sz)`-th slice of each volume, in input order then ascending z.
pub fn sample_slices(volumes: &[VolumeMeta], slice_step_mm: f64) -> Vec<SliceKey> {
    let mut out = Vec::new();
    for m in volumes {
        let stride = ((slice_step_mm / m.spacing[2]) - 1e-9).ceil().max(1.0) as usize;
        out.extend((0..m.nz()).step_by(stride).map(|z| SliceKey::new(&m.volume_id, z as u32)));
    }
    out
}

/// All key slices plus a seeded sample of `floor(r * |key|)` unlabeled slices.
/// Asking for more than exist takes them all (with a warning).
pub fn build_finetune_set(key: &[SliceKey], unlabeled: &[SliceKey], ratio: f64, seed: u64) -> Vec<SliceKey> {
    let mut want = (ratio.max(0.0) * key.len() as f64).floor() as usize;
    if want > unlabeled.len() {
        log::warn!(
            "requested {want} unlabeled slices but only {} exist; using all",
            unlabeled.len()
        );
        want = unlabeled.len();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, unlabeled.len(), want).into_vec();
    picked.sort_unstable();
    let mut out = key.to_vec();
    out.extend(picked.into_iter().map(|i| unlabeled[i].clone()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Owner;

    fn meta(nz: usize, sz: f64) -> VolumeMeta {
        VolumeMeta {
            dims: [8, 8, nz],
            spacing: [0.8, 0.8, sz],
            volume_id: "v".into(),
            owner: Owner::new("p", "s", "r"),
        }
    }

    fn zs(keys: &[SliceKey]) -> Vec<u32> {
        keys.iter().map(|k| k.z).collect()
    }

    #[test]
    fn stride_is_ceiling_of_step_over_spacing() {
        assert_eq!(zs(&sample_slices(&[meta(10, 2.0)], 5.0)), vec![0, 3, 6, 9]);
        assert_eq!(zs(&sample_slices(&[meta(4, 2.0)], 2.0)), vec![0, 1, 2, 3]);
        assert_eq!(zs(&sample_slices(&[meta(1, 2.0)], 5.0)), vec![0]);
    }

    #[test]
    fn finetune_set_sizes() {
        let key: Vec<_> = (0..100).map(|z| SliceKey::new("k", z)).collect();
        let unl: Vec<_> = (0..500).map(|z| SliceKey::new("u", z)).collect();
        assert_eq!(build_finetune_set(&key, &unl, 0.0, 1), key);
        let a = build_finetune_set(&key, &unl, 0.5, 1);
        assert_eq!(a.len(), 150);
        assert_eq!(a, build_finetune_set(&key, &unl, 0.5, 1));
        assert_eq!(build_finetune_set(&key, &unl[..10], 0.5, 1).len(), 110);
    }
}
