//! Hiding part of the ground truth to simulate partial labels.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Annotation, Organ};
use crate::error::{Error, Result};
use crate::geometry::box_area;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingPolicy {
    /// Fraction of each patient's lesion instances that stay visible.
    pub keep_fraction: f64,
    /// Keep one key-slice box per visible instance per study.
    pub key_slice_only: bool,
    /// Only instances of this organ can be visible.
    pub single_type_filter: Option<Organ>,
    /// Dataset the visible boxes are assigned to.
    pub dataset_id: usize,
    pub seed: u64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            keep_fraction: 0.5,
            key_slice_only: true,
            single_type_filter: None,
            dataset_id: 0,
            seed: 11,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            return Err(Error::InvalidInput(format!(
                "keep_fraction {} outside [0, 1]",
                self.keep_fraction
            )));
        }
        if self.dataset_id >= crate::domain::NUM_DATASETS {
            return Err(Error::InvalidInput(format!("dataset id {} out of range", self.dataset_id)));
        }
        Ok(())
    }

    /// Fully annotated single-organ dataset.
    pub fn single_type(organ: Organ, dataset_id: usize, seed: u64) -> Self {
        MaskingPolicy {
            keep_fraction: 1.0,
            key_slice_only: false,
            single_type_filter: Some(organ),
            dataset_id,
            seed,
        }
    }
}

/// Splits ground truth into (visible, hidden). Every input box lands in exactly
/// one side; ids are preserved.
pub fn mask_labels(gt: &[Annotation], policy: &MaskingPolicy) -> Result<(Vec<Annotation>, Vec<Annotation>)> {
    policy.validate()?;
    // patient -> instance ids (sorted)
    let mut instances: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for a in gt {
        let inst = a.instance_id.as_deref().ok_or_else(|| {
            Error::InvalidInput(format!("ground-truth box {} has no instance id", a.id))
        })?;
        if policy.single_type_filter.is_none_or(|o| a.organ == Some(o)) {
            instances.entry(&a.owner.patient_id).or_default().insert(inst);
        }
    }

    let mut keep: BTreeSet<&str> = BTreeSet::new();
    let mut rngs: BTreeMap<&str, ChaCha8Rng> = BTreeMap::new();
    for (patient, ids) in &instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(policy.seed, &["mask", patient]));
        let mut ids: Vec<&str> = ids.iter().copied().collect();
        ids.shuffle(&mut rng);
        let n = (policy.keep_fraction * ids.len() as f64).round() as usize;
        keep.extend(ids.into_iter().take(n));
        rngs.insert(patient, rng);
    }

    // With key slices only: (instance, study) -> chosen series, then the max-area box there.
    let mut chosen: BTreeSet<&str> = BTreeSet::new();
    if policy.key_slice_only {
        let mut series: BTreeMap<(&str, &str), BTreeSet<&str>> = BTreeMap::new();
        for a in gt {
            let inst = a.instance_id.as_deref().unwrap();
            if keep.contains(inst) {
                series
                    .entry((inst, a.owner.study_id.as_str()))
                    .or_default()
                    .insert(&a.owner.series_id);
            }
        }
        let mut pick: BTreeMap<(&str, &str), &str> = BTreeMap::new();
        for ((inst, study), set) in &series {
            let patient = gt
                .iter()
                .find(|a| a.instance_id.as_deref() == Some(inst))
                .map(|a| a.owner.patient_id.as_str())
                .unwrap();
            let rng = rngs.get_mut(patient).unwrap();
            let list: Vec<&str> = set.iter().copied().collect();
            pick.insert((inst, study), list[rng.random_range(0..list.len())]);
        }
        let mut best: BTreeMap<(&str, &str), (f64, u32, &str)> = BTreeMap::new();
        for a in gt {
            let inst = a.instance_id.as_deref().unwrap();
            let key = (inst, a.owner.study_id.as_str());
            if pick.get(&key) != Some(&a.owner.series_id.as_str()) {
                continue;
            }
            let area = box_area(&a.bbox);
            let e = best.entry(key).or_insert((area, a.bbox.z, &a.id));
            if area > e.0 || (area == e.0 && a.bbox.z < e.1) {
                *e = (area, a.bbox.z, &a.id);
            }
        }
        chosen.extend(best.values().map(|v| v.2));
    }

    let mut visible = Vec::new();
    let mut hidden = Vec::new();
    for a in gt {
        let inst = a.instance_id.as_deref().unwrap();
        let show = keep.contains(inst) && (!policy.key_slice_only || chosen.contains(a.id.as_str()));
        if show {
            let mut v = a.clone();
            v.dataset_id = policy.dataset_id;
            if policy.key_slice_only {
                v.key_slice = true;
            }
            visible.push(v);
        } else {
            hidden.push(a.clone());
        }
    }
    Ok((visible, hidden))
}
