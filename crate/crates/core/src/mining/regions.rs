//! Per-slice positive / ignore / negative partition and proposal labels.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::slices::SliceKey;
use super::SuspiciousPolicy;
use crate::detector::{Label, Proposal};
use crate::domain::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, overlaps, Box2D, OverlapMode};

/// Positive and ignore boxes of one slice; everything else on the slice is
/// reliable negative region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLabeling {
    pub slice: SliceKey,
    pub positive: Vec<Annotation>,
    pub ignore: Vec<Annotation>,
}

impl RegionLabeling {
    /// Whether `b` lies entirely in the negative region.
    pub fn is_negative(&self, b: &Box2D) -> bool {
        self.positive
            .iter()
            .chain(&self.ignore)
            .all(|a| !overlaps(&a.bbox, b, OverlapMode::Any))
    }
}

fn group<'a>(anns: impl Iterator<Item = &'a Annotation>) -> BTreeMap<(&'a str, u32), Vec<&'a Annotation>> {
    let mut m: BTreeMap<(&str, u32), Vec<&Annotation>> = BTreeMap::new();
    for a in anns {
        m.entry((&a.volume_id, a.bbox.z)).or_default().push(a);
    }
    m
}

/// Builds the labeling of each listed slice (duplicates collapsed, output in
/// slice order). Under the ignore policy a suspicious box overlapping a
/// positive one is an upstream bug.
pub fn assemble_regions(
    slices: &[SliceKey],
    original: &[Annotation],
    mined: &[Annotation],
    suspicious: &[Annotation],
    policy: SuspiciousPolicy,
) -> Result<Vec<RegionLabeling>> {
    let pos = group(original.iter().chain(mined));
    let sus = group(suspicious.iter());
    let unique: BTreeSet<&SliceKey> = slices.iter().collect();
    let mut out = Vec::with_capacity(unique.len());
    for key in unique {
        let k = (key.volume_id.as_str(), key.z);
        let mut positive: Vec<Annotation> = pos.get(&k).into_iter().flatten().map(|a| (*a).clone()).collect();
        let s: Vec<Annotation> = sus.get(&k).into_iter().flatten().map(|a| (*a).clone()).collect();
        let mut ignore = Vec::new();
        match policy {
            SuspiciousPolicy::Positive => positive.extend(s),
            SuspiciousPolicy::Ignore => {
                for a in &s {
                    if let Some(p) = positive.iter().find(|p| overlaps(&p.bbox, &a.bbox, OverlapMode::Any)) {
                        return Err(Error::Invariant(format!(
                            "suspicious box {} overlaps positive box {} on {}:z{}",
                            a.id, p.id, key.volume_id, key.z
                        )));
                    }
                }
                ignore = s;
            }
        }
        out.push(RegionLabeling {
            slice: key.clone(),
            positive,
            ignore,
        });
    }
    Ok(out)
}

/// Training label of each proposal on a labeled slice: positive above
/// `positive_iou` with a positive box, ignore if it touches any positive or
/// ignore box otherwise, negative elsewhere.
pub fn label_proposals(labeling: &RegionLabeling, proposals: &[&Proposal], positive_iou: f64) -> Vec<Label> {
    proposals
        .iter()
        .map(|p| {
            if labeling
                .positive
                .iter()
                .any(|a| a.bbox.z == p.bbox.z && iou_unchecked(&a.bbox, &p.bbox) > positive_iou)
            {
                Label::Positive
            } else if labeling.is_negative(&p.bbox) {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect()
}

/// Seeded subset of at most `max` negative-region proposals.
pub fn sample_negatives<'a>(
    labeling: &RegionLabeling,
    proposals: &[&'a Proposal],
    max: usize,
    seed: u64,
) -> Vec<&'a Proposal> {
    let eligible: Vec<&Proposal> = proposals.iter().copied().filter(|p| labeling.is_negative(&p.bbox)).collect();
    if eligible.len() <= max {
        return eligible;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, eligible.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| eligible[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Source;
    use crate::mining::mam::tests::{annotation, proposal};
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64) -> Box2D {
        Box2D::new(1, x, y, x + w, y + w).unwrap()
    }

    fn susp(id: &str, b: Box2D) -> Annotation {
        Annotation {
            source: Source::Suspicious,
            dataset_id: 1,
            ..annotation(id, "p", "v", b)
        }
    }

    #[test]
    fn empty_slice_is_all_negative() {
        let r = assemble_regions(&[SliceKey::new("v", 1)], &[], &[], &[], SuspiciousPolicy::Ignore).unwrap();
        assert!(r[0].positive.is_empty() && r[0].ignore.is_empty());
        assert!(r[0].is_negative(&bx(0.0, 0.0, 50.0)));
    }

    #[test]
    fn policy_decides_where_suspicious_goes() {
        let orig = [annotation("a", "p", "v", bx(0.0, 0.0, 10.0))];
        let s = [susp("s", bx(30.0, 30.0, 8.0))];
        let key = [SliceKey::new("v", 1)];
        let ign = assemble_regions(&key, &orig, &[], &s, SuspiciousPolicy::Ignore).unwrap();
        assert_eq!((ign[0].positive.len(), ign[0].ignore.len()), (1, 1));
        let pos = assemble_regions(&key, &orig, &[], &s, SuspiciousPolicy::Positive).unwrap();
        assert_eq!((pos[0].positive.len(), pos[0].ignore.len()), (2, 0));
        let bad = [susp("s", bx(5.0, 5.0, 8.0))];
        assert!(matches!(
            assemble_regions(&key, &orig, &[], &bad, SuspiciousPolicy::Ignore),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn proposal_labels() {
        let orig = [annotation("a", "p", "v", bx(0.0, 0.0, 10.0))];
        let s = [susp("s", bx(30.0, 30.0, 8.0))];
        let r = &assemble_regions(&[SliceKey::new("v", 1)], &orig, &[], &s, SuspiciousPolicy::Ignore).unwrap()[0];
        let props = [
            proposal("hit", "p", "v", bx(1.0, 0.0, 10.0), vec![1.0]),
            proposal("graze", "p", "v", bx(8.0, 8.0, 10.0), vec![1.0]),
            proposal("sus", "p", "v", bx(32.0, 32.0, 8.0), vec![1.0]),
            proposal("bg", "p", "v", bx(60.0, 0.0, 8.0), vec![1.0]),
        ];
        let refs: Vec<&Proposal> = props.iter().collect();
        assert_eq!(
            label_proposals(r, &refs, 0.5),
            vec![Label::Positive, Label::Ignore, Label::Ignore, Label::Negative]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn negatives_never_touch_ignore_or_positive(seed in any::<u64>(), boxes in proptest::collection::vec((0.0..80.0f64, 0.0..80.0f64, 2.0..20.0f64), 1..40)) {
            let s = [susp("s", bx(20.0, 20.0, 15.0)), susp("t", bx(60.0, 10.0, 6.0))];
            let orig = [annotation("a", "p", "v", bx(40.0, 50.0, 12.0))];
            let r = &assemble_regions(&[SliceKey::new("v", 1)], &orig, &[], &s, SuspiciousPolicy::Ignore).unwrap()[0];
            let props: Vec<Proposal> = boxes.iter().enumerate().map(|(k, &(x, y, w))| proposal(&format!("q{k}"), "p", "v", bx(x, y, w), vec![1.0])).collect();
            let refs: Vec<&Proposal> = props.iter().collect();
            for n in sample_negatives(r, &refs, 5, seed) {
                for a in s.iter().chain(&orig) {
                    prop_assert!(!overlaps(&a.bbox, &n.bbox, OverlapMode::Any));
                }
            }
        }
    }
}
