//! Negative region mining: confident single-type detections that no existing
//! or mined annotation covers become suspicious lesions.

use std::collections::BTreeMap;

use crate::detector::Proposal;
use crate::domain::{Annotation, Organ, Source, NUM_DATASETS};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, overlaps, OverlapMode};

pub fn suspicious_id(d: usize, proposal_id: &str) -> String {
    format!("susp:d{d}:{proposal_id}")
}

/// `experts` holds, for each single-type dataset `d`, proposals scored on
/// column `d`. A proposal is suspicious when `fused[d] > sigma` and it does
/// not overlap (under `mode`) any box of `known` on the same volume and
/// slice. Duplicates across experts are merged by greedy NMS at
/// `merge_iou`, keeping the higher score (then lower dataset, then id).
pub fn nrm_suspicious(
    experts: &[(usize, Vec<Proposal>)],
    sigma: f64,
    known: &[Annotation],
    mode: OverlapMode,
    merge_iou: f64,
) -> Result<Vec<Annotation>> {
    let mut by_slice: BTreeMap<(&str, u32), Vec<&Annotation>> = BTreeMap::new();
    for a in known {
        by_slice.entry((&a.volume_id, a.bbox.z)).or_default().push(a);
    }
    let mut cands: BTreeMap<(&str, u32), Vec<(f64, usize, &Proposal)>> = BTreeMap::new();
    for (d, props) in experts {
        let d = *d;
        if !(1..NUM_DATASETS).contains(&d) {
            return Err(Error::InvalidInput(format!("dataset {d} is not a single-type dataset")));
        }
        for p in props {
            let score = p
                .scoring
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("proposal {} is not scored", p.id)))?
                .fused[d];
            if score <= sigma {
                continue;
            }
            let key = (p.volume_id.as_str(), p.bbox.z);
            let covered = by_slice
                .get(&key)
                .is_some_and(|boxes| boxes.iter().any(|a| overlaps(&a.bbox, &p.bbox, mode)));
            if !covered {
                cands.entry(key).or_default().push((score, d, p));
            }
        }
    }

    let mut out = Vec::new();
    for (_, mut list) in cands {
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.id.cmp(&b.2.id)));
        let mut kept: Vec<(f64, usize, &Proposal)> = Vec::new();
        for c in list {
            if kept.iter().all(|k| iou_unchecked(&k.2.bbox, &c.2.bbox) <= merge_iou) {
                kept.push(c);
            }
        }
        out.extend(kept.into_iter().map(|(score, d, p)| Annotation {
            id: suspicious_id(d, &p.id),
            owner: p.owner.clone(),
            volume_id: p.volume_id.clone(),
            bbox: p.bbox,
            source: Source::Suspicious,
            organ: Organ::from_head(d),
            key_slice: false,
            dataset_id: d,
            matched_id: None,
            instance_id: None,
            score: Some(score),
        }));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Scoring;
    use crate::geometry::Box2D;
    use crate::mining::mam::tests::{annotation, proposal};

    fn scored(id: &str, x: f64, d: usize, s: f64) -> Proposal {
        let mut p = proposal(id, "p", "v", Box2D::new(2, x, 0.0, x + 10.0, 10.0).unwrap(), vec![1.0]);
        let mut sc = Scoring::default();
        sc.fused[d] = s;
        p.scoring = Some(sc);
        p
    }

    #[test]
    fn threshold_is_strict_and_known_boxes_exclude() {
        let mined = annotation("m", "p", "v", Box2D::new(2, 40.0, 0.0, 50.0, 10.0).unwrap());
        let experts = vec![(1, vec![scored("at", 0.0, 1, 0.5), scored("hit", 45.0, 1, 0.9), scored("ok", 80.0, 1, 0.9)])];
        let s = nrm_suspicious(&experts, 0.5, &[mined], OverlapMode::Any, 0.5).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].id, "susp:d1:ok");
        assert_eq!(s[0].organ, Some(Organ::Lung));
        assert!(s[0].validate().is_ok());
    }

    #[test]
    fn experts_merge_keeping_higher_score() {
        let experts = vec![
            (1, vec![scored("a", 0.0, 1, 0.7)]),
            (2, vec![scored("b", 1.0, 2, 0.8)]),
            (3, vec![scored("c", 30.0, 3, 0.6)]),
        ];
        let s = nrm_suspicious(&experts, 0.5, &[], OverlapMode::Any, 0.5).unwrap();
        let ids: Vec<_> = s.iter().map(|a| a.id.as_str()).collect();
        assert_eq!(ids, vec!["susp:d2:b", "susp:d3:c"]);
        assert!(nrm_suspicious(&[(0, vec![])], 0.5, &[], OverlapMode::Any, 0.5).is_err());
    }

    #[test]
    fn raising_sigma_only_removes() {
        let props: Vec<_> = (0..20).map(|k| scored(&format!("p{k}"), k as f64 * 12.0, 1, k as f64 / 20.0)).collect();
        let experts = vec![(1, props)];
        let mut prev: Option<Vec<String>> = None;
        for sigma in [0.9, 0.7, 0.5, 0.3, 0.1] {
            let ids: Vec<String> = nrm_suspicious(&experts, sigma, &[], OverlapMode::Any, 0.5)
                .unwrap()
                .into_iter()
                .map(|a| a.id)
                .collect();
            if let Some(p) = &prev {
                assert!(p.iter().all(|i| ids.contains(i)));
            }
            prev = Some(ids);
        }
    }
}
