//! Claiming ground-truth lesions with 3D detections.

use std::collections::BTreeMap;

use crate::domain::{Annotation, Organ};
use crate::geometry::{iou_unchecked, Box2D, Box3D};

/// One countable ground-truth lesion of one volume: every box of an
/// instance when instance ids are known, otherwise a single box.
#[derive(Debug, Clone, PartialEq)]
pub struct GtUnit {
    pub id: String,
    pub volume_id: String,
    pub organ: Option<Organ>,
    pub boxes: Vec<Box2D>,
}

/// Groups ground truth into units, ordered by (volume, id).
pub fn gt_units(gt: &[Annotation]) -> Vec<GtUnit> {
    let mut m: BTreeMap<(String, String), GtUnit> = BTreeMap::new();
    for a in gt {
        let id = a.instance_id.clone().unwrap_or_else(|| a.id.clone());
        m.entry((a.volume_id.clone(), id.clone()))
            .or_insert_with(|| GtUnit {
                id,
                volume_id: a.volume_id.clone(),
                organ: a.organ,
                boxes: Vec::new(),
            })
            .boxes
            .push(a.bbox);
    }
    m.into_values().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Unit claimed by each detection (input order); `None` is a false positive.
    pub claimed: Vec<Option<usize>>,
    pub hit: Vec<bool>,
}

/// Detections of one volume claim units in descending score (ties: first
/// slice, x1, y1, input order). A detection is a true positive when one of
/// its members overlaps an unclaimed unit box on the same slice with IoU
/// strictly above `match_iou`; it claims the unit with the highest such IoU.
pub fn match_detections(dets: &[Box3D], units: &[GtUnit], match_iou: f64) -> MatchOutcome {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (&dets[a].members()[0], &dets[b].members()[0]);
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(ma.z.cmp(&mb.z))
            .then(ma.x1.total_cmp(&mb.x1))
            .then(ma.y1.total_cmp(&mb.y1))
            .then(a.cmp(&b))
    });
    let mut claimed = vec![None; dets.len()];
    let mut hit = vec![false; units.len()];
    for i in order {
        let mut best: Option<(f64, usize)> = None;
        for (u, unit) in units.iter().enumerate() {
            if hit[u] {
                continue;
            }
            let iou = dets[i]
                .members()
                .iter()
                .flat_map(|m| unit.boxes.iter().filter(move |g| g.z == m.z).map(move |g| iou_unchecked(m, g)))
                .fold(0.0, f64::max);
            if iou > match_iou && best.is_none_or(|(bi, _)| iou > bi) {
                best = Some((iou, u));
            }
        }
        if let Some((_, u)) = best {
            hit[u] = true;
            claimed[i] = Some(u);
        }
    }
    MatchOutcome { claimed, hit }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::mam::tests::annotation;

    fn det(z: u32, x: f64, s: f64) -> Box3D {
        Box3D::from_members(vec![(Box2D::new(z, x, 0.0, x + 10.0, 10.0).unwrap(), s)]).unwrap()
    }

    fn unit(z: u32, x: f64) -> GtUnit {
        GtUnit {
            id: "g".into(),
            volume_id: "v".into(),
            organ: None,
            boxes: vec![Box2D::new(z, x, 0.0, x + 10.0, 10.0).unwrap()],
        }
    }

    #[test]
    fn exact_hit_then_duplicate_is_fp() {
        let out = match_detections(&[det(2, 0.0, 0.7), det(2, 0.5, 0.9)], &[unit(2, 0.0)], 0.5);
        assert_eq!(out.claimed, vec![None, Some(0)]);
        assert_eq!(out.hit, vec![true]);
    }

    #[test]
    fn iou_of_exactly_half_is_fp() {
        let g = GtUnit {
            boxes: vec![Box2D::new(0, 0.0, 0.0, 10.0, 10.0).unwrap()],
            ..unit(0, 0.0)
        };
        let d = Box3D::from_members(vec![(Box2D::new(0, 0.0, 0.0, 10.0, 5.0).unwrap(), 1.0)]).unwrap();
        assert_eq!(match_detections(&[d], &[g], 0.5).claimed, vec![None]);
    }

    #[test]
    fn instances_group_boxes() {
        let mut a = annotation("a", "p", "v", Box2D::new(1, 0.0, 0.0, 10.0, 10.0).unwrap());
        a.instance_id = Some("L0".into());
        let mut b = a.clone();
        b.id = "b".into();
        b.bbox.z = 2;
        let c = annotation("c", "p", "v", Box2D::new(1, 40.0, 0.0, 50.0, 10.0).unwrap());
        let u = gt_units(&[a, b, c]);
        assert_eq!(u.len(), 2);
        assert_eq!(u.iter().find(|x| x.id == "L0").unwrap().boxes.len(), 2);
        // A detection on slice 2 claims the instance; one on slice 1 is then a duplicate.
        let out = match_detections(&[det(2, 0.0, 0.9), det(1, 0.0, 0.8)], &u, 0.5);
        assert_eq!(out.claimed.iter().filter(|c| c.is_some()).count(), 1);
    }
}
