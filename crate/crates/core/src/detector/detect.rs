//! Scoring, per-slice NMS, and thresholding of proposals.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::embed::Embedder;
use super::heads::{score_heads, HeadParams};
use super::proposal::{propose_volume, ProposalConfig};
use super::Proposal;
use crate::error::Result;
use crate::geometry::iou_unchecked;
use crate::volio::WindowedVolume;

pub fn score_proposals(props: &mut [Proposal], params: &HeadParams) -> Result<()> {
    for p in props.iter_mut() {
        p.scoring = Some(score_heads(&p.features, params)?);
    }
    Ok(())
}

fn fused(p: &Proposal, d: usize) -> f64 {
    p.scoring.as_ref().map(|s| s.fused[d]).unwrap_or(0.0)
}

/// Descending score, then ascending (z, x1, y1).
pub fn rank_order(a: &Proposal, b: &Proposal, d: usize) -> Ordering {
    fused(b, d)
        .total_cmp(&fused(a, d))
        .then(a.bbox.z.cmp(&b.bbox.z))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

/// Greedy NMS within each slice on column `d`; result in rank order.
pub fn nms(mut props: Vec<Proposal>, d: usize, iou: f64) -> Vec<Proposal> {
    props.sort_by(|a, b| rank_order(a, b, d));
    let mut kept: Vec<Proposal> = Vec::with_capacity(props.len());
    for p in props {
        let suppressed = kept
            .iter()
            .any(|k| k.bbox.z == p.bbox.z && iou_unchecked(&k.bbox, &p.bbox) > iou);
        if !suppressed {
            kept.push(p);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub dataset: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            dataset: 0,
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

/// Scored, suppressed, thresholded detections from already-built proposals.
pub fn detect_from(props: Vec<Proposal>, params: &HeadParams, cfg: &DetectConfig) -> Result<Vec<Proposal>> {
    let mut props = props;
    score_proposals(&mut props, params)?;
    let mut out = nms(props, cfg.dataset, cfg.nms_iou);
    out.retain(|p| fused(p, cfg.dataset) >= cfg.score_threshold);
    Ok(out)
}

pub fn detect(
    vol: &WindowedVolume,
    params: &HeadParams,
    proposal: &ProposalConfig,
    embedder: &Embedder,
    cfg: &DetectConfig,
) -> Result<Vec<Proposal>> {
    detect_from(propose_volume(vol, proposal, embedder)?, params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::proposal::tests::fixture;
    use crate::detector::{EmbedConfig, Scoring};
    use crate::domain::Owner;
    use crate::geometry::{iou2d, Box2D};

    fn scored(x1: f64, score: f64) -> Proposal {
        let mut sc = Scoring::default();
        sc.fused = [score; 4];
        Proposal {
            id: format!("p{x1}{score}"),
            volume_id: "v".into(),
            owner: Owner::new("p", "s", "r"),
            bbox: Box2D::new(2, x1, 0.0, x1 + 10.0, 10.0).unwrap(),
            objectness: 1.0,
            features: vec![],
            embedding: vec![],
            scoring: Some(sc),
        }
    }

    #[test]
    fn duplicate_box_keeps_higher_score() {
        let out = nms(vec![scored(0.0, 0.8), scored(0.0, 0.9)], 0, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].scoring.as_ref().unwrap().fused[0], 0.9);
        // IoU 1/3 survives.
        assert_eq!(nms(vec![scored(0.0, 0.8), scored(5.0, 0.9)], 0, 0.5).len(), 2);
    }

    #[test]
    fn empty_volume_detects_nothing() {
        let v = fixture(&[]);
        let e = Embedder::new(&EmbedConfig::default()).unwrap();
        let p = HeadParams::zeros(crate::detector::FEATURE_DIM);
        let out = detect(&v, &p, &ProposalConfig::default(), &e, &DetectConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn separated_lesions_are_all_found() {
        let spheres = [(14.0, 14.0, 4.0, 4.5), (48.0, 16.0, 4.0, 4.5), (30.0, 48.0, 4.0, 4.5)];
        let v = fixture(&spheres);
        let e = Embedder::new(&EmbedConfig::default()).unwrap();
        // Every head scores by contrast against the ring.
        let mut p = HeadParams::zeros(crate::detector::FEATURE_DIM);
        for i in 0..crate::domain::NUM_HEADS {
            let k = p.shared(i) + 23;
            p.theta[k] = 2.0;
        }
        let cfg = DetectConfig {
            score_threshold: 0.01,
            ..DetectConfig::default()
        };
        let out = detect(&v, &p, &ProposalConfig::default(), &e, &cfg).unwrap();
        assert!(out.len() >= spheres.len());
        // The slice context spreads each lesion over neighbouring slices;
        // compare in-plane with the largest section.
        let mut hit = [false; 3];
        for q in &out[..spheres.len()] {
            let k = spheres
                .iter()
                .position(|&(cx, cy, _, r)| {
                    let g = Box2D::new(q.bbox.z, cx - r, cy - r, cx + r, cy + r).unwrap();
                    iou2d(&q.bbox, &g).unwrap() > 0.5
                })
                .expect("top detection matches a lesion");
            hit[k] = true;
        }
        assert_eq!(hit, [true; 3]);
    }
}
