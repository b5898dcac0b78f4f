//! Missing annotation matching: within each patient, proposals close in
//! embedding space to an existing annotation become mined annotations.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{l2_distance, Proposal};
use crate::domain::{Annotation, Source, UNIVERSAL_DATASET};
use crate::error::{Error, Result};
use crate::geometry::{overlaps, OverlapMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub annotation_id: String,
    pub proposal_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MamOutput {
    /// Every kept pair, sorted by (proposal id, annotation id).
    pub pairs: Vec<MatchPair>,
    /// One mined annotation per matched proposal, sorted by id.
    pub mined: Vec<Annotation>,
}

pub fn mined_id(proposal_id: &str) -> String {
    format!("mined:{proposal_id}")
}

fn embedding_of<'a>(embeddings: &'a BTreeMap<String, Vec<f64>>, id: &str) -> Result<&'a [f64]> {
    embeddings
        .get(id)
        .map(Vec::as_slice)
        .filter(|e| !e.is_empty())
        .ok_or_else(|| Error::Contract(format!("annotation {id} has no embedding")))
}

/// Matches every proposal against every original annotation of the same
/// patient and keeps pairs with distance strictly below `theta`. Proposals
/// that duplicate an annotation (same volume and slice, IoU above
/// `duplicate_iou`) are not candidates. A proposal matched by several
/// annotations yields one mined box, attributed to the closest annotation
/// (lower id on ties).
pub fn mam_match(
    annotations: &[Annotation],
    embeddings: &BTreeMap<String, Vec<f64>>,
    proposals: &[Proposal],
    theta: f64,
    duplicate_iou: f64,
) -> Result<MamOutput> {
    let mut anns: BTreeMap<&str, Vec<(&Annotation, &[f64])>> = BTreeMap::new();
    for a in annotations {
        if a.source != Source::Original {
            continue;
        }
        anns.entry(&a.owner.patient_id)
            .or_default()
            .push((a, embedding_of(embeddings, &a.id)?));
    }
    let mut props: BTreeMap<&str, Vec<&Proposal>> = BTreeMap::new();
    for p in proposals {
        if p.embedding.is_empty() {
            return Err(Error::Contract(format!("proposal {} has no embedding", p.id)));
        }
        if anns.contains_key(p.owner.patient_id.as_str()) {
            props.entry(&p.owner.patient_id).or_default().push(p);
        }
    }

    let per_patient: Vec<(Vec<MatchPair>, Vec<Annotation>)> = props
        .into_par_iter()
        .map(|(patient, props)| {
            let anns = &anns[patient];
            let mut pairs = Vec::new();
            let mut mined = Vec::new();
            for p in props {
                let duplicate = anns.iter().any(|(a, _)| {
                    a.volume_id == p.volume_id && overlaps(&a.bbox, &p.bbox, OverlapMode::Iou(duplicate_iou))
                });
                if duplicate {
                    continue;
                }
                let mut best: Option<(f64, &Annotation)> = None;
                for (a, e) in anns {
                    let dist = l2_distance(e, &p.embedding);
                    if dist < theta {
                        pairs.push(MatchPair {
                            annotation_id: a.id.clone(),
                            proposal_id: p.id.clone(),
                            distance: dist,
                        });
                        let better = match best {
                            None => true,
                            Some((bd, ba)) => dist < bd || (dist == bd && a.id < ba.id),
                        };
                        if better {
                            best = Some((dist, a));
                        }
                    }
                }
                if let Some((dist, a)) = best {
                    mined.push(mined_annotation(p, a, dist));
                }
            }
            (pairs, mined)
        })
        .collect();

    let mut out = MamOutput::default();
    for (pairs, mined) in per_patient {
        out.pairs.extend(pairs);
        out.mined.extend(mined);
    }
    out.pairs
        .sort_by(|a, b| a.proposal_id.cmp(&b.proposal_id).then(a.annotation_id.cmp(&b.annotation_id)));
    out.mined.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn mined_annotation(p: &Proposal, a: &Annotation, distance: f64) -> Annotation {
    Annotation {
        id: mined_id(&p.id),
        owner: p.owner.clone(),
        volume_id: p.volume_id.clone(),
        bbox: p.bbox,
        source: Source::Mined,
        organ: a.organ,
        key_slice: false,
        dataset_id: UNIVERSAL_DATASET,
        matched_id: Some(a.id.clone()),
        instance_id: None,
        score: Some(distance),
    }
}
