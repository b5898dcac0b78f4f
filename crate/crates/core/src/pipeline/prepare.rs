//! Preprocessing, proposals and ground-truth mapping of a phantom set, held
//! in memory on the canonical grid.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::detector::heads::GATED;
use crate::detector::{box_features, propose_volume, Embedder, Proposal, ProposalConfig};
use crate::domain::Annotation;
use crate::error::Result;
use crate::geometry::Box2D;
use crate::phantom::{PhantomSet, Region};
use crate::volio::{preprocess, LabelVolume, PreprocessConfig, VolumeMeta, WindowedVolume};

/// Features, embedding and organ targets of one ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxInfo {
    pub features: Vec<f64>,
    pub embedding: Vec<f64>,
    pub targets: [f64; GATED],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVolume {
    /// Metadata on the canonical grid.
    pub meta: VolumeMeta,
    pub proposals: Vec<Proposal>,
    /// Organ targets of each proposal, parallel to `proposals`.
    pub targets: Vec<[f64; GATED]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub volumes: Vec<PreparedVolume>,
    /// Ground truth mapped onto the canonical grid, ids unchanged.
    pub ground_truth: Vec<Annotation>,
    pub boxes: BTreeMap<String, BoxInfo>,
}

impl PreparedSet {
    pub fn volume_ids(&self) -> Vec<String> {
        self.volumes.iter().map(|v| v.meta.volume_id.clone()).collect()
    }

    pub fn metas(&self) -> Vec<VolumeMeta> {
        self.volumes.iter().map(|v| v.meta.clone()).collect()
    }

    pub fn proposals(&self) -> impl Iterator<Item = &Proposal> {
        self.volumes.iter().flat_map(|v| v.proposals.iter())
    }
}

/// One-hot organ target of the gated heads from the region under the box centre.
pub fn organ_targets(labels: &LabelVolume, b: &Box2D) -> [f64; GATED] {
    let (cx, cy) = b.center();
    let x = (cx.max(0.0) as usize).min(labels.nx() - 1);
    let y = (cy.max(0.0) as usize).min(labels.ny() - 1);
    let z = (b.z as usize).min(labels.nz() - 1);
    let mut t = [0.0; GATED];
    if let Some(h) = Region::from_code(labels.get(x, y, z)).organ().and_then(|o| o.head()) {
        t[h - 1] = 1.0;
    }
    t
}

/// Proposals, organ targets and ground-truth box features of one volume on
/// the canonical grid. `gt` must already be mapped onto that grid.
pub fn prepare_volume(
    w: &WindowedVolume,
    labels: &LabelVolume,
    gt: Vec<Annotation>,
    proposal: &ProposalConfig,
    embedder: &Embedder,
) -> Result<(PreparedVolume, Vec<(Annotation, BoxInfo)>)> {
    let proposals = propose_volume(w, proposal, embedder)?;
    let targets = proposals.iter().map(|p| organ_targets(labels, &p.bbox)).collect();
    let mut mapped = Vec::with_capacity(gt.len());
    for a in gt {
        a.bbox.validate()?;
        let features = box_features(w, &a.bbox)?;
        let embedding = embedder.embed(&features)?;
        let info = BoxInfo {
            features,
            embedding,
            targets: organ_targets(labels, &a.bbox),
        };
        mapped.push((a, info));
    }
    Ok((
        PreparedVolume {
            meta: w.meta.clone(),
            proposals,
            targets,
        },
        mapped,
    ))
}

/// Gathers prepared volumes in order.
pub fn collect_set(outs: Vec<(PreparedVolume, Vec<(Annotation, BoxInfo)>)>) -> PreparedSet {
    let mut volumes = Vec::with_capacity(outs.len());
    let mut ground_truth = Vec::new();
    let mut boxes = BTreeMap::new();
    for (v, mapped) in outs {
        volumes.push(v);
        for (a, info) in mapped {
            boxes.insert(a.id.clone(), info);
            ground_truth.push(a);
        }
    }
    PreparedSet {
        volumes,
        ground_truth,
        boxes,
    }
}

/// Groups annotations by volume id.
pub fn by_volume(anns: &[Annotation]) -> BTreeMap<&str, Vec<&Annotation>> {
    let mut m: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
    for a in anns {
        m.entry(&a.volume_id).or_default().push(a);
    }
    m
}

/// Preprocesses every volume, proposes boxes, and maps the set's ground truth
/// onto the canonical grid. Volumes keep their input order.
pub fn prepare(
    set: &PhantomSet,
    pre: &PreprocessConfig,
    proposal: &ProposalConfig,
    embedder: &Embedder,
) -> Result<PreparedSet> {
    let gt = set.ground_truth();
    let gt_by_volume = by_volume(&gt);
    let inputs: Vec<_> = set.volumes().collect();
    let outs = inputs
        .par_iter()
        .map(|pv| {
            let (w, tr) = preprocess(&pv.volume, pre)?;
            let labels = tr.map_labels(&pv.regions)?;
            let mapped = gt_by_volume
                .get(pv.volume.meta.volume_id.as_str())
                .into_iter()
                .flatten()
                .map(|a| {
                    let mut m = (*a).clone();
                    m.bbox = tr.map_box(&a.bbox);
                    m
                })
                .collect();
            prepare_volume(&w, &labels, mapped, proposal, embedder)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_set(outs))
}
