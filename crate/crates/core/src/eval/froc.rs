//! FROC sweeps, organ stratification, and the volumetric / key-slice drivers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matching::{gt_units, match_detections, GtUnit};
use super::stack::stack_boxes;
use super::FrocConfig;
use crate::domain::{Annotation, Organ};
use crate::error::{Error, Result};
use crate::geometry::{Box2D, Box3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    pub levels: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub average: f64,
    pub n_gt: usize,
    pub n_det: usize,
    pub n_units: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_organ: BTreeMap<String, FrocResult>,
}

impl FrocResult {
    /// `froc<TAB>group<TAB>level<TAB>sensitivity` records, then averages and counts.
    pub fn render_records(&self) -> String {
        let mut s = String::new();
        let mut groups = vec![("all", self)];
        groups.extend(self.per_organ.iter().map(|(k, v)| (k.as_str(), v)));
        for (g, r) in groups {
            for (l, v) in r.levels.iter().zip(&r.sensitivity) {
                writeln!(s, "froc\t{g}\t{l:.6}\t{v:.6}").unwrap();
            }
            writeln!(s, "average\t{g}\t{:.6}", r.average).unwrap();
            writeln!(s, "counts\t{g}\tgt={}\tdet={}\tunits={}", r.n_gt, r.n_det, r.n_units).unwrap();
        }
        s
    }

    /// Fixed-width table for terminals.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        write!(s, "{:<12}", "group").unwrap();
        for l in &self.levels {
            write!(s, " {:>8}", format!("FP@{l}")).unwrap();
        }
        writeln!(s, " {:>8}", "Average").unwrap();
        let mut groups = vec![("all", self)];
        groups.extend(self.per_organ.iter().map(|(k, v)| (k.as_str(), v)));
        for (g, r) in groups {
            write!(s, "{g:<12}").unwrap();
            for v in &r.sensitivity {
                write!(s, " {v:>8.4}").unwrap();
            }
            writeln!(s, " {:>8.4}", r.average).unwrap();
        }
        s
    }
}

/// Sensitivity at each FP-rate level from `(score, is_tp)` pairs: the best
/// recall over all score thresholds whose false positives per unit stay at
/// or below the level.
pub fn froc(labeled: &[(f64, bool)], n_units: usize, n_gt: usize, levels: &[f64]) -> Result<FrocResult> {
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    if n_units == 0 {
        return Err(Error::InvalidInput("FROC needs at least one unit".into()));
    }
    let mut sorted = labeled.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Operating points (fp, tp), one per distinct threshold, starting from nothing kept.
    let mut points = vec![(0usize, 0usize)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp, tp));
    }
    let sensitivity: Vec<f64> = levels
        .iter()
        .map(|&l| {
            points
                .iter()
                .filter(|(f, _)| *f as f64 <= l * n_units as f64 + 1e-9)
                .map(|(_, t)| *t as f64 / n_gt as f64)
                .fold(0.0, f64::max)
        })
        .collect();
    let average = sensitivity.iter().sum::<f64>() / sensitivity.len().max(1) as f64;
    Ok(FrocResult {
        levels: levels.to_vec(),
        sensitivity,
        average,
        n_gt,
        n_det: labeled.len(),
        n_units,
        per_organ: BTreeMap::new(),
    })
}

/// Per-organ FROC: each organ's ground truth on its own, with every false
/// positive charged to every organ. Detections that found a lesion of
/// another organ are left out.
pub fn stratify_by_organ(
    scored: &[(f64, Option<usize>)],
    units: &[GtUnit],
    n_units: usize,
    levels: &[f64],
) -> Result<BTreeMap<String, FrocResult>> {
    let organ = |u: &GtUnit| u.organ.unwrap_or(Organ::Other);
    let mut out = BTreeMap::new();
    for o in Organ::ALL {
        let n_gt = units.iter().filter(|u| organ(u) == o).count();
        if n_gt == 0 {
            continue;
        }
        let labeled: Vec<(f64, bool)> = scored
            .iter()
            .filter_map(|&(s, c)| match c {
                None => Some((s, false)),
                Some(u) if organ(&units[u]) == o => Some((s, true)),
                Some(_) => None,
            })
            .collect();
        out.insert(o.to_string(), froc(&labeled, n_units, n_gt, levels)?);
    }
    Ok(out)
}

/// Detections of one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeDetections {
    pub volume_id: String,
    pub boxes: Vec<(Box2D, f64)>,
}

fn score_units(
    groups: Vec<(Vec<Box3D>, Vec<GtUnit>)>,
    match_iou: f64,
) -> (Vec<(f64, Option<usize>)>, Vec<GtUnit>) {
    let matched: Vec<(Vec<(f64, Option<usize>)>, Vec<GtUnit>)> = groups
        .into_par_iter()
        .map(|(dets, units)| {
            let m = match_detections(&dets, &units, match_iou);
            let scored = dets.iter().zip(m.claimed).map(|(d, c)| (d.score, c)).collect();
            (scored, units)
        })
        .collect();
    let mut scored = Vec::new();
    let mut all_units = Vec::new();
    for (s, u) in matched {
        let base = all_units.len();
        scored.extend(s.into_iter().map(|(sc, c)| (sc, c.map(|k| k + base))));
        all_units.extend(u);
    }
    (scored, all_units)
}

fn finish(scored: &[(f64, Option<usize>)], units: &[GtUnit], n_units: usize, levels: &[f64]) -> Result<FrocResult> {
    let labeled: Vec<(f64, bool)> = scored.iter().map(|&(s, c)| (s, c.is_some())).collect();
    let mut r = froc(&labeled, n_units, units.len(), levels)?;
    r.per_organ = stratify_by_organ(scored, units, n_units, levels)?;
    Ok(r)
}

/// Stacks each volume's detections, matches them against the volume's
/// ground truth, and sweeps FP-per-volume levels. `volumes` lists every
/// evaluated volume (the FP denominator); detections and ground truth on
/// other volumes are ignored.
pub fn evaluate_volumes(
    volumes: &[String],
    dets: &[VolumeDetections],
    gt: &[Annotation],
    cfg: &FrocConfig,
) -> Result<FrocResult> {
    let mut units: BTreeMap<&str, Vec<GtUnit>> = BTreeMap::new();
    for u in gt_units(gt) {
        if let Some(v) = volumes.iter().find(|v| **v == u.volume_id) {
            units.entry(v.as_str()).or_default().push(u);
        }
    }
    let mut by_vol: BTreeMap<&str, Vec<(Box2D, f64)>> = BTreeMap::new();
    for d in dets {
        by_vol.entry(&d.volume_id).or_default().extend(d.boxes.iter().copied());
    }
    let unique: BTreeSet<&str> = volumes.iter().map(String::as_str).collect();
    let groups = unique
        .iter()
        .map(|v| {
            let mut boxes = by_vol.remove(v).unwrap_or_default();
            boxes.sort_by(|a, b| a.0.z.cmp(&b.0.z));
            (stack_boxes(&boxes, cfg.stack_iou), units.remove(v).unwrap_or_default())
        })
        .collect();
    let (scored, all_units) = score_units(groups, cfg.match_iou);
    finish(&scored, &all_units, unique.len(), &cfg.fp_levels_volume)
}

/// Key-slice FROC: units are the slices carrying a key-slice box, matching
/// is per slice in 2D, detections on other slices do not count.
pub fn evaluate_key_slices(dets: &[VolumeDetections], gt: &[Annotation], cfg: &FrocConfig) -> Result<FrocResult> {
    let mut slices: BTreeMap<(String, u32), Vec<GtUnit>> = BTreeMap::new();
    for a in gt.iter().filter(|a| a.key_slice) {
        slices
            .entry((a.volume_id.clone(), a.bbox.z))
            .or_default()
            .push(GtUnit {
                id: a.id.clone(),
                volume_id: a.volume_id.clone(),
                organ: a.organ,
                boxes: vec![a.bbox],
            });
    }
    let mut det_by_slice: BTreeMap<(String, u32), Vec<Box3D>> = BTreeMap::new();
    for d in dets {
        for &(b, s) in &d.boxes {
            let key = (d.volume_id.clone(), b.z);
            if slices.contains_key(&key) {
                det_by_slice
                    .entry(key)
                    .or_default()
                    .push(Box3D::from_members(vec![(b, s)])?);
            }
        }
    }
    let n = slices.len();
    let groups = slices
        .into_iter()
        .map(|(k, u)| (det_by_slice.remove(&k).unwrap_or_default(), u))
        .collect();
    let (scored, all_units) = score_units(groups, cfg.match_iou);
    finish(&scored, &all_units, n.max(1), &cfg.fp_levels_slice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::mam::tests::annotation;
    use proptest::prelude::*;

    const VOL: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

    #[test]
    fn edge_cases() {
        let perfect = froc(&[(0.9, true), (0.8, true)], 3, 2, &VOL).unwrap();
        assert!(perfect.sensitivity.iter().all(|&s| s == 1.0));
        assert_eq!(perfect.average, 1.0);
        let empty = froc(&[], 3, 2, &VOL).unwrap();
        assert!(empty.sensitivity.iter().all(|&s| s == 0.0));
        assert!(matches!(froc(&[], 3, 0, &VOL), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn two_volume_example() {
        let r = froc(&[(0.9, true), (0.8, false)], 2, 2, &VOL).unwrap();
        assert_eq!(r.sensitivity[2], 0.5);
        assert_eq!(r.sensitivity[0], 0.5);
    }

    #[test]
    fn key_slice_example() {
        let mut l = vec![(0.95, true)];
        l.extend((0..4).map(|k| (0.99 - k as f64 * 0.001, false)));
        let r = froc(&l, 1, 1, &[0.5, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(r.sensitivity, vec![0.0, 0.0, 0.0, 1.0]);
    }

    /// Every threshold that keeps a score-closed set, enumerated by subsets.
    fn brute(labeled: &[(f64, bool)], n_units: usize, n_gt: usize, levels: &[f64]) -> Vec<f64> {
        let k = labeled.len();
        let mut best = vec![0.0f64; levels.len()];
        for mask in 0u32..(1 << k) {
            let kept = |i: usize| mask & (1 << i) != 0;
            let closed = (0..k).all(|i| !kept(i) || (0..k).all(|j| labeled[j].0 < labeled[i].0 || kept(j)));
            if !closed {
                continue;
            }
            let tp = (0..k).filter(|&i| kept(i) && labeled[i].1).count();
            let fp = (0..k).filter(|&i| kept(i) && !labeled[i].1).count();
            for (b, &l) in best.iter_mut().zip(levels) {
                if fp as f64 / n_units as f64 <= l {
                    *b = b.max(tp as f64 / n_gt as f64);
                }
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn matches_subset_enumeration(labeled in proptest::collection::vec(((0u8..6).prop_map(|v| v as f64 / 5.0), any::<bool>()), 0..10), n_units in 1usize..4) {
            let n_gt = labeled.iter().filter(|l| l.1).count().max(1);
            let r = froc(&labeled, n_units, n_gt, &VOL).unwrap();
            prop_assert_eq!(r.sensitivity, brute(&labeled, n_units, n_gt, &VOL));
        }

        #[test]
        fn monotone_and_rank_only(labeled in proptest::collection::vec((0.0..1.0f64, any::<bool>()), 0..40), n_units in 1usize..6) {
            let n_gt = labeled.iter().filter(|l| l.1).count() + 1;
            let r = froc(&labeled, n_units, n_gt, &VOL).unwrap();
            prop_assert!(r.sensitivity.windows(2).all(|w| w[0] <= w[1]));
            let warped: Vec<_> = labeled.iter().map(|&(s, t)| (s.powi(3) * 7.0 + 1.0, t)).collect();
            prop_assert_eq!(froc(&warped, n_units, n_gt, &VOL).unwrap(), r);
        }
    }

    #[test]
    fn organ_split_and_detection_driver() {
        let mut g1 = annotation("g1", "p", "v1", Box2D::new(1, 0.0, 0.0, 10.0, 10.0).unwrap());
        g1.organ = Some(Organ::Lung);
        let mut g2 = annotation("g2", "p", "v2", Box2D::new(1, 0.0, 0.0, 10.0, 10.0).unwrap());
        g2.organ = Some(Organ::Liver);
        let dets = vec![VolumeDetections {
            volume_id: "v1".into(),
            boxes: vec![(g1.bbox, 0.9), (Box2D::new(4, 50.0, 50.0, 60.0, 60.0).unwrap(), 0.2)],
        }];
        let vols = vec!["v1".to_string(), "v2".to_string()];
        let r = evaluate_volumes(&vols, &dets, &[g1.clone(), g2.clone()], &FrocConfig::default()).unwrap();
        assert_eq!(r.n_gt, 2);
        assert_eq!(r.sensitivity[0], 0.5);
        assert_eq!(r.per_organ["lung"].average, 1.0);
        assert_eq!(r.per_organ["liver"].average, 0.0);
        // Single-organ ground truth: the stratum equals the whole.
        let only = evaluate_volumes(&vols, &dets, &[g1], &FrocConfig::default()).unwrap();
        assert_eq!(only.per_organ["lung"].sensitivity, only.sensitivity);
    }

    #[test]
    fn key_slice_driver_skips_other_slices() {
        let g = annotation("g", "p", "v", Box2D::new(3, 0.0, 0.0, 10.0, 10.0).unwrap());
        let dets = vec![VolumeDetections {
            volume_id: "v".into(),
            boxes: vec![(g.bbox, 0.5), (Box2D::new(4, 0.0, 0.0, 10.0, 10.0).unwrap(), 0.9)],
        }];
        let r = evaluate_key_slices(&dets, &[g], &FrocConfig::default()).unwrap();
        assert_eq!(r.n_det, 1);
        assert!(r.sensitivity.iter().all(|&s| s == 1.0));
    }
}
