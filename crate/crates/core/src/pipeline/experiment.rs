//! The phantom ablation: one universal partially labeled dataset, three
//! single-type fully labeled datasets, and a fully annotated test set, run
//! through every training arm in memory.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::prepare::{prepare, PreparedSet};
use crate::detector::heads::GATED;
use crate::detector::{
    detect_from, l2_distance, score_proposals, train_heads, DetectConfig, EmbedConfig, Embedder, HeadParams, Label, Proposal,
    ProposalConfig, TrainConfig, TrainSample, FEATURE_DIM,
};
use crate::domain::{Annotation, Organ, Source, UNIVERSAL_DATASET};
use crate::error::{Error, Result};
use crate::eval::{evaluate_volumes, FrocConfig, FrocResult, VolumeDetections};
use crate::geometry::{iou_unchecked, OverlapMode};
use crate::mining::{
    assemble_regions, build_finetune_set, calibrate_theta, label_proposals, mam_match, nrm_suspicious,
    sample_slices, Combination, LabeledDistance, MamOutput, MiningConfig, MiningReport, RegionLabeling, SliceKey,
    SuspiciousPolicy,
};
use crate::phantom::{generate, mask_labels, MaskingPolicy, PhantomConfig, PhantomSet};
use crate::seed::derive_seed;
use crate::volio::PreprocessConfig;

/// Single-type datasets: (dataset id, organ, patient id prefix).
pub const SINGLE_TYPE: [(usize, Organ, &str); 3] = [(1, Organ::Lung, "sl"), (2, Organ::Liver, "sv"), (3, Organ::LymphNode, "sn")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub universal_patients: usize,
    pub single_type_patients: usize,
    pub test_patients: usize,
    pub calibration_patients: usize,
    /// Masking of the universal dataset.
    pub keep_fraction: f64,
    pub key_slice_only: bool,
    /// Pair precision the calibrated θ must reach.
    pub calibration_precision: f64,
    /// Keep only the first scan of each single-type and test patient.
    pub one_scan_per_patient: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            universal_patients: 50,
            single_type_patients: 40,
            test_patients: 60,
            calibration_patients: 30,
            keep_fraction: 0.5,
            key_slice_only: true,
            calibration_precision: 0.9,
            one_scan_per_patient: true,
        }
    }
}

/// Everything the experiment needs besides the seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Setup {
    pub phantom: PhantomConfig,
    pub experiment: ExperimentConfig,
    pub preprocess: PreprocessConfig,
    pub proposal: ProposalConfig,
    pub embed: EmbedConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub mining: MiningConfig,
    pub froc: FrocConfig,
}

/// Training arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Universal dataset only, no mining.
    Single,
    /// All datasets merged into the universal column.
    Concat,
    /// Only positive samples of the single-type datasets, merged.
    ConcatPositive,
    /// Per-dataset columns, no mining.
    Multitask,
    Mam,
    Nrm,
    /// MAM and NRM with suspicious boxes ignored.
    MamNrm,
    /// MAM and NRM with suspicious boxes used as positives.
    MamNrmPositive,
}

impl Arm {
    pub const ALL: [Arm; 8] = [
        Arm::Single,
        Arm::Concat,
        Arm::ConcatPositive,
        Arm::Multitask,
        Arm::Mam,
        Arm::Nrm,
        Arm::MamNrm,
        Arm::MamNrmPositive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Single => "single",
            Arm::Concat => "concat",
            Arm::ConcatPositive => "concat-positive",
            Arm::Multitask => "multitask",
            Arm::Mam => "mam",
            Arm::Nrm => "nrm",
            Arm::MamNrm => "mam+nrm",
            Arm::MamNrmPositive => "mam+nrm-positive",
        }
    }

    fn mining(self) -> Option<(bool, bool)> {
        match self {
            Arm::Mam => Some((true, false)),
            Arm::Nrm => Some((false, true)),
            Arm::MamNrm | Arm::MamNrmPositive => Some((true, true)),
            _ => None,
        }
    }
}

/// Prepared datasets of one seed.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub universal: PreparedSet,
    /// Visible universal annotations, dataset 0.
    pub visible: Vec<Annotation>,
    /// Masked-out universal ground truth.
    pub hidden: Vec<Annotation>,
    /// (dataset id, set, visible boxes) per single-type dataset.
    pub single: Vec<(usize, PreparedSet, Vec<Annotation>)>,
    pub test: PreparedSet,
}

/// Phantom sets of the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SetKind {
    /// Partially labeled universal set, dataset 0.
    Universal,
    /// Fully labeled for one organ only; the value is the dataset id (1..=3).
    SingleType(usize),
    /// Fully labeled evaluation set.
    Test,
    /// Held-out set for θ calibration, masked like the universal set.
    Calibration,
}

impl SetKind {
    pub fn prefix(self) -> Result<&'static str> {
        Ok(match self {
            SetKind::Universal => "u",
            SetKind::Test => "t",
            SetKind::Calibration => "c",
            SetKind::SingleType(d) => single_type(d)?.2,
        })
    }

    pub fn dataset_id(self) -> usize {
        match self {
            SetKind::SingleType(d) => d,
            _ => UNIVERSAL_DATASET,
        }
    }
}

impl std::str::FromStr for SetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "universal" => Ok(SetKind::Universal),
            "test" => Ok(SetKind::Test),
            "calibration" => Ok(SetKind::Calibration),
            _ => SINGLE_TYPE
                .iter()
                .find(|(_, o, _)| o.as_str() == s)
                .map(|(d, _, _)| SetKind::SingleType(*d))
                .ok_or_else(|| Error::InvalidInput(format!("unknown set kind '{s}'"))),
        }
    }
}

fn single_type(d: usize) -> Result<(usize, Organ, &'static str)> {
    SINGLE_TYPE
        .iter()
        .copied()
        .find(|t| t.0 == d)
        .ok_or_else(|| Error::InvalidInput(format!("dataset {d} is not a single-type dataset")))
}

/// A generated phantom set with its labels split into visible and hidden,
/// in scanner coordinates.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub set: PhantomSet,
    pub visible: Vec<Annotation>,
    pub hidden: Vec<Annotation>,
}

/// Generates and masks the phantom set of `kind` for `seed`.
pub fn generate_split(setup: &Setup, seed: u64, kind: SetKind) -> Result<SplitSet> {
    let ex = &setup.experiment;
    let prefix = kind.prefix()?;
    let (n, one_scan) = match kind {
        SetKind::Universal => (ex.universal_patients, false),
        SetKind::SingleType(_) => (ex.single_type_patients, ex.one_scan_per_patient),
        SetKind::Test => (ex.test_patients, ex.one_scan_per_patient),
        SetKind::Calibration => (ex.calibration_patients, false),
    };
    let cfg = PhantomConfig {
        rng_seed: derive_seed(seed, &["phantom", prefix]),
        id_prefix: prefix.to_string(),
        n_patients: n,
        ..setup.phantom.clone()
    };
    let mut set = generate(&cfg)?;
    if one_scan {
        for p in &mut set.patients {
            p.volumes.truncate(1);
            let kept = &p.volumes[0].volume.meta.volume_id;
            p.ground_truth.retain(|a| &a.volume_id == kept);
        }
    }
    let gt = set.ground_truth();
    let mask_seed = derive_seed(seed, &["mask", prefix]);
    let (visible, hidden) = match kind {
        SetKind::Test => (gt, Vec::new()),
        SetKind::SingleType(d) => mask_labels(&gt, &MaskingPolicy::single_type(single_type(d)?.1, d, mask_seed))?,
        SetKind::Universal | SetKind::Calibration => mask_labels(
            &gt,
            &MaskingPolicy {
                keep_fraction: ex.keep_fraction,
                key_slice_only: ex.key_slice_only,
                single_type_filter: None,
                dataset_id: UNIVERSAL_DATASET,
                seed: mask_seed,
            },
        )?,
    };
    Ok(SplitSet { set, visible, hidden })
}

/// `anns` with boxes replaced by their mapped ground-truth counterparts.
pub fn remap_by_id(anns: &[Annotation], mapped_gt: &[Annotation]) -> Result<Vec<Annotation>> {
    let by_id: BTreeMap<&str, &Annotation> = mapped_gt.iter().map(|a| (a.id.as_str(), a)).collect();
    anns.iter()
        .map(|a| {
            let m = by_id
                .get(a.id.as_str())
                .ok_or_else(|| Error::Contract(format!("annotation {} is not in the ground truth", a.id)))?;
            Ok(Annotation {
                bbox: m.bbox,
                ..a.clone()
            })
        })
        .collect()
}

/// Prepared set with visible and hidden labels on the canonical grid.
pub fn prepare_split(setup: &Setup, split: &SplitSet, embedder: &Embedder) -> Result<(PreparedSet, Vec<Annotation>, Vec<Annotation>)> {
    let set = prepare(&split.set, &setup.preprocess, &setup.proposal, embedder)?;
    let visible = remap_by_id(&split.visible, &set.ground_truth)?;
    let hidden = remap_by_id(&split.hidden, &set.ground_truth)?;
    Ok((set, visible, hidden))
}

pub fn build_datasets(setup: &Setup, seed: u64) -> Result<Datasets> {
    let embedder = Embedder::new(&setup.embed)?;
    let prep = |kind| prepare_split(setup, &generate_split(setup, seed, kind)?, &embedder);
    let (universal, visible, hidden) = prep(SetKind::Universal)?;
    let mut single = Vec::new();
    for (d, _, _) in SINGLE_TYPE {
        let (set, vis, _) = prep(SetKind::SingleType(d))?;
        single.push((d, set, vis));
    }
    let (test, _, _) = prep(SetKind::Test)?;
    Ok(Datasets {
        universal,
        visible,
        hidden,
        single,
        test,
    })
}

/// Distinct slices carrying an annotation, in slice order.
pub fn unique_slices(anns: &[Annotation]) -> Vec<SliceKey> {
    let set: BTreeSet<SliceKey> = anns.iter().map(|a| SliceKey::new(&a.volume_id, a.bbox.z)).collect();
    set.into_iter().collect()
}

/// Proposals of a set grouped by slice, with their organ targets.
fn by_slice(set: &PreparedSet) -> BTreeMap<(&str, u32), Vec<(&Proposal, [f64; GATED])>> {
    let mut m: BTreeMap<(&str, u32), Vec<(&Proposal, [f64; GATED])>> = BTreeMap::new();
    for v in &set.volumes {
        for (p, t) in v.proposals.iter().zip(&v.targets) {
            m.entry((&v.meta.volume_id, p.bbox.z)).or_default().push((p, *t));
        }
    }
    m
}

/// Training samples of labeled slices: labeled proposals plus every original
/// positive box. With `positives_only` negatives are dropped.
pub fn slice_samples(
    set: &PreparedSet,
    labelings: &[RegionLabeling],
    dataset_id: usize,
    positives_only: bool,
    positive_iou: f64,
    out: &mut Vec<TrainSample>,
) -> Result<()> {
    let index = by_slice(set);
    for lab in labelings {
        let props = index.get(&(lab.slice.volume_id.as_str(), lab.slice.z));
        let props: &[(&Proposal, [f64; GATED])] = props.map(Vec::as_slice).unwrap_or(&[]);
        let refs: Vec<&Proposal> = props.iter().map(|(p, _)| *p).collect();
        for ((p, t), label) in props.iter().zip(label_proposals(lab, &refs, positive_iou)) {
            if label == Label::Ignore || (positives_only && label == Label::Negative) {
                continue;
            }
            out.push(TrainSample {
                features: p.features.clone(),
                label,
                dataset_id,
                organ_targets: *t,
            });
        }
        for a in lab.positive.iter().filter(|a| a.source == Source::Original) {
            let info = set
                .boxes
                .get(&a.id)
                .ok_or_else(|| Error::Contract(format!("no features for annotation {}", a.id)))?;
            out.push(TrainSample {
                features: info.features.clone(),
                label: Label::Positive,
                dataset_id,
                organ_targets: info.targets,
            });
        }
    }
    Ok(())
}

/// Samples of the key slices of the visible universal annotations.
pub fn key_slice_samples(u: &PreparedSet, visible: &[Annotation], positive_iou: f64) -> Result<Vec<TrainSample>> {
    let lab = assemble_regions(&unique_slices(visible), visible, &[], &[], SuspiciousPolicy::Ignore)?;
    let mut out = Vec::new();
    slice_samples(u, &lab, UNIVERSAL_DATASET, false, positive_iou, &mut out)?;
    Ok(out)
}

/// Slices of a single-type dataset used for training: every slice with a
/// visible box plus as many seeded slices without one.
fn single_type_slices(set: &PreparedSet, visible: &[Annotation], seed: u64) -> Vec<SliceKey> {
    let annotated = unique_slices(visible);
    let taken: BTreeSet<&SliceKey> = annotated.iter().collect();
    let empty: Vec<SliceKey> = set
        .volumes
        .iter()
        .flat_map(|v| (0..v.meta.nz() as u32).map(|z| SliceKey::new(&v.meta.volume_id, z)))
        .filter(|k| !taken.contains(k))
        .collect();
    build_finetune_set(&annotated, &empty, 1.0, seed)
}

/// Single-type samples on their own columns, merged into column 0, and
/// merged with positives only.
#[derive(Debug, Clone, Default)]
pub struct SingleTypeSamples {
    pub own: Vec<TrainSample>,
    pub merged: Vec<TrainSample>,
    pub merged_positive: Vec<TrainSample>,
}

pub fn single_type_samples(
    single: &[(usize, &PreparedSet, &[Annotation])],
    seed: u64,
    positive_iou: f64,
) -> Result<SingleTypeSamples> {
    let mut out = SingleTypeSamples::default();
    for &(d, set, vis) in single {
        let slices = single_type_slices(set, vis, derive_seed(seed, &["negative-slices", &d.to_string()]));
        let lab = assemble_regions(&slices, vis, &[], &[], SuspiciousPolicy::Ignore)?;
        slice_samples(set, &lab, d, false, positive_iou, &mut out.own)?;
        slice_samples(set, &lab, UNIVERSAL_DATASET, false, positive_iou, &mut out.merged)?;
        slice_samples(set, &lab, UNIVERSAL_DATASET, true, positive_iou, &mut out.merged_positive)?;
    }
    Ok(out)
}

/// Trains from `init`, or from zeros with a normalizer fitted on the samples.
pub fn fit(samples: &[TrainSample], init: Option<&HeadParams>, cfg: &TrainConfig) -> Result<HeadParams> {
    let init = match init {
        Some(p) => p.clone(),
        None => {
            let mut p = HeadParams::zeros(FEATURE_DIM);
            p.fit_normalizer(samples.iter().map(|s| s.features.as_slice()));
            p
        }
    };
    train_heads(samples, init, cfg)
}

/// Initial detector of a combination policy. `Proposed` starts from the
/// multitask detector; its mining and finetuning are separate stages.
pub fn train_initial(
    combination: Combination,
    base: &[TrainSample],
    single: &SingleTypeSamples,
    cfg: &TrainConfig,
) -> Result<HeadParams> {
    let extra: &[TrainSample] = match combination {
        Combination::Single => &[],
        Combination::Concat => &single.merged,
        Combination::ConcatPositive => &single.merged_positive,
        Combination::Multitask | Combination::Proposed => &single.own,
    };
    let samples: Vec<TrainSample> = base.iter().chain(extra).cloned().collect();
    fit(&samples, None, cfg)
}

/// Finetunes `init` on the single-type samples plus the universal
/// finetuning slices labeled by `labelings`.
pub fn finetune(
    u: &PreparedSet,
    labelings: &[RegionLabeling],
    own: &[TrainSample],
    init: &HeadParams,
    cfg: &TrainConfig,
    positive_iou: f64,
) -> Result<HeadParams> {
    let mut samples = own.to_vec();
    slice_samples(u, labelings, UNIVERSAL_DATASET, false, positive_iou, &mut samples)?;
    fit(&samples, Some(init), cfg)
}

/// Scored, suppressed detections of every volume on column `detect.dataset`.
pub fn detect_set(set: &PreparedSet, params: &HeadParams, detect: &DetectConfig) -> Result<Vec<(String, Vec<Proposal>)>> {
    set.volumes
        .iter()
        .map(|v| Ok((v.meta.volume_id.clone(), detect_from(v.proposals.clone(), params, detect)?)))
        .collect()
}

/// Boxes and column-`d` scores of detections, ready for evaluation.
pub fn to_volume_detections(dets: &[(String, Vec<Proposal>)], d: usize) -> Vec<VolumeDetections> {
    dets.iter()
        .map(|(id, props)| VolumeDetections {
            volume_id: id.clone(),
            boxes: props
                .iter()
                .map(|p| (p.bbox, p.scoring.as_ref().map(|s| s.fused[d]).unwrap_or(0.0)))
                .collect(),
        })
        .collect()
}

/// Volumetric FROC of column 0 on the test set.
pub fn evaluate(test: &PreparedSet, params: &HeadParams, detect: &DetectConfig, froc: &FrocConfig) -> Result<FrocResult> {
    let cfg = DetectConfig {
        dataset: UNIVERSAL_DATASET,
        ..*detect
    };
    let dets = to_volume_detections(&detect_set(test, params, &cfg)?, UNIVERSAL_DATASET);
    evaluate_volumes(&test.volume_ids(), &dets, &test.ground_truth, froc)
}

/// Result of mining the universal finetuning slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mined {
    pub slices: Vec<SliceKey>,
    pub mined: Vec<Annotation>,
    pub suspicious: Vec<Annotation>,
    pub report: MiningReport,
    /// Mined boxes that recover a masked-out ground-truth box.
    pub mined_true: usize,
    /// Suspicious boxes on a masked-out ground-truth box.
    pub suspicious_true: usize,
    /// Masked-out ground-truth boxes on the finetuning slices.
    pub hidden_on_slices: usize,
}

/// Key slices of the visible annotations plus a seeded sample of unlabeled slices.
pub fn finetune_slices(set: &PreparedSet, visible: &[Annotation], mining: &MiningConfig, seed: u64) -> Vec<SliceKey> {
    let key = unique_slices(visible);
    let key_set: BTreeSet<&SliceKey> = key.iter().collect();
    let unlabeled: Vec<SliceKey> = sample_slices(&set.metas(), mining.slice_step_mm)
        .into_iter()
        .filter(|s| !key_set.contains(s))
        .collect();
    build_finetune_set(&key, &unlabeled, mining.unlabeled_ratio, derive_seed(seed, &["finetune"]))
}

/// Proposals of `set` lying on `slices`.
pub fn proposals_on(set: &PreparedSet, slices: &[SliceKey]) -> Vec<Proposal> {
    let wanted: BTreeSet<(&str, u32)> = slices.iter().map(|s| (s.volume_id.as_str(), s.z)).collect();
    set.proposals()
        .filter(|p| wanted.contains(&(p.volume_id.as_str(), p.bbox.z)))
        .cloned()
        .collect()
}

/// MAM over the proposals of the finetuning slices.
pub fn mam_stage(u: &PreparedSet, visible: &[Annotation], slices: &[SliceKey], mining: &MiningConfig) -> Result<MamOutput> {
    let embeddings: BTreeMap<String, Vec<f64>> = visible
        .iter()
        .map(|a| {
            u.boxes
                .get(&a.id)
                .map(|i| (a.id.clone(), i.embedding.clone()))
                .ok_or_else(|| Error::Contract(format!("no embedding for annotation {}", a.id)))
        })
        .collect::<Result<_>>()?;
    mam_match(visible, &embeddings, &proposals_on(u, slices), mining.theta, mining.duplicate_iou)
}

/// NRM over the proposals of the finetuning slices, scored by `initial` on
/// every single-type column.
pub fn nrm_stage(
    u: &PreparedSet,
    slices: &[SliceKey],
    initial: &HeadParams,
    known: &[Annotation],
    mining: &MiningConfig,
) -> Result<Vec<Annotation>> {
    let mut props = proposals_on(u, slices);
    score_proposals(&mut props, initial)?;
    let experts: Vec<(usize, Vec<Proposal>)> = SINGLE_TYPE.iter().map(|&(d, _, _)| (d, props.clone())).collect();
    nrm_suspicious(&experts, mining.sigma, known, OverlapMode::Any, mining.merge_iou)
}

/// Boxes of `boxes` that recover a masked-out box of `hidden` (IoU > 0.5 on the same slice).
pub fn recovered(boxes: &[Annotation], hidden: &[Annotation]) -> usize {
    boxes
        .iter()
        .filter(|m| {
            hidden
                .iter()
                .any(|h| h.volume_id == m.volume_id && h.bbox.z == m.bbox.z && iou_unchecked(&h.bbox, &m.bbox) > 0.5)
        })
        .count()
}

/// Runs MAM and NRM on the universal finetuning slices with the initial
/// detector `initial`.
pub fn mine(data: &Datasets, initial: &HeadParams, mining: &MiningConfig, seed: u64) -> Result<Mined> {
    let u = &data.universal;
    let slices = finetune_slices(u, &data.visible, mining, seed);
    let mam = mam_stage(u, &data.visible, &slices, mining)?;
    let known: Vec<Annotation> = data.visible.iter().chain(&mam.mined).cloned().collect();
    let suspicious = nrm_stage(u, &slices, initial, &known, mining)?;

    let on_slices: BTreeSet<(&str, u32)> = slices.iter().map(|s| (s.volume_id.as_str(), s.z)).collect();
    let hidden_on_slices = data
        .hidden
        .iter()
        .filter(|h| on_slices.contains(&(h.volume_id.as_str(), h.bbox.z)))
        .count();
    let report = MiningReport::new(mining.theta, mining.sigma, &mam.pairs, &mam.mined, &suspicious);
    Ok(Mined {
        mined_true: recovered(&mam.mined, &data.hidden),
        suspicious_true: recovered(&suspicious, &data.hidden),
        slices,
        mined: mam.mined,
        suspicious,
        report,
        hidden_on_slices,
    })
}

impl Mined {
    /// Fraction of mined boxes that are masked-out lesions; 1 when nothing was mined.
    pub fn precision(&self) -> f64 {
        if self.mined.is_empty() {
            1.0
        } else {
            self.mined_true as f64 / self.mined.len() as f64
        }
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub results: BTreeMap<Arm, FrocResult>,
    pub mining: Mined,
    pub finetune_slices: usize,
}

/// Training schedule of `seed`.
pub fn train_config(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, &["train"]),
        ..base.clone()
    }
}

/// Trains and evaluates the requested arms on prepared datasets.
pub fn run_arms(setup: &Setup, data: &Datasets, arms: &[Arm], seed: u64) -> Result<SeedOutcome> {
    let piou = setup.mining.positive_iou;
    let train = train_config(&setup.train, seed);
    let base = key_slice_samples(&data.universal, &data.visible, piou)?;
    let single: Vec<(usize, &PreparedSet, &[Annotation])> =
        data.single.iter().map(|(d, s, v)| (*d, s, v.as_slice())).collect();
    let st = single_type_samples(&single, seed, piou)?;

    let multitask = train_initial(Combination::Multitask, &base, &st, &train)?;
    let mining = mine(data, &multitask, &setup.mining, seed)?;

    let mut results = BTreeMap::new();
    for &arm in arms {
        let params = match arm {
            Arm::Single => train_initial(Combination::Single, &base, &st, &train)?,
            Arm::Concat => train_initial(Combination::Concat, &base, &st, &train)?,
            Arm::ConcatPositive => train_initial(Combination::ConcatPositive, &base, &st, &train)?,
            Arm::Multitask => multitask.clone(),
            _ => {
                let (use_mam, use_nrm) = arm.mining().expect("mining arm");
                let policy = if arm == Arm::MamNrmPositive {
                    SuspiciousPolicy::Positive
                } else {
                    SuspiciousPolicy::Ignore
                };
                let mined: &[Annotation] = if use_mam { &mining.mined } else { &[] };
                let suspicious: &[Annotation] = if use_nrm { &mining.suspicious } else { &[] };
                let lab = assemble_regions(&mining.slices, &data.visible, mined, suspicious, policy)?;
                finetune(&data.universal, &lab, &st.own, &multitask, &train, piou)?
            }
        };
        results.insert(arm, evaluate(&data.test, &params, &setup.detect, &setup.froc)?);
    }
    Ok(SeedOutcome {
        seed,
        results,
        finetune_slices: mining.slices.len(),
        mining,
    })
}

/// Builds the datasets of `seed` and runs `arms` on them.
pub fn run_seed(setup: &Setup, arms: &[Arm], seed: u64) -> Result<SeedOutcome> {
    let data = build_datasets(setup, seed)?;
    run_arms(setup, &data, arms, seed)
}

/// Distance from every proposal of a held-out phantom set to the closest
/// visible annotation of its patient, labeled by whether the proposal is that
/// annotation's lesion instance.
pub fn calibration_distances(setup: &Setup, seed: u64) -> Result<Vec<LabeledDistance>> {
    let embedder = Embedder::new(&setup.embed)?;
    let (set, visible, _) = prepare_split(setup, &generate_split(setup, seed, SetKind::Calibration)?, &embedder)?;
    // Same slice pool as mining sees.
    let pool: BTreeSet<SliceKey> = finetune_slices(&set, &visible, &setup.mining, seed).into_iter().collect();
    let iou = setup.mining.duplicate_iou;
    let mut by_patient: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
    for a in &visible {
        by_patient.entry(&a.owner.patient_id).or_default().push(a);
    }
    let mut out = Vec::new();
    for v in &set.volumes {
        let Some(anns) = by_patient.get(v.meta.owner.patient_id.as_str()) else {
            continue;
        };
        let gt: Vec<&Annotation> = set.ground_truth.iter().filter(|g| g.volume_id == v.meta.volume_id).collect();
        for p in &v.proposals {
            let duplicate = anns.iter().any(|b| {
                b.volume_id == p.volume_id && b.bbox.z == p.bbox.z && iou_unchecked(&b.bbox, &p.bbox) > iou
            });
            if duplicate || !pool.contains(&SliceKey::new(&p.volume_id, p.bbox.z)) {
                continue;
            }
            // The closest annotation is the one a mined box would be attributed to.
            let (distance, a) = anns
                .iter()
                .map(|a| (l2_distance(&set.boxes[&a.id].embedding, &p.embedding), *a))
                .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.id.cmp(&y.1.id)))
                .expect("patient has annotations");
            let same_instance = gt.iter().any(|g| {
                g.instance_id == a.instance_id && g.bbox.z == p.bbox.z && iou_unchecked(&g.bbox, &p.bbox) > 0.5
            });
            out.push(LabeledDistance { distance, same_instance });
        }
    }
    Ok(out)
}

/// Largest θ whose pair precision on the held-out set reaches the target.
pub fn calibrate(setup: &Setup, seed: u64) -> Result<Option<f64>> {
    calibrate_theta(&calibration_distances(setup, seed)?, setup.experiment.calibration_precision)
}
