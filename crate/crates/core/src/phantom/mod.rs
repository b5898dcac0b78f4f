//! Deterministic synthetic CT phantoms with complete lesion ground truth.
//!
//! Each patient has a fixed anatomy, a set of lesion instances, and a set of
//! lesion mimics (vessels and blob-shaped structures). Every study re-renders
//! the patient with small lesion displacements; every series of a study is a
//! separate reconstruction with its own noise and contrast jitter.

mod layout;
mod masking;

pub use layout::{Ellipsoid, OrganLayout, PatientAnatomy, Region};
pub use masking::{mask_labels, MaskingPolicy};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Annotation, Organ, Owner, Source, UNIVERSAL_DATASET};
use crate::error::{Error, Result};
use crate::geometry::Box2D;
use crate::seed::derive_seed;
use crate::volio::{Grid, LabelVolume, VolumeMeta, VoxelVolume};

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerOrgan<T> {
    pub lung: T,
    pub liver: T,
    pub lymph_node: T,
    pub other: T,
}

impl<T: Copy> PerOrgan<T> {
    pub fn get(&self, organ: Organ) -> T {
        match organ {
            Organ::Lung => self.lung,
            Organ::Liver => self.liver,
            Organ::LymphNode => self.lymph_node,
            Organ::Other => self.other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueHu {
    pub air: f64,
    pub body: f64,
    pub lung: f64,
    pub liver: f64,
    pub lymph: f64,
}

impl Default for TissueHu {
    fn default() -> Self {
        TissueHu {
            air: -1024.0,
            body: 20.0,
            lung: -800.0,
            liver: 60.0,
            lymph: 26.0,
        }
    }
}

impl TissueHu {
    pub fn of(&self, region: Region) -> f64 {
        match region {
            Region::Air => self.air,
            Region::Body => self.body,
            Region::Lung => self.lung,
            Region::Liver => self.liver,
            Region::LymphCorridor => self.lymph,
        }
    }
}

/// Structures that look like lesions but are not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MimicConfig {
    /// Tubular vessels per patient, split between lung and liver.
    pub vessels_per_patient: [usize; 2],
    pub vessel_radius_mm: [f64; 2],
    pub vessel_length_mm: [f64; 2],
    pub vessel_contrast_lung_hu: [f64; 2],
    pub vessel_contrast_liver_hu: [f64; 2],
    /// Compact mimics (bowel loops, cysts, partial-volume spots) per patient.
    pub blobs_per_patient: [usize; 2],
    pub blob_radius_mm: [f64; 2],
    /// Ratio between the longest and shortest in-plane radius.
    pub blob_elongation: [f64; 2],
    pub blob_contrast_hu: PerOrgan<[f64; 2]>,
    pub blob_organ_mix: PerOrgan<f64>,
}

impl Default for MimicConfig {
    fn default() -> Self {
        MimicConfig {
            vessels_per_patient: [4, 8],
            vessel_radius_mm: [1.2, 2.4],
            vessel_length_mm: [12.0, 40.0],
            vessel_contrast_lung_hu: [450.0, 700.0],
            vessel_contrast_liver_hu: [35.0, 70.0],
            blobs_per_patient: [4, 8],
            blob_radius_mm: [2.0, 5.0],
            blob_elongation: [1.0, 2.2],
            blob_contrast_hu: PerOrgan {
                lung: [350.0, 650.0],
                liver: [-60.0, -25.0],
                lymph_node: [30.0, 70.0],
                other: [35.0, 80.0],
            },
            blob_organ_mix: PerOrgan {
                lung: 0.25,
                liver: 0.25,
                lymph_node: 0.15,
                other: 0.35,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub rng_seed: u64,
    /// Prefix for patient ids, e.g. `u` gives `u000`, `u001`, ...
    pub id_prefix: String,
    pub n_patients: usize,
    pub studies_per_patient: usize,
    pub series_per_study: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Inclusive range of lesion instances per patient.
    pub lesions_per_patient: [usize; 2],
    pub lesion_radius_mm: PerOrgan<[f64; 2]>,
    /// Per-axis radius jitter around the drawn radius.
    pub lesion_aspect: [f64; 2],
    pub organ_mix: PerOrgan<f64>,
    /// Signed lesion contrast ranges relative to the host tissue.
    pub contrast_hu: PerOrgan<[f64; 2]>,
    /// Voxel noise standard deviation, drawn independently for every series.
    pub sigma_noise: f64,
    /// Standard deviation of per-series lesion contrast jitter.
    pub contrast_jitter_hu: f64,
    /// Maximum lesion displacement between studies.
    pub center_jitter_mm: f64,
    pub tissue_hu: TissueHu,
    pub layout: OrganLayout,
    pub mimics: MimicConfig,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            rng_seed: 7,
            id_prefix: "p".into(),
            n_patients: 4,
            studies_per_patient: 2,
            series_per_study: 2,
            dims: [96, 96, 32],
            spacing: [0.8, 0.8, 2.0],
            lesions_per_patient: [3, 7],
            lesion_radius_mm: PerOrgan {
                lung: [2.0, 5.0],
                liver: [2.5, 5.0],
                lymph_node: [2.0, 3.5],
                other: [2.0, 5.0],
            },
            lesion_aspect: [0.85, 1.15],
            organ_mix: PerOrgan {
                lung: 0.3,
                liver: 0.3,
                lymph_node: 0.2,
                other: 0.2,
            },
            contrast_hu: PerOrgan {
                lung: [500.0, 780.0],
                liver: [-90.0, -35.0],
                lymph_node: [45.0, 100.0],
                other: [45.0, 110.0],
            },
            sigma_noise: 10.0,
            contrast_jitter_hu: 10.0,
            center_jitter_mm: 2.0,
            tissue_hu: TissueHu::default(),
            layout: OrganLayout::default(),
            mimics: MimicConfig::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
        return Err(Error::InvalidInput(format!("{name}: empty range {r:?}")));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.studies_per_patient < 2 || self.series_per_study < 2 {
            return Err(Error::InvalidInput(
                "phantoms need at least two studies per patient and two series per study".into(),
            ));
        }
        if self.lesions_per_patient[0] > self.lesions_per_patient[1] {
            return Err(Error::InvalidInput("lesions_per_patient: empty range".into()));
        }
        check_range("lesion_aspect", self.lesion_aspect)?;
        for o in Organ::ALL {
            check_range("contrast_hu", self.contrast_hu.get(o))?;
            check_range("lesion_radius_mm", self.lesion_radius_mm.get(o))?;
            check_range("mimics.blob_contrast_hu", self.mimics.blob_contrast_hu.get(o))?;
        }
        let m = &self.mimics;
        for (n, r) in [
            ("mimics.vessel_radius_mm", m.vessel_radius_mm),
            ("mimics.vessel_length_mm", m.vessel_length_mm),
            ("mimics.vessel_contrast_lung_hu", m.vessel_contrast_lung_hu),
            ("mimics.vessel_contrast_liver_hu", m.vessel_contrast_liver_hu),
            ("mimics.blob_radius_mm", m.blob_radius_mm),
            ("mimics.blob_elongation", m.blob_elongation),
        ] {
            check_range(n, r)?;
        }
        if m.vessels_per_patient[0] > m.vessels_per_patient[1]
            || m.blobs_per_patient[0] > m.blobs_per_patient[1]
        {
            return Err(Error::InvalidInput("mimic counts: empty range".into()));
        }
        let mix_total: f64 = Organ::ALL.iter().map(|&o| self.organ_mix.get(o)).sum();
        if !(mix_total > 0.0) || Organ::ALL.iter().any(|&o| self.organ_mix.get(o) < 0.0) {
            return Err(Error::InvalidInput("organ_mix must be non-negative with a positive sum".into()));
        }
        if self.sigma_noise < 0.0 || self.contrast_jitter_hu < 0.0 || self.center_jitter_mm < 0.0 {
            return Err(Error::InvalidInput("noise and jitter must be non-negative".into()));
        }
        let meta = VolumeMeta {
            dims: self.dims,
            spacing: self.spacing,
            volume_id: String::new(),
            owner: Owner::new("", "", ""),
        };
        meta.validate()
    }

    pub fn patient_id(&self, i: usize) -> String {
        format!("{}{:03}", self.id_prefix, i)
    }

    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }
}

pub fn study_id(s: usize) -> String {
    format!("s{s}")
}

pub fn series_id(r: usize) -> String {
    format!("r{r}")
}

pub fn volume_id(patient: &str, study: usize, series: usize) -> String {
    format!("{patient}_s{study}_r{series}")
}

/// One appearance of a lesion instance in one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionOccurrence {
    pub volume_id: String,
    pub owner: Owner,
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
    pub contrast_hu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLesion {
    pub instance_id: String,
    pub patient_id: String,
    pub organ: Organ,
    pub occurrences: Vec<LesionOccurrence>,
}

/// A rendered series: HU voxels plus the organ region map.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    pub volume: VoxelVolume,
    pub regions: LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPatient {
    pub patient_id: String,
    pub volumes: Vec<PhantomVolume>,
    pub lesions: Vec<GroundTruthLesion>,
    /// Every per-slice lesion box in every volume.
    pub ground_truth: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSet {
    pub patients: Vec<PhantomPatient>,
}

impl PhantomSet {
    pub fn ground_truth(&self) -> Vec<Annotation> {
        self.patients
            .iter()
            .flat_map(|p| p.ground_truth.iter().cloned())
            .collect()
    }

    pub fn lesions(&self) -> Vec<GroundTruthLesion> {
        self.patients
            .iter()
            .flat_map(|p| p.lesions.iter().cloned())
            .collect()
    }

    pub fn volumes(&self) -> impl Iterator<Item = &PhantomVolume> {
        self.patients.iter().flat_map(|p| p.volumes.iter())
    }
}

/// Generates every patient in parallel; output does not depend on scheduling.
pub fn generate(config: &PhantomConfig) -> Result<PhantomSet> {
    config.validate()?;
    let patients = (0..config.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomSet { patients })
}

#[derive(Debug, Clone)]
struct LesionModel {
    organ: Organ,
    center: [f64; 3],
    radii: [f64; 3],
    contrast: f64,
}

#[derive(Debug, Clone)]
struct Vessel {
    region: Region,
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    contrast: f64,
}

#[derive(Debug, Clone)]
struct Blob {
    region: Region,
    center: [f64; 3],
    radii: [f64; 3],
    contrast: f64,
}

fn pick_organ(rng: &mut ChaCha8Rng, mix: &PerOrgan<f64>) -> Organ {
    let total: f64 = Organ::ALL.iter().map(|&o| mix.get(o)).sum();
    let mut u = rng.random_range(0.0..total);
    for o in [Organ::Lung, Organ::Liver, Organ::LymphNode, Organ::Other] {
        let w = mix.get(o);
        if u < w {
            return o;
        }
        u -= w;
    }
    Organ::Other
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// The ellipsoid and a 1 mm margin lie inside `region`.
fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        (ab.iter().zip(&ap).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

fn ellipsoid_inside(anatomy: &PatientAnatomy, region: Region, c: [f64; 3], r: [f64; 3]) -> bool {
    const DIRS: [[f64; 3]; 14] = [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
        [0.577, 0.577, 0.577],
        [0.577, 0.577, -0.577],
        [0.577, -0.577, 0.577],
        [0.577, -0.577, -0.577],
        [-0.577, 0.577, 0.577],
        [-0.577, 0.577, -0.577],
        [-0.577, -0.577, 0.577],
        [-0.577, -0.577, -0.577],
    ];
    if anatomy.region_at(c) != region {
        return false;
    }
    let ext = anatomy.extent_mm;
    DIRS.iter().all(|d| {
        let p = [
            c[0] + d[0] * (r[0] + 1.0),
            c[1] + d[1] * (r[1] + 1.0),
            c[2] + d[2] * (r[2] + 1.0),
        ];
        p.iter().zip(ext).all(|(&v, e)| v >= 0.0 && v <= e) && anatomy.region_at(p) == region
    })
}

fn separated(existing: &[([f64; 3], f64)], c: [f64; 3], r: f64) -> bool {
    existing.iter().all(|(e, er)| {
        let d2 = (0..3).map(|k| (e[k] - c[k]).powi(2)).sum::<f64>();
        d2.sqrt() > er + r + 2.0
    })
}

fn shrink(p: [f64; 3], by: [f64; 3], sign: f64) -> [f64; 3] {
    [p[0] + sign * by[0], p[1] + sign * by[1], p[2] + sign * by[2]]
}

fn sample_in_bounds(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [
        rng.random_range(lo[0]..hi[0].max(lo[0] + 1e-6)),
        rng.random_range(lo[1]..hi[1].max(lo[1] + 1e-6)),
        rng.random_range(lo[2]..hi[2].max(lo[2] + 1e-6)),
    ]
}

fn generate_patient(cfg: &PhantomConfig, index: usize) -> Result<PhantomPatient> {
    let patient_id = cfg.patient_id(index);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &["phantom", &patient_id]));
    let scale = 1.0 + uniform(&mut rng, [-cfg.layout.jitter, cfg.layout.jitter]);
    let anatomy = PatientAnatomy::new(&cfg.layout, cfg.extent_mm(), scale);

    let n_lesions = rng.random_range(cfg.lesions_per_patient[0]..=cfg.lesions_per_patient[1]);
    let mut occupied: Vec<([f64; 3], f64)> = Vec::new();
    let mut lesions = Vec::with_capacity(n_lesions);
    for k in 0..n_lesions {
        let organ = pick_organ(&mut rng, &cfg.organ_mix);
        let region = Region::of_organ(organ);
        let mut placed = None;
        let mut fits = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = uniform(&mut rng, cfg.lesion_radius_mm.get(organ));
            let radii = [
                r * uniform(&mut rng, cfg.lesion_aspect),
                r * uniform(&mut rng, cfg.lesion_aspect),
                r * uniform(&mut rng, cfg.lesion_aspect),
            ];
            let margin = [
                radii[0] + cfg.center_jitter_mm,
                radii[1] + cfg.center_jitter_mm,
                radii[2] + cfg.center_jitter_mm,
            ];
            let c = anatomy.sample_center(region, margin, &mut rng);
            let rmax = radii.iter().cloned().fold(0.0, f64::max);
            if ellipsoid_inside(&anatomy, region, c, margin) {
                fits = true;
                if separated(&occupied, c, rmax) {
                    placed = Some((c, radii, rmax));
                    break;
                }
            }
        }
        if !fits {
            return Err(Error::Placement(format!(
                "patient {patient_id}: lesion {k} ({organ}) could not be placed after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )));
        }
        // The organ has room, just not next to the lesions already there.
        let Some((center, radii, rmax)) = placed else {
            log::warn!("patient {patient_id}: lesion {k} ({organ}) skipped, its organ is crowded");
            continue;
        };
        occupied.push((center, rmax + cfg.center_jitter_mm));
        let contrast = uniform(&mut rng, cfg.contrast_hu.get(organ));
        lesions.push(LesionModel {
            organ,
            center,
            radii,
            contrast,
        });
    }

    let m = &cfg.mimics;
    let n_vessels = rng.random_range(m.vessels_per_patient[0]..=m.vessels_per_patient[1]);
    let mut vessels = Vec::with_capacity(n_vessels);
    for k in 0..n_vessels {
        let region = if k % 2 == 0 { Region::Lung } else { Region::Liver };
        let (lo, hi) = anatomy.region_bounds(region);
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let a = sample_in_bounds(&mut rng, lo, hi);
            let len = uniform(&mut rng, m.vessel_length_mm);
            // Mostly through-plane so cross-sections look like round spots.
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let tilt: f64 = rng.random_range(0.0..1.0);
            let dir = [tilt * theta.cos(), tilt * theta.sin(), 1.0];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + 1.0).sqrt();
            let b = [
                a[0] + len * dir[0] / norm,
                a[1] + len * dir[1] / norm,
                a[2] + len * dir[2] / norm,
            ];
            let radius = uniform(&mut rng, m.vessel_radius_mm);
            let contrast = if region == Region::Lung {
                uniform(&mut rng, m.vessel_contrast_lung_hu)
            } else {
                uniform(&mut rng, m.vessel_contrast_liver_hu)
            };
            // Vessels never touch a lesion, so every lesion stays a separate object.
            let clear = lesions.iter().all(|l| {
                let rmax = l.radii.iter().fold(0.0f64, |x, &y| x.max(y));
                segment_distance(l.center, a, b) > rmax + radius + cfg.center_jitter_mm + 3.0
            });
            if anatomy.region_at(a) == region && clear {
                vessels.push(Vessel {
                    region,
                    a,
                    b,
                    radius,
                    contrast,
                });
                break;
            }
        }
    }

    let n_blobs = rng.random_range(m.blobs_per_patient[0]..=m.blobs_per_patient[1]);
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let organ = pick_organ(&mut rng, &m.blob_organ_mix);
        let region = Region::of_organ(organ);
        let (lo, hi) = anatomy.region_bounds(region);
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = uniform(&mut rng, m.blob_radius_mm);
            let e = uniform(&mut rng, m.blob_elongation);
            let radii = if rng.random_bool(0.5) {
                [r * e, r, r]
            } else {
                [r, r * e, r]
            };
            let c = sample_in_bounds(&mut rng, shrink(lo, radii, 1.0), shrink(hi, radii, -1.0));
            let rmax = r * e;
            if ellipsoid_inside(&anatomy, region, c, radii) && separated(&occupied, c, rmax) {
                occupied.push((c, rmax));
                blobs.push(Blob {
                    region,
                    center: c,
                    radii,
                    contrast: uniform(&mut rng, m.blob_contrast_hu.get(organ)),
                });
                break;
            }
        }
    }

    let regions = region_map(cfg, &anatomy);
    let noise = Normal::new(0.0, cfg.sigma_noise.max(1e-12)).expect("finite sigma");
    let jitter = Normal::new(0.0, cfg.contrast_jitter_hu.max(1e-12)).expect("finite sigma");

    let mut volumes = Vec::new();
    let mut occurrences: Vec<Vec<LesionOccurrence>> = vec![Vec::new(); lesions.len()];
    let mut ground_truth = Vec::new();
    for s in 0..cfg.studies_per_patient {
        let mut study_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &["study", &patient_id, &study_id(s)]));
        let centers: Vec<[f64; 3]> = lesions
            .iter()
            .map(|l| {
                if s == 0 || cfg.center_jitter_mm == 0.0 {
                    return l.center;
                }
                loop {
                    let d = [
                        study_rng.random_range(-1.0..1.0),
                        study_rng.random_range(-1.0..1.0),
                        study_rng.random_range(-1.0..1.0),
                    ];
                    let n2: f64 = d.iter().map(|v| v * v).sum();
                    if n2 <= 1.0 {
                        let j = cfg.center_jitter_mm;
                        break [l.center[0] + j * d[0], l.center[1] + j * d[1], l.center[2] + j * d[2]];
                    }
                }
            })
            .collect();
        for r in 0..cfg.series_per_study {
            let vid = volume_id(&patient_id, s, r);
            let owner = Owner::new(&patient_id, &study_id(s), &series_id(r));
            let mut series_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &["series", &vid]));
            let rendered: Vec<LesionModel> = lesions
                .iter()
                .zip(&centers)
                .map(|(l, c)| LesionModel {
                    center: *c,
                    contrast: l.contrast
                        + if cfg.contrast_jitter_hu > 0.0 {
                            jitter.sample(&mut series_rng)
                        } else {
                            0.0
                        },
                    ..l.clone()
                })
                .collect();
            let meta = VolumeMeta {
                dims: cfg.dims,
                spacing: cfg.spacing,
                volume_id: vid.clone(),
                owner: owner.clone(),
            };
            let volume = render(cfg, &meta, &regions, &rendered, &vessels, &blobs, &noise, &mut series_rng)?;
            for (k, l) in rendered.iter().enumerate() {
                let instance_id = format!("{patient_id}_L{k}");
                occurrences[k].push(LesionOccurrence {
                    volume_id: vid.clone(),
                    owner: owner.clone(),
                    center_mm: l.center,
                    radii_mm: l.radii,
                    contrast_hu: l.contrast,
                });
                for (z, bbox) in lesion_boxes(l.center, l.radii, cfg.spacing, cfg.dims[2]) {
                    ground_truth.push(Annotation {
                        id: format!("{vid}:L{k}:z{z}"),
                        owner: owner.clone(),
                        volume_id: vid.clone(),
                        bbox,
                        source: Source::Original,
                        organ: Some(l.organ),
                        key_slice: false,
                        dataset_id: UNIVERSAL_DATASET,
                        matched_id: None,
                        instance_id: Some(instance_id.clone()),
                        score: None,
                    });
                }
            }
            let mut region_grid = regions.clone();
            region_grid.meta = meta;
            volumes.push(PhantomVolume {
                volume,
                regions: region_grid,
            });
        }
    }
    mark_key_slices(&mut ground_truth);

    let lesions = lesions
        .into_iter()
        .zip(occurrences)
        .enumerate()
        .map(|(k, (l, occ))| GroundTruthLesion {
            instance_id: format!("{patient_id}_L{k}"),
            patient_id: patient_id.clone(),
            organ: l.organ,
            occurrences: occ,
        })
        .collect();
    Ok(PhantomPatient {
        patient_id,
        volumes,
        lesions,
        ground_truth,
    })
}

/// Flags the largest-area box of each instance in each volume (lowest z on ties).
fn mark_key_slices(gt: &mut [Annotation]) {
    use std::collections::BTreeMap;
    let mut best: BTreeMap<(String, String), (f64, u32, usize)> = BTreeMap::new();
    for (i, a) in gt.iter().enumerate() {
        let key = (a.volume_id.clone(), a.instance_id.clone().unwrap_or_default());
        let area = crate::geometry::box_area(&a.bbox);
        let e = best.entry(key).or_insert((area, a.bbox.z, i));
        if area > e.0 || (area == e.0 && a.bbox.z < e.1) {
            *e = (area, a.bbox.z, i);
        }
    }
    for (_, (_, _, i)) in best {
        gt[i].key_slice = true;
    }
}

fn region_map(cfg: &PhantomConfig, anatomy: &PatientAnatomy) -> LabelVolume {
    let [nx, ny, nz] = cfg.dims;
    let [sx, sy, sz] = cfg.spacing;
    let mut vox = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [(x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy, (z as f64 + 0.5) * sz];
                vox.push(anatomy.region_at(p) as u8);
            }
        }
    }
    Grid {
        meta: VolumeMeta {
            dims: cfg.dims,
            spacing: cfg.spacing,
            volume_id: String::new(),
            owner: Owner::new("", "", ""),
        },
        voxels: vox,
    }
}

/// Per-slice tight boxes of an ellipsoid. Slice `k` covers `[k*sz, (k+1)*sz)`
/// in z; its cross-section is the projection of the ellipsoid part inside the slab.
pub fn lesion_boxes(center: [f64; 3], radii: [f64; 3], spacing: [f64; 3], nz: usize) -> Vec<(u32, Box2D)> {
    let sz = spacing[2];
    let lo = ((center[2] - radii[2]) / sz).floor().max(0.0) as usize;
    let hi = (((center[2] + radii[2]) / sz).floor() as usize).min(nz.saturating_sub(1));
    let mut out = Vec::new();
    for k in lo..=hi {
        let (z0, z1) = (k as f64 * sz, (k + 1) as f64 * sz);
        let dz = if center[2] < z0 {
            z0 - center[2]
        } else if center[2] > z1 {
            center[2] - z1
        } else {
            0.0
        };
        if dz >= radii[2] {
            continue;
        }
        let s = (1.0 - (dz / radii[2]).powi(2)).sqrt();
        let (hx, hy) = (radii[0] * s, radii[1] * s);
        let b = Box2D {
            z: k as u32,
            x1: (center[0] - hx) / spacing[0],
            y1: (center[1] - hy) / spacing[1],
            x2: (center[0] + hx) / spacing[0],
            y2: (center[1] + hy) / spacing[1],
        };
        if b.validate().is_ok() {
            out.push((k as u32, b));
        }
    }
    out
}

/// Fraction of slab `[z0, z1)` covered by the chord `[c - h, c + h]`.
#[inline]
fn slab_fraction(c: f64, h: f64, z0: f64, z1: f64) -> f64 {
    let overlap = (c + h).min(z1) - (c - h).max(z0);
    if overlap <= 0.0 {
        0.0
    } else {
        overlap / (z1 - z0)
    }
}

#[allow(clippy::too_many_arguments)]
fn render(
    cfg: &PhantomConfig,
    meta: &VolumeMeta,
    regions: &LabelVolume,
    lesions: &[LesionModel],
    vessels: &[Vessel],
    blobs: &[Blob],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<VoxelVolume> {
    let [nx, ny, nz] = cfg.dims;
    let [sx, sy, sz] = cfg.spacing;
    let mut hu: Vec<f64> = regions
        .voxels
        .iter()
        .map(|&c| cfg.tissue_hu.of(Region::from_code(c)))
        .collect();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let clampi = |v: f64, n: usize| -> usize { (v.max(0.0) as usize).min(n - 1) };

    // Ellipsoids (lesions and blobs) with through-slab partial volume.
    let mut paint_ellipsoid = |c: [f64; 3], r: [f64; 3], contrast: f64, only: Option<Region>| {
        let (x0, x1) = (clampi((c[0] - r[0]) / sx - 1.0, nx), clampi((c[0] + r[0]) / sx + 1.0, nx));
        let (y0, y1) = (clampi((c[1] - r[1]) / sy - 1.0, ny), clampi((c[1] + r[1]) / sy + 1.0, ny));
        let (z0, z1) = (clampi((c[2] - r[2]) / sz - 1.0, nz), clampi((c[2] + r[2]) / sz + 1.0, nz));
        for y in y0..=y1 {
            let dy = ((y as f64 + 0.5) * sy - c[1]) / r[1];
            for x in x0..=x1 {
                let dx = ((x as f64 + 0.5) * sx - c[0]) / r[0];
                let q = 1.0 - dx * dx - dy * dy;
                if q <= 0.0 {
                    continue;
                }
                let h = r[2] * q.sqrt();
                for z in z0..=z1 {
                    let f = slab_fraction(c[2], h, z as f64 * sz, (z + 1) as f64 * sz);
                    if f <= 0.0 {
                        continue;
                    }
                    let i = idx(x, y, z);
                    if let Some(reg) = only {
                        if Region::from_code(regions.voxels[i]) != reg {
                            continue;
                        }
                    }
                    hu[i] += contrast * f;
                }
            }
        }
    };
    for b in blobs {
        paint_ellipsoid(b.center, b.radii, b.contrast, Some(b.region));
    }
    for l in lesions {
        paint_ellipsoid(l.center, l.radii, l.contrast, None);
    }

    for v in vessels {
        let lo = [0, 1, 2].map(|k| v.a[k].min(v.b[k]) - v.radius);
        let hi = [0, 1, 2].map(|k| v.a[k].max(v.b[k]) + v.radius);
        let ab = [v.b[0] - v.a[0], v.b[1] - v.a[1], v.b[2] - v.a[2]];
        let ab2: f64 = ab.iter().map(|t| t * t).sum();
        for z in clampi(lo[2] / sz, nz)..=clampi(hi[2] / sz, nz) {
            let pz = (z as f64 + 0.5) * sz;
            for y in clampi(lo[1] / sy, ny)..=clampi(hi[1] / sy, ny) {
                let py = (y as f64 + 0.5) * sy;
                for x in clampi(lo[0] / sx, nx)..=clampi(hi[0] / sx, nx) {
                    let px = (x as f64 + 0.5) * sx;
                    let ap = [px - v.a[0], py - v.a[1], pz - v.a[2]];
                    let t = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / ab2).clamp(0.0, 1.0);
                    let d2: f64 = (0..3).map(|k| (ap[k] - t * ab[k]).powi(2)).sum();
                    if d2 > v.radius * v.radius {
                        continue;
                    }
                    let i = idx(x, y, z);
                    if Region::from_code(regions.voxels[i]) == v.region {
                        hu[i] += v.contrast;
                    }
                }
            }
        }
    }

    let add_noise = cfg.sigma_noise > 0.0;
    let voxels = hu
        .into_iter()
        .zip(&regions.voxels)
        .map(|(h, &code)| {
            let n = if add_noise && code != Region::Air as u8 {
                noise.sample(rng)
            } else {
                0.0
            };
            (h + n).round().clamp(-1024.0, 3071.0) as i16
        })
        .collect();
    Grid::new(meta.clone(), voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_area;

    fn small() -> PhantomConfig {
        PhantomConfig {
            n_patients: 2,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&PhantomConfig { rng_seed: 8, ..small() }).unwrap();
        assert_ne!(a.patients[0].volumes[0].volume, c.patients[0].volumes[0].volume);
    }

    #[test]
    fn no_lesions_means_empty_ground_truth() {
        let cfg = PhantomConfig {
            lesions_per_patient: [0, 0],
            ..small()
        };
        let set = generate(&cfg).unwrap();
        assert!(set.ground_truth().is_empty());
        assert_eq!(set.volumes().count(), 2 * 2 * 2);
    }

    #[test]
    fn sphere_box_count_oracle() {
        // Sphere of radius 4 mm centred in slab 10 of a 2 mm grid: the slabs whose
        // nearest point is closer than 4 mm are offsets -2..=2.
        let c = [20.0, 20.0, 21.0];
        let boxes = lesion_boxes(c, [4.0; 3], [0.8, 0.8, 2.0], 40);
        let zs: Vec<u32> = boxes.iter().map(|b| b.0).collect();
        assert_eq!(zs, vec![8, 9, 10, 11, 12]);
        // Oracle: nearest distance from the centre to each slab.
        for (z, b) in &boxes {
            let (z0, z1) = (*z as f64 * 2.0, (*z + 1) as f64 * 2.0);
            let dz = if c[2] < z0 { z0 - c[2] } else if c[2] > z1 { c[2] - z1 } else { 0.0 };
            let half = (16.0 - dz * dz).sqrt();
            assert!((b.width() * 0.8 - 2.0 * half).abs() < 1e-9);
        }
        assert!(box_area(&boxes[2].1) > box_area(&boxes[0].1));
    }

    #[test]
    fn organ_labels_match_center_region() {
        let set = generate(&small()).unwrap();
        let cfg = small();
        for p in &set.patients {
            for a in &p.ground_truth {
                let vol = p.volumes.iter().find(|v| v.volume.meta.volume_id == a.volume_id).unwrap();
                let (cx, cy) = a.bbox.center();
                let code = vol.regions.get(
                    (cx.floor() as usize).min(cfg.dims[0] - 1),
                    (cy.floor() as usize).min(cfg.dims[1] - 1),
                    a.bbox.z as usize,
                );
                assert_eq!(Region::from_code(code).organ(), a.organ, "{}", a.id);
            }
        }
    }

    #[test]
    fn instances_recur_across_every_series() {
        let set = generate(&small()).unwrap();
        for l in set.lesions() {
            assert_eq!(l.occurrences.len(), 4);
        }
    }

    #[test]
    fn lesions_are_visible_in_the_image() {
        let cfg = PhantomConfig {
            n_patients: 1,
            sigma_noise: 0.0,
            contrast_jitter_hu: 0.0,
            mimics: MimicConfig {
                vessels_per_patient: [0, 0],
                blobs_per_patient: [0, 0],
                ..MimicConfig::default()
            },
            ..small()
        };
        let set = generate(&cfg).unwrap();
        let p = &set.patients[0];
        let key = p.ground_truth.iter().find(|a| a.key_slice).unwrap();
        let vol = &p.volumes.iter().find(|v| v.volume.meta.volume_id == key.volume_id).unwrap();
        let (cx, cy) = key.bbox.center();
        let (x, y, z) = (cx as usize, cy as usize, key.bbox.z as usize);
        let base = cfg.tissue_hu.of(Region::from_code(vol.regions.get(x, y, z)));
        assert!((vol.volume.get(x, y, z) as f64 - base).abs() > 20.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PhantomConfig { studies_per_patient: 1, ..small() }.validate().is_err());
        let mut bad = small();
        bad.lesion_radius_mm.liver = [5.0, 2.0];
        assert!(bad.validate().is_err());
        let mut oversized = small();
        oversized.lesion_radius_mm.liver = [40.0, 40.0];
        oversized.organ_mix = PerOrgan {
            lung: 0.0,
            liver: 1.0,
            lymph_node: 0.0,
            other: 0.0,
        };
        assert!(matches!(generate(&oversized), Err(Error::Placement(_))));
    }

    #[test]
    fn crowded_organs_drop_lesions() {
        let crowded = PhantomConfig {
            lesions_per_patient: [60, 60],
            ..small()
        };
        let set = generate(&crowded).unwrap();
        for p in &set.patients {
            assert!(p.lesions.len() < 60);
            assert!(!p.lesions.is_empty());
        }
    }
}
