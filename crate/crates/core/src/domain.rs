//! Identifiers, annotations, and dataset descriptors shared across the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box2D;

/// Number of dataset experts (and of classification heads).
pub const NUM_DATASETS: usize = 4;
pub const NUM_HEADS: usize = 4;

/// The universal, partially labeled dataset.
pub const UNIVERSAL_DATASET: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Owner {
    pub patient_id: String,
    pub study_id: String,
    pub series_id: String,
}

impl Owner {
    pub fn new(patient: &str, study: &str, series: &str) -> Self {
        Owner {
            patient_id: patient.to_string(),
            study_id: study.to_string(),
            series_id: series.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Organ {
    LymphNode,
    Lung,
    Liver,
    Other,
}

impl Organ {
    pub const ALL: [Organ; 4] = [Organ::LymphNode, Organ::Lung, Organ::Liver, Organ::Other];

    /// Organ-specific classification head; `None` for organs only the whole-body head covers.
    pub fn head(self) -> Option<usize> {
        match self {
            Organ::Lung => Some(1),
            Organ::Liver => Some(2),
            Organ::LymphNode => Some(3),
            Organ::Other => None,
        }
    }

    pub fn from_head(head: usize) -> Option<Organ> {
        match head {
            1 => Some(Organ::Lung),
            2 => Some(Organ::Liver),
            3 => Some(Organ::LymphNode),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Organ::LymphNode => "lymph_node",
            Organ::Lung => "lung",
            Organ::Liver => "liver",
            Organ::Other => "other",
        }
    }

    /// Lenient parse; unknown labels fall back to `Other`.
    pub fn parse_lenient(s: &str) -> Organ {
        s.parse().unwrap_or(Organ::Other)
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Organ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lymph_node" => Ok(Organ::LymphNode),
            "lung" => Ok(Organ::Lung),
            "liver" => Ok(Organ::Liver),
            "other" => Ok(Organ::Other),
            _ => Err(Error::InvalidInput(format!("unknown organ label '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Original,
    Mined,
    Suspicious,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Original => "original",
            Source::Mined => "mined",
            Source::Suspicious => "suspicious",
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Source::Original),
            "mined" => Ok(Source::Mined),
            "suspicious" => Ok(Source::Suspicious),
            _ => Err(Error::InvalidInput(format!("unknown annotation source '{s}'"))),
        }
    }
}

/// A 2D lesion box on one slice of one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub owner: Owner,
    pub volume_id: String,
    pub bbox: Box2D,
    pub source: Source,
    pub organ: Option<Organ>,
    pub key_slice: bool,
    pub dataset_id: usize,
    /// Original annotation a mined box was matched to.
    pub matched_id: Option<String>,
    /// Ground-truth lesion instance, when known.
    pub instance_id: Option<String>,
    /// Embedding distance of a mined box, detector score of a suspicious one.
    pub score: Option<f64>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if self.dataset_id >= NUM_DATASETS {
            return Err(Error::InvalidInput(format!(
                "annotation {} has dataset id {} outside 0..{}",
                self.id, self.dataset_id, NUM_DATASETS
            )));
        }
        match self.source {
            Source::Mined if self.matched_id.is_none() => Err(Error::InvalidInput(format!(
                "mined annotation {} records no matched original annotation",
                self.id
            ))),
            Source::Suspicious if !(1..NUM_DATASETS).contains(&self.dataset_id) => {
                Err(Error::InvalidInput(format!(
                    "suspicious annotation {} must come from a single-type dataset, got {}",
                    self.id, self.dataset_id
                )))
            }
            _ => Ok(()),
        }
    }

    /// Mined boxes supervise classification only, never localization.
    pub fn classification_only(&self) -> bool {
        self.source != Source::Original
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    UniversalPartial,
    SingleTypeFull,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: usize,
    pub name: String,
    pub kind: DatasetKind,
    /// `None` means whole body.
    pub organ_focus: Option<Organ>,
}

impl DatasetDescriptor {
    /// The universal dataset plus one fully labeled dataset per organ head.
    pub fn standard() -> Vec<DatasetDescriptor> {
        let single = |d: usize, name: &str| DatasetDescriptor {
            dataset_id: d,
            name: name.to_string(),
            kind: DatasetKind::SingleTypeFull,
            organ_focus: Organ::from_head(d),
        };
        vec![
            DatasetDescriptor {
                dataset_id: UNIVERSAL_DATASET,
                name: "universal".into(),
                kind: DatasetKind::UniversalPartial,
                organ_focus: None,
            },
            single(1, "lung_nodules"),
            single(2, "liver_tumors"),
            single(3, "lymph_nodes"),
        ]
    }

    pub fn validate_set(set: &[DatasetDescriptor]) -> Result<()> {
        let universal: Vec<_> = set
            .iter()
            .filter(|d| d.kind == DatasetKind::UniversalPartial)
            .collect();
        if universal.len() != 1 || universal[0].dataset_id != UNIVERSAL_DATASET {
            return Err(Error::InvalidInput(
                "exactly one universal partially labeled dataset with id 0 is required".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for d in set {
            if d.dataset_id >= NUM_DATASETS || !seen.insert(d.dataset_id) {
                return Err(Error::InvalidInput(format!(
                    "dataset id {} is out of range or repeated",
                    d.dataset_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub series_id: String,
    pub volume_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub study_id: String,
    pub series: Vec<SeriesEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    pub studies: Vec<StudyEntry>,
}

/// Patient / study / series hierarchy with one volume per series.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientIndex {
    pub patients: Vec<PatientEntry>,
}

impl PatientIndex {
    /// Builds the hierarchy from `(owner, volume_id)` pairs, keeping first-seen order.
    pub fn from_volumes<'a>(
        volumes: impl IntoIterator<Item = (&'a Owner, &'a str)>,
    ) -> Result<Self> {
        let mut index = PatientIndex::default();
        for (owner, volume_id) in volumes {
            index.insert(owner, volume_id)?;
        }
        index.validate()?;
        Ok(index)
    }

    fn insert(&mut self, owner: &Owner, volume_id: &str) -> Result<()> {
        let patient = match self
            .patients
            .iter()
            .position(|p| p.patient_id == owner.patient_id)
        {
            Some(i) => &mut self.patients[i],
            None => {
                self.patients.push(PatientEntry {
                    patient_id: owner.patient_id.clone(),
                    studies: Vec::new(),
                });
                self.patients.last_mut().unwrap()
            }
        };
        let study = match patient
            .studies
            .iter()
            .position(|s| s.study_id == owner.study_id)
        {
            Some(i) => &mut patient.studies[i],
            None => {
                patient.studies.push(StudyEntry {
                    study_id: owner.study_id.clone(),
                    series: Vec::new(),
                });
                patient.studies.last_mut().unwrap()
            }
        };
        if study.series.iter().any(|s| s.series_id == owner.series_id) {
            return Err(Error::InvalidInput(format!(
                "series {}/{}/{} listed twice",
                owner.patient_id, owner.study_id, owner.series_id
            )));
        }
        study.series.push(SeriesEntry {
            series_id: owner.series_id.clone(),
            volume_id: volume_id.to_string(),
        });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut volumes = BTreeSet::new();
        let mut patients = BTreeSet::new();
        for p in &self.patients {
            if !patients.insert(&p.patient_id) {
                return Err(Error::InvalidInput(format!(
                    "patient {} repeated",
                    p.patient_id
                )));
            }
            let mut studies = BTreeSet::new();
            for s in &p.studies {
                if !studies.insert(&s.study_id) {
                    return Err(Error::InvalidInput(format!(
                        "study {} repeated for patient {}",
                        s.study_id, p.patient_id
                    )));
                }
                let mut series = BTreeSet::new();
                for se in &s.series {
                    if !series.insert(&se.series_id) || !volumes.insert(&se.volume_id) {
                        return Err(Error::InvalidInput(format!(
                            "series {} / volume {} repeated",
                            se.series_id, se.volume_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn volume_of(&self, owner: &Owner) -> Option<&str> {
        self.patients
            .iter()
            .find(|p| p.patient_id == owner.patient_id)?
            .studies
            .iter()
            .find(|s| s.study_id == owner.study_id)?
            .series
            .iter()
            .find(|s| s.series_id == owner.series_id)
            .map(|s| s.volume_id.as_str())
    }

    pub fn contains(&self, owner: &Owner) -> bool {
        self.volume_of(owner).is_some()
    }

    /// Map from volume id to its owner triple.
    pub fn owners(&self) -> BTreeMap<String, Owner> {
        let mut out = BTreeMap::new();
        for p in &self.patients {
            for s in &p.studies {
                for se in &s.series {
                    out.insert(
                        se.volume_id.clone(),
                        Owner::new(&p.patient_id, &s.study_id, &se.series_id),
                    );
                }
            }
        }
        out
    }

    /// Checks that every annotation references a known series.
    pub fn check_references(&self, annotations: &[Annotation]) -> Result<()> {
        for a in annotations {
            match self.volume_of(&a.owner) {
                Some(v) if v == a.volume_id => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "annotation {} references unknown series {}/{}/{} (volume {})",
                        a.id, a.owner.patient_id, a.owner.study_id, a.owner.series_id, a.volume_id
                    )))
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(source: Source, dataset_id: usize, matched: Option<&str>) -> Annotation {
        Annotation {
            id: "a1".into(),
            owner: Owner::new("p", "s", "r"),
            volume_id: "v".into(),
            bbox: Box2D::new(0, 0.0, 0.0, 4.0, 4.0).unwrap(),
            source,
            organ: None,
            key_slice: false,
            dataset_id,
            matched_id: matched.map(str::to_string),
            instance_id: None,
            score: None,
        }
    }

    #[test]
    fn annotation_provenance_rules() {
        assert!(ann(Source::Original, 0, None).validate().is_ok());
        assert!(ann(Source::Mined, 0, None).validate().is_err());
        assert!(ann(Source::Mined, 0, Some("a0")).validate().is_ok());
        assert!(ann(Source::Suspicious, 0, None).validate().is_err());
        assert!(ann(Source::Suspicious, 2, None).validate().is_ok());
        assert!(ann(Source::Original, 4, None).validate().is_err());
    }

    #[test]
    fn standard_datasets_valid() {
        let set = DatasetDescriptor::standard();
        DatasetDescriptor::validate_set(&set).unwrap();
        let mut broken = set.clone();
        broken[1].kind = DatasetKind::UniversalPartial;
        assert!(DatasetDescriptor::validate_set(&broken).is_err());
    }

    #[test]
    fn index_hierarchy() {
        let o1 = Owner::new("p1", "s1", "a");
        let o2 = Owner::new("p1", "s1", "b");
        let o3 = Owner::new("p1", "s2", "a");
        let idx =
            PatientIndex::from_volumes(vec![(&o1, "v1"), (&o2, "v2"), (&o3, "v3")]).unwrap();
        assert_eq!(idx.patients.len(), 1);
        assert_eq!(idx.patients[0].studies.len(), 2);
        assert_eq!(idx.volume_of(&o2), Some("v2"));
        assert!(!idx.contains(&Owner::new("p2", "s1", "a")));
        assert!(PatientIndex::from_volumes(vec![(&o1, "v1"), (&o1, "v2")]).is_err());
        assert!(PatientIndex::from_volumes(vec![(&o1, "v1"), (&o2, "v1")]).is_err());
    }

    #[test]
    fn organ_heads_roundtrip() {
        for h in 1..NUM_HEADS {
            assert_eq!(Organ::from_head(h).unwrap().head(), Some(h));
        }
        assert_eq!(Organ::Other.head(), None);
        assert_eq!(Organ::parse_lenient("kidney"), Organ::Other);
    }
}
