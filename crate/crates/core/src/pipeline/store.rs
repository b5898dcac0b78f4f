//! Dataset directories: a volume list, voxel and label files in the volume
//! container format, and three annotation manifests (visible annotations,
//! full ground truth, masked-out ground truth).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::experiment::SplitSet;
use super::prepare::{by_volume, collect_set, prepare_volume, PreparedSet};
use crate::detector::{Embedder, ProposalConfig};
use crate::domain::Annotation;
use crate::error::{Error, Result};
use crate::mining::SliceKey;
use crate::volio::container::{read_labels, read_text, read_volume, read_windowed, write_grid};
use crate::volio::manifest::{read_annotations, write_annotations};
use crate::volio::{preprocess, LabelVolume, PreprocessConfig, WindowedVolume};

pub const VOLUME_LIST: &str = "volumes.txt";
pub const ANNOTATIONS: &str = "annotations.tsv";
pub const GROUND_TRUTH: &str = "ground_truth.tsv";
pub const HIDDEN: &str = "hidden.tsv";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    pub volume_ids: Vec<String>,
    /// Labels a detector may train on.
    pub annotations: Vec<Annotation>,
    pub ground_truth: Vec<Annotation>,
    /// Ground truth masked out of `annotations`; empty for real data.
    pub hidden: Vec<Annotation>,
}

impl DatasetIndex {
    /// Dataset id shared by every visible annotation.
    pub fn dataset_id(&self) -> Result<usize> {
        let mut ids = self.annotations.iter().map(|a| a.dataset_id);
        let first = ids
            .next()
            .ok_or_else(|| Error::InvalidInput("dataset has no annotations".into()))?;
        if ids.any(|d| d != first) {
            return Err(Error::InvalidInput("annotations mix several dataset ids".into()));
        }
        Ok(first)
    }
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let list = read_text(&dir.join(VOLUME_LIST))?;
    let volume_ids = list
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    let hidden = if dir.join(HIDDEN).exists() {
        read_annotations(&dir.join(HIDDEN))?
    } else {
        Vec::new()
    };
    Ok(DatasetIndex {
        volume_ids,
        annotations: read_annotations(&dir.join(ANNOTATIONS))?,
        ground_truth: read_annotations(&dir.join(GROUND_TRUTH))?,
        hidden,
    })
}

pub fn write_index(dir: &Path, index: &DatasetIndex) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut list = String::new();
    for v in &index.volume_ids {
        writeln!(list, "{v}").unwrap();
    }
    fs::write(dir.join(VOLUME_LIST), list)?;
    write_annotations(&dir.join(ANNOTATIONS), &index.annotations)?;
    write_annotations(&dir.join(GROUND_TRUTH), &index.ground_truth)?;
    write_annotations(&dir.join(HIDDEN), &index.hidden)
}

/// Writes a generated phantom split: HU volumes, region labels and manifests.
pub fn write_split(dir: &Path, split: &SplitSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for pv in split.set.volumes() {
        write_grid(dir, &pv.volume)?;
        write_grid(dir, &pv.regions)?;
    }
    write_index(
        dir,
        &DatasetIndex {
            volume_ids: split.set.volumes().map(|v| v.volume.meta.volume_id.clone()).collect(),
            annotations: split.visible.clone(),
            ground_truth: split.set.ground_truth(),
            hidden: split.hidden.clone(),
        },
    )
}

/// Windows, resamples and clips every volume of `input` into `output`, and
/// maps every manifest onto the canonical grid.
pub fn preprocess_dir(input: &Path, output: &Path, cfg: &PreprocessConfig) -> Result<()> {
    let index = read_index(input)?;
    fs::create_dir_all(output)?;
    let lists = [&index.annotations, &index.ground_truth, &index.hidden];
    let grouped: Vec<BTreeMap<&str, Vec<&Annotation>>> = lists.iter().map(|l| by_volume(l)).collect();
    let mapped: Vec<[Vec<Annotation>; 3]> = index
        .volume_ids
        .par_iter()
        .map(|id| {
            let v = read_volume(input, id)?;
            let labels: LabelVolume = read_labels(input, id)?;
            let (w, tr) = preprocess(&v, cfg)?;
            let labels = tr.map_labels(&labels)?;
            if labels.meta != w.meta {
                return Err(Error::Contract(format!("volume {id}: label grid differs from image grid")));
            }
            write_grid(output, &w)?;
            write_grid(output, &labels)?;
            let map = |g: &BTreeMap<&str, Vec<&Annotation>>| -> Vec<Annotation> {
                g.get(id.as_str())
                    .into_iter()
                    .flatten()
                    .map(|a| Annotation {
                        bbox: tr.map_box(&a.bbox),
                        ..(*a).clone()
                    })
                    .collect()
            };
            Ok([map(&grouped[0]), map(&grouped[1]), map(&grouped[2])])
        })
        .collect::<Result<_>>()?;
    let mut out = DatasetIndex {
        volume_ids: index.volume_ids.clone(),
        ..DatasetIndex::default()
    };
    for [a, g, h] in mapped {
        out.annotations.extend(a);
        out.ground_truth.extend(g);
        out.hidden.extend(h);
    }
    write_index(output, &out)
}

/// Loads a preprocessed directory and rebuilds its proposals.
pub fn load_prepared(dir: &Path, proposal: &ProposalConfig, embedder: &Embedder) -> Result<(PreparedSet, DatasetIndex)> {
    let index = read_index(dir)?;
    let gt = by_volume(&index.ground_truth);
    let outs = index
        .volume_ids
        .par_iter()
        .map(|id| {
            let w: WindowedVolume = read_windowed(dir, id)?;
            let labels = read_labels(dir, id)?;
            let boxes = gt.get(id.as_str()).into_iter().flatten().map(|a| (*a).clone()).collect();
            prepare_volume(&w, &labels, boxes, proposal, embedder)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((collect_set(outs), index))
}

pub const SLICE_HEADER: &str = "#volume_id\tz";

pub fn write_slices(path: &Path, slices: &[SliceKey]) -> Result<()> {
    let mut s = String::from(SLICE_HEADER);
    s.push('\n');
    for k in slices {
        writeln!(s, "{}\t{}", k.volume_id, k.z).unwrap();
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_slices(path: &Path) -> Result<Vec<SliceKey>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (v, z) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("slice list", path, i + 1, "expected volume_id<TAB>z"))?;
        let z = z
            .trim()
            .parse()
            .map_err(|_| Error::format("slice list", path, i + 1, format!("bad slice index '{z}'")))?;
        out.push(SliceKey::new(v, z));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::experiment::{generate_split, prepare_split, SetKind, Setup};
    use crate::detector::EmbedConfig;

    fn small_setup() -> Setup {
        let mut s = Setup::default();
        s.experiment.universal_patients = 2;
        s
    }

    #[test]
    fn directory_round_trip_matches_in_memory_preparation() {
        let setup = small_setup();
        let split = generate_split(&setup, 7, SetKind::Universal).unwrap();
        let raw = tempfile::tempdir().unwrap();
        let pre = tempfile::tempdir().unwrap();
        write_split(raw.path(), &split).unwrap();
        preprocess_dir(raw.path(), pre.path(), &setup.preprocess).unwrap();
        let e = Embedder::new(&EmbedConfig::default()).unwrap();
        let (set, index) = load_prepared(pre.path(), &setup.proposal, &e).unwrap();
        let (mem, visible, hidden) = prepare_split(&setup, &split, &e).unwrap();
        // Manifests carry six decimals, so boxes and what is measured from
        // them agree only up to that rounding.
        assert_eq!(set.volumes, mem.volumes);
        let close = |a: &[Annotation], b: &[Annotation]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    let (p, q) = (x.bbox, y.bbox);
                    x.id == y.id
                        && p.z == q.z
                        && [(p.x1, q.x1), (p.y1, q.y1), (p.x2, q.x2), (p.y2, q.y2)]
                            .iter()
                            .all(|(u, v)| (u - v).abs() < 1e-5)
                })
        };
        assert!(close(&set.ground_truth, &mem.ground_truth));
        assert!(set.boxes.keys().eq(mem.boxes.keys()));
        let worst = set
            .boxes
            .values()
            .zip(mem.boxes.values())
            .flat_map(|(a, b)| a.features.iter().zip(&b.features).chain(a.embedding.iter().zip(&b.embedding)))
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "{worst}");
        assert!(close(&index.annotations, &visible));
        assert!(close(&index.hidden, &hidden));
    }

    #[test]
    fn slice_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        let s = vec![SliceKey::new("a", 3), SliceKey::new("b", 0)];
        write_slices(&p, &s).unwrap();
        assert_eq!(read_slices(&p).unwrap(), s);
    }

    #[test]
    fn missing_directory_reports_the_path() {
        let err = read_index(Path::new("/nonexistent/set")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("volumes.txt"));
    }
}
