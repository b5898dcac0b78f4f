//! Volume container: a `key=value` sidecar (`<id>.meta`) plus a raw voxel file.
//!
//! Raw files are little-endian, x-fastest, then y, then z:
//! `<id>.raw` holds signed 16-bit Hounsfield units, `<id>.f32` windowed
//! 32-bit floats, and `<id>.lbl` one organ-region byte per voxel.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::volume::{Grid, LabelVolume, VolumeMeta, VoxelVolume, WindowedVolume};
use crate::domain::Owner;
use crate::error::{Error, Result};

const META_KEYS: [&str; 10] = [
    "nx", "ny", "nz", "sx", "sy", "sz", "volume_id", "patient_id", "study_id", "series_id",
];

pub fn meta_path(dir: &Path, volume_id: &str) -> PathBuf {
    dir.join(format!("{volume_id}.meta"))
}

pub fn render_meta(meta: &VolumeMeta) -> String {
    let [nx, ny, nz] = meta.dims;
    let [sx, sy, sz] = meta.spacing;
    format!(
        "nx={nx}\nny={ny}\nnz={nz}\nsx={sx:.6}\nsy={sy:.6}\nsz={sz:.6}\nvolume_id={}\npatient_id={}\nstudy_id={}\nseries_id={}\n",
        meta.volume_id, meta.owner.patient_id, meta.owner.study_id, meta.owner.series_id
    )
}

pub fn parse_meta(text: &str, path: &Path) -> Result<VolumeMeta> {
    let mut values: [Option<String>; 10] = Default::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("volume sidecar", path, i + 1, "expected key=value"))?;
        let slot = META_KEYS
            .iter()
            .position(|&key| key == k.trim())
            .ok_or_else(|| Error::format("volume sidecar", path, i + 1, format!("unknown key '{k}'")))?;
        values[slot] = Some(v.trim().to_string());
    }
    let get = |i: usize| -> Result<&str> {
        values[i]
            .as_deref()
            .ok_or_else(|| Error::format("volume sidecar", path, 0, format!("missing key '{}'", META_KEYS[i])))
    };
    let int = |i: usize| -> Result<usize> {
        get(i)?
            .parse()
            .map_err(|_| Error::format("volume sidecar", path, 0, format!("bad integer for '{}'", META_KEYS[i])))
    };
    let float = |i: usize| -> Result<f64> {
        get(i)?
            .parse()
            .map_err(|_| Error::format("volume sidecar", path, 0, format!("bad number for '{}'", META_KEYS[i])))
    };
    let meta = VolumeMeta {
        dims: [int(0)?, int(1)?, int(2)?],
        spacing: [float(3)?, float(4)?, float(5)?],
        volume_id: get(6)?.to_string(),
        owner: Owner::new(get(7)?, get(8)?, get(9)?),
    };
    meta.validate()?;
    Ok(meta)
}

pub fn read_meta(dir: &Path, volume_id: &str) -> Result<VolumeMeta> {
    let path = meta_path(dir, volume_id);
    let text = read_text(&path)?;
    parse_meta(&text, &path)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Voxel element with a fixed little-endian encoding.
pub trait RawVoxel: Copy {
    const EXT: &'static str;
    const WIDTH: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl RawVoxel for i16 {
    const EXT: &'static str = "raw";
    const WIDTH: usize = 2;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        i16::from_le_bytes([b[0], b[1]])
    }
}

impl RawVoxel for f32 {
    const EXT: &'static str = "f32";
    const WIDTH: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl RawVoxel for u8 {
    const EXT: &'static str = "lbl";
    const WIDTH: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn take(b: &[u8]) -> Self {
        b[0]
    }
}

pub fn write_grid<T: RawVoxel>(dir: &Path, g: &Grid<T>) -> Result<()> {
    write_file(&meta_path(dir, &g.meta.volume_id), render_meta(&g.meta).as_bytes())?;
    let mut bytes = Vec::with_capacity(g.voxels.len() * T::WIDTH);
    for &v in &g.voxels {
        v.put(&mut bytes);
    }
    write_file(&dir.join(format!("{}.{}", g.meta.volume_id, T::EXT)), &bytes)
}

pub fn read_grid<T: RawVoxel>(dir: &Path, volume_id: &str) -> Result<Grid<T>> {
    let meta = read_meta(dir, volume_id)?;
    let path = dir.join(format!("{volume_id}.{}", T::EXT));
    let bytes = read_bytes(&path)?;
    if bytes.len() != meta.voxel_count() * T::WIDTH {
        return Err(Error::format(
            "voxel file",
            path,
            0,
            format!(
                "expected {} bytes for {:?}, found {}",
                meta.voxel_count() * T::WIDTH,
                meta.dims,
                bytes.len()
            ),
        ));
    }
    let voxels = bytes.chunks_exact(T::WIDTH).map(T::take).collect();
    Grid::new(meta, voxels)
}

/// Reads a HU volume and clamps it into the 12-bit window.
pub fn read_volume(dir: &Path, volume_id: &str) -> Result<VoxelVolume> {
    let mut v: VoxelVolume = read_grid(dir, volume_id)?;
    let clamped = v.clamp_hu();
    if clamped > 0 {
        log::warn!("volume {volume_id}: clamped {clamped} voxels into [-1024, 3071] HU");
    }
    Ok(v)
}

pub fn write_volume(dir: &Path, v: &VoxelVolume) -> Result<()> {
    write_grid(dir, v)
}

pub fn read_windowed(dir: &Path, volume_id: &str) -> Result<WindowedVolume> {
    read_grid(dir, volume_id)
}

pub fn read_labels(dir: &Path, volume_id: &str) -> Result<LabelVolume> {
    read_grid(dir, volume_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> VolumeMeta {
        VolumeMeta {
            dims: [3, 2, 2],
            spacing: [0.8, 0.8, 2.0],
            volume_id: "vol-1".into(),
            owner: Owner::new("p1", "s1", "r1"),
        }
    }

    #[test]
    fn volume_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let vox: Vec<i16> = vec![-1024, 0, 1, 2, 3, 3071, 10, 11, 12, 13, 14, -5];
        let v = Grid::new(meta(), vox.clone()).unwrap();
        write_volume(dir.path(), &v).unwrap();
        let raw = fs::read(dir.path().join("vol-1.raw")).unwrap();
        assert_eq!(&raw[..4], &[0x00, 0xfc, 0x00, 0x00]);
        let back = read_volume(dir.path(), "vol-1").unwrap();
        assert_eq!(back, v);
        assert_eq!(back.get(2, 1, 0), 3071);
        let text = fs::read_to_string(dir.path().join("vol-1.meta")).unwrap();
        assert!(text.starts_with("nx=3\nny=2\nnz=2\nsx=0.800000\n"));
    }

    #[test]
    fn out_of_range_hu_is_clamped_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let v = Grid::new(meta(), vec![-3000; 12]).unwrap();
        write_volume(dir.path(), &v).unwrap();
        let back = read_volume(dir.path(), "vol-1").unwrap();
        assert!(back.voxels.iter().all(|&h| h == -1024));
    }

    #[test]
    fn missing_and_malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_volume(dir.path(), "nope"), Err(Error::MissingInput(_))));
        fs::write(dir.path().join("bad.meta"), "nx=3\nbogus\n").unwrap();
        assert!(matches!(read_meta(dir.path(), "bad"), Err(Error::Format { line: 2, .. })));
        let v = Grid::new(meta(), vec![0i16; 12]).unwrap();
        write_volume(dir.path(), &v).unwrap();
        fs::write(dir.path().join("vol-1.raw"), [0u8; 5]).unwrap();
        assert!(read_volume(dir.path(), "vol-1").is_err());
    }
}
