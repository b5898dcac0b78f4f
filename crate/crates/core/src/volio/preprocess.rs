//! Intensity windowing, in-plane and through-plane resampling, and border clipping.
//!
//! In-plane coordinates use the pixel-edge convention (pixel `i` spans `[i, i+1)`),
//! so resampling scales box corners linearly. Through-plane resampling is index
//! aligned: output slice `k` samples input slice position `k * ratio`.

use serde::{Deserialize, Serialize};

use super::volume::{Grid, LabelVolume, VolumeMeta, VoxelVolume, WindowedVolume, HU_MAX, HU_MIN};
use crate::error::{Error, Result};
use crate::geometry::Box2D;

pub const TARGET_XY_MM: f64 = 0.8;
pub const TARGET_Z_MM: f64 = 2.0;
pub const DEFAULT_BORDER_THRESHOLD: f32 = 5.0;
const MIN_XY_PIXELS: usize = 8;

/// Maps a Hounsfield value into [0, 255] with the -1024..3071 window.
#[inline]
pub fn window_hu(hu: f64) -> f64 {
    let hu = hu.clamp(HU_MIN as f64, HU_MAX as f64);
    (hu - HU_MIN as f64) / (HU_MAX as f64 - HU_MIN as f64) * 255.0
}

pub fn window_rescale(v: &VoxelVolume) -> WindowedVolume {
    Grid {
        meta: v.meta.clone(),
        voxels: v.voxels.iter().map(|&h| window_hu(h as f64) as f32).collect(),
    }
}

/// In-plane affine map `x' = scale_x * x + offset_x`, `y' = scale_y * y + offset_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneTransform {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl PlaneTransform {
    pub const IDENTITY: PlaneTransform = PlaneTransform {
        scale_x: 1.0,
        scale_y: 1.0,
        offset_x: 0.0,
        offset_y: 0.0,
    };

    pub fn scale(scale_x: f64, scale_y: f64) -> Self {
        PlaneTransform {
            scale_x,
            scale_y,
            ..Self::IDENTITY
        }
    }

    pub fn shift(dx: f64, dy: f64) -> Self {
        PlaneTransform {
            offset_x: dx,
            offset_y: dy,
            ..Self::IDENTITY
        }
    }

    /// `self` applied first, then `next`.
    pub fn then(&self, next: &PlaneTransform) -> PlaneTransform {
        PlaneTransform {
            scale_x: next.scale_x * self.scale_x,
            scale_y: next.scale_y * self.scale_y,
            offset_x: next.scale_x * self.offset_x + next.offset_x,
            offset_y: next.scale_y * self.offset_y + next.offset_y,
        }
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.scale_x * x + self.offset_x,
            self.scale_y * y + self.offset_y,
        )
    }

    pub fn apply(&self, b: &Box2D) -> Box2D {
        let (x1, y1) = self.apply_point(b.x1, b.y1);
        let (x2, y2) = self.apply_point(b.x2, b.y2);
        Box2D {
            z: b.z,
            x1,
            y1,
            x2,
            y2,
        }
    }
}

/// Through-plane index map: output slice `k` sits at input slice position `k * ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMap {
    pub ratio: f64,
}

impl SliceMap {
    pub const IDENTITY: SliceMap = SliceMap { ratio: 1.0 };

    /// Nearest output slice for an input slice index; exact ties go to the lower slice.
    pub fn map_index(&self, z: u32) -> u32 {
        let pos = z as f64 / self.ratio;
        let lower = pos.floor();
        let frac = pos - lower;
        let k = if frac > 0.5 + 1e-9 { lower + 1.0 } else { lower };
        k as u32
    }
}

/// Bilinear sampling position in source index space for output pixel `p`.
#[inline]
fn source_coord(p: usize, scale: f64, n_src: usize) -> (usize, usize, f64) {
    let u = (p as f64 + 0.5) / scale - 0.5;
    let u = u.clamp(0.0, (n_src - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n_src - 1);
    (i0, i1, u - i0 as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

fn xy_output_dims(meta: &VolumeMeta, target_mm: f64) -> Result<(usize, usize, f64, f64)> {
    let scale_x = meta.spacing[0] / target_mm;
    let scale_y = meta.spacing[1] / target_mm;
    let nx = (meta.dims[0] as f64 * scale_x).round() as usize;
    let ny = (meta.dims[1] as f64 * scale_y).round() as usize;
    if nx < MIN_XY_PIXELS || ny < MIN_XY_PIXELS {
        return Err(Error::TooSmallVolume(format!(
            "volume {} would resample to {}x{} pixels (minimum {})",
            meta.volume_id, nx, ny, MIN_XY_PIXELS
        )));
    }
    Ok((nx, ny, scale_x, scale_y))
}

/// Bilinear in-plane resampling to `target_mm` pixels.
pub fn resample_xy(v: &WindowedVolume, target_mm: f64) -> Result<(WindowedVolume, PlaneTransform)> {
    v.meta.validate()?;
    if v.meta.spacing[0] == target_mm && v.meta.spacing[1] == target_mm {
        xy_output_dims(&v.meta, target_mm)?;
        return Ok((v.clone(), PlaneTransform::IDENTITY));
    }
    let (nx, ny, scale_x, scale_y) = xy_output_dims(&v.meta, target_mm)?;
    let (sx_n, sy_n, nz) = (v.nx(), v.ny(), v.nz());
    let xs: Vec<_> = (0..nx).map(|p| source_coord(p, scale_x, sx_n)).collect();
    let ys: Vec<_> = (0..ny).map(|q| source_coord(q, scale_y, sy_n)).collect();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let a = lerp(v.get(x0, y0, z) as f64, v.get(x1, y0, z) as f64, tx);
                let b = lerp(v.get(x0, y1, z) as f64, v.get(x1, y1, z) as f64, tx);
                out.push(lerp(a, b, ty) as f32);
            }
        }
    }
    let meta = VolumeMeta {
        dims: [nx, ny, nz],
        spacing: [target_mm, target_mm, v.meta.spacing[2]],
        ..v.meta.clone()
    };
    Ok((Grid::new(meta, out)?, PlaneTransform::scale(scale_x, scale_y)))
}

fn z_output_len(nz: usize, ratio: f64) -> usize {
    (((nz - 1) as f64) / ratio + 1e-9).floor() as usize + 1
}

/// Linear through-plane resampling to `target_mm` slice spacing.
pub fn resample_z(v: &WindowedVolume, target_mm: f64) -> Result<(WindowedVolume, SliceMap)> {
    v.meta.validate()?;
    if v.meta.spacing[2] == target_mm {
        return Ok((v.clone(), SliceMap::IDENTITY));
    }
    let ratio = target_mm / v.meta.spacing[2];
    let nz_out = z_output_len(v.nz(), ratio);
    let n = v.meta.slice_len();
    let mut out = Vec::with_capacity(n * nz_out);
    for k in 0..nz_out {
        let pos = (k as f64 * ratio).min((v.nz() - 1) as f64);
        let z0 = pos.floor() as usize;
        let z1 = (z0 + 1).min(v.nz() - 1);
        let t = pos - z0 as f64;
        let (s0, s1) = (v.slice(z0), v.slice(z1));
        out.extend(
            s0.iter()
                .zip(s1)
                .map(|(&a, &b)| lerp(a as f64, b as f64, t) as f32),
        );
    }
    let meta = VolumeMeta {
        dims: [v.nx(), v.ny(), nz_out],
        spacing: [v.meta.spacing[0], v.meta.spacing[1], target_mm],
        ..v.meta.clone()
    };
    Ok((Grid::new(meta, out)?, SliceMap { ratio }))
}

/// Removes leading and trailing rows/columns whose maximum over all slices is
/// below `threshold`. Returns the cropped volume and the `(x0, y0)` crop offsets.
pub fn clip_black_borders(
    v: &WindowedVolume,
    threshold: f32,
) -> Result<(WindowedVolume, (usize, usize))> {
    let (nx, ny, nz) = (v.nx(), v.ny(), v.nz());
    let mut col_max = vec![f32::NEG_INFINITY; nx];
    let mut row_max = vec![f32::NEG_INFINITY; ny];
    for z in 0..nz {
        let s = v.slice(z);
        for y in 0..ny {
            let row = &s[y * nx..(y + 1) * nx];
            for (x, &val) in row.iter().enumerate() {
                if val > col_max[x] {
                    col_max[x] = val;
                }
                if val > row_max[y] {
                    row_max[y] = val;
                }
            }
        }
    }
    let keep = |m: &[f32]| -> Option<(usize, usize)> {
        let first = m.iter().position(|&x| x >= threshold)?;
        let last = m.iter().rposition(|&x| x >= threshold)?;
        Some((first, last))
    };
    let (Some((x0, x1)), Some((y0, y1))) = (keep(&col_max), keep(&row_max)) else {
        return Err(Error::EmptyVolume(v.meta.volume_id.clone()));
    };
    if x0 == 0 && y0 == 0 && x1 == nx - 1 && y1 == ny - 1 {
        return Ok((v.clone(), (0, 0)));
    }
    Ok((crop_xy(v, x0, y0, x1 - x0 + 1, y1 - y0 + 1)?, (x0, y0)))
}

pub fn crop_xy<T: Copy>(v: &Grid<T>, x0: usize, y0: usize, w: usize, h: usize) -> Result<Grid<T>> {
    if x0 + w > v.nx() || y0 + h > v.ny() || w == 0 || h == 0 {
        return Err(Error::InvalidInput(format!(
            "crop {}x{} at ({}, {}) exceeds volume {}",
            w, h, x0, y0, v.meta.volume_id
        )));
    }
    let mut out = Vec::with_capacity(w * h * v.nz());
    for z in 0..v.nz() {
        for y in y0..y0 + h {
            let start = v.index(x0, y, z);
            out.extend_from_slice(&v.voxels[start..start + w]);
        }
    }
    let meta = VolumeMeta {
        dims: [w, h, v.nz()],
        ..v.meta.clone()
    };
    Grid::new(meta, out)
}

/// Everything needed to carry boxes and label maps through preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeTransform {
    pub plane: PlaneTransform,
    pub slices: SliceMap,
    pub crop: (usize, usize),
    pub out_dims: [usize; 3],
}

impl VolumeTransform {
    pub fn map_box(&self, b: &Box2D) -> Box2D {
        let mut out = self.plane.apply(b);
        out.z = self.slices.map_index(b.z).min(self.out_dims[2] as u32 - 1);
        out
    }

    /// Nearest-neighbour carry of a label map onto the preprocessed grid.
    pub fn map_labels(&self, labels: &LabelVolume) -> Result<LabelVolume> {
        let [nx, ny, nz] = self.out_dims;
        let (cx, cy) = self.crop;
        let mut out = Vec::with_capacity(nx * ny * nz);
        let src = &labels.meta.dims;
        let nearest = |p: usize, offset: usize, scale: f64, n: usize| -> usize {
            let u = ((p + offset) as f64 + 0.5) / scale;
            (u.floor() as usize).min(n - 1)
        };
        for k in 0..nz {
            let zs = ((k as f64 * self.slices.ratio).round() as usize).min(src[2] - 1);
            for q in 0..ny {
                let ys = nearest(q, cy, self.plane.scale_y, src[1]);
                for p in 0..nx {
                    let xs = nearest(p, cx, self.plane.scale_x, src[0]);
                    out.push(labels.get(xs, ys, zs));
                }
            }
        }
        let meta = VolumeMeta {
            dims: self.out_dims,
            spacing: [
                labels.meta.spacing[0] / self.plane.scale_x,
                labels.meta.spacing[1] / self.plane.scale_y,
                labels.meta.spacing[2] * self.slices.ratio,
            ],
            ..labels.meta.clone()
        };
        Grid::new(meta, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_xy_mm: f64,
    pub target_z_mm: f64,
    pub border_threshold: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_xy_mm: TARGET_XY_MM,
            target_z_mm: TARGET_Z_MM,
            border_threshold: DEFAULT_BORDER_THRESHOLD,
        }
    }
}

/// Window, resample to the canonical grid, then clip black borders.
pub fn preprocess(
    v: &VoxelVolume,
    cfg: &PreprocessConfig,
) -> Result<(WindowedVolume, VolumeTransform)> {
    let w = window_rescale(v);
    let (w, plane) = resample_xy(&w, cfg.target_xy_mm)?;
    let (w, slices) = resample_z(&w, cfg.target_z_mm)?;
    let (w, crop) = clip_black_borders(&w, cfg.border_threshold)?;
    let plane = plane.then(&PlaneTransform::shift(-(crop.0 as f64), -(crop.1 as f64)));
    let out_dims = w.meta.dims;
    Ok((
        w,
        VolumeTransform {
            plane,
            slices,
            crop,
            out_dims,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Owner;
    use proptest::prelude::*;

    fn meta(dims: [usize; 3], spacing: [f64; 3]) -> VolumeMeta {
        VolumeMeta {
            dims,
            spacing,
            volume_id: "v".into(),
            owner: Owner::new("p", "s", "r"),
        }
    }

    fn windowed(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f32) -> WindowedVolume {
        let mut vox = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    vox.push(f(x, y, z));
                }
            }
        }
        Grid::new(meta(dims, spacing), vox).unwrap()
    }

    #[test]
    fn window_endpoints() {
        assert_eq!(window_hu(-1024.0), 0.0);
        assert_eq!(window_hu(3071.0), 255.0);
        assert!((window_hu(0.0) - 63.766).abs() < 1e-3);
        assert_eq!(window_hu(-5000.0), 0.0);
    }

    proptest! {
        #[test]
        fn window_is_affine(a in -1024i32..3071, b in -1024i32..3071) {
            prop_assume!(a != b);
            let (lo, hi) = (a.min(b) as f64, a.max(b) as f64);
            let slope = (window_hu(hi) - window_hu(lo)) / (hi - lo);
            prop_assert!((slope - 255.0 / 4095.0).abs() < 1e-9);
        }
    }

    #[test]
    fn xy_identity_is_bit_identical() {
        let v = windowed([10, 9, 3], [0.8, 0.8, 2.0], |x, y, z| (x * 7 + y * 3 + z) as f32 * 0.37);
        let (out, t) = resample_xy(&v, 0.8).unwrap();
        assert_eq!(out, v);
        assert_eq!(t, PlaneTransform::IDENTITY);
    }

    #[test]
    fn xy_upsample_dims_and_scale() {
        let v = windowed([100, 50, 2], [1.6, 1.6, 2.0], |_, _, _| 1.0);
        let (out, t) = resample_xy(&v, 0.8).unwrap();
        assert_eq!(out.meta.dims, [200, 100, 2]);
        assert_eq!(t.scale_x, 2.0);
        assert_eq!(out.meta.spacing[0], 0.8);
    }

    #[test]
    fn xy_constant_stays_constant() {
        let v = windowed([13, 11, 2], [1.1, 0.6, 2.0], |_, _, _| 42.5);
        let (out, _) = resample_xy(&v, 0.8).unwrap();
        assert!(out.voxels.iter().all(|&x| x == 42.5));
    }

    #[test]
    fn xy_too_small() {
        let v = windowed([10, 10, 1], [0.4, 0.4, 2.0], |_, _, _| 0.0);
        assert!(matches!(resample_xy(&v, 0.8), Err(Error::TooSmallVolume(_))));
    }

    #[test]
    fn ramp_survives_down_then_up() {
        let v = windowed([64, 64, 1], [0.8, 0.8, 2.0], |x, y, _| (x as f32) * 0.5 + (y as f32) * 0.25);
        let (d, _) = resample_xy(&v, 1.6).unwrap();
        assert_eq!(d.meta.dims, [32, 32, 1]);
        let (u, _) = resample_xy(&d, 0.8).unwrap();
        assert_eq!(u.meta.dims, [64, 64, 1]);
        for y in 2..62 {
            for x in 2..62 {
                assert!((u.get(x, y, 0) - v.get(x, y, 0)).abs() < 1e-6, "({x},{y})");
            }
        }
    }

    #[test]
    fn z_examples() {
        let v = windowed([8, 8, 4], [0.8, 0.8, 2.0], |x, _, z| (x + z) as f32);
        let (out, m) = resample_z(&v, 2.0).unwrap();
        assert_eq!(out, v);
        assert_eq!(m, SliceMap::IDENTITY);

        let v = windowed([8, 8, 21], [0.8, 0.8, 1.0], |_, _, z| z as f32);
        let (out, m) = resample_z(&v, 2.0).unwrap();
        assert_eq!(out.nz(), 11);
        for k in 0..11 {
            assert_eq!(out.get(3, 3, k), (2 * k) as f32);
        }
        assert_eq!(m.map_index(4), 2);
        assert_eq!(m.map_index(5), 2, "ties round down");
        assert_eq!(m.map_index(6), 3);

        let v = windowed([8, 8, 2], [0.8, 0.8, 4.0], |_, _, z| (z * 100) as f32);
        let (out, _) = resample_z(&v, 2.0).unwrap();
        assert_eq!(out.nz(), 3);
        assert_eq!(out.get(0, 0, 1), 50.0);
    }

    #[test]
    fn clip_examples() {
        let v = windowed([12, 12, 2], [0.8, 0.8, 2.0], |_, _, _| 100.0);
        let (out, off) = clip_black_borders(&v, 5.0).unwrap();
        assert_eq!(out, v);
        assert_eq!(off, (0, 0));

        let framed = windowed([40, 36, 3], [0.8, 0.8, 2.0], |x, y, _| {
            if (10..30).contains(&x) && (10..26).contains(&y) { 80.0 } else { 0.0 }
        });
        let (out, off) = clip_black_borders(&framed, 5.0).unwrap();
        assert_eq!(off, (10, 10));
        assert_eq!(out.meta.dims, [20, 16, 3]);

        let zero = windowed([9, 9, 2], [0.8, 0.8, 2.0], |_, _, _| 0.0);
        assert!(matches!(clip_black_borders(&zero, 5.0), Err(Error::EmptyVolume(_))));
    }

    #[test]
    fn transform_composition_carries_boxes() {
        let t = PlaneTransform::scale(2.0, 2.0).then(&PlaneTransform::shift(-10.0, -4.0));
        let b = Box2D::new(3, 10.0, 10.0, 20.0, 20.0).unwrap();
        let m = t.apply(&b);
        assert_eq!((m.x1, m.y1, m.x2, m.y2), (10.0, 16.0, 30.0, 36.0));
    }

    #[test]
    fn full_preprocess_maps_labels_consistently() {
        let mut vox = vec![HU_MIN; 20 * 20 * 4];
        for z in 0..4 {
            for y in 5..15 {
                for x in 4..16 {
                    vox[x + 20 * (y + 20 * z)] = 40;
                }
            }
        }
        let v = Grid::new(meta([20, 20, 4], [0.8, 0.8, 2.0]), vox).unwrap();
        let labels: LabelVolume = Grid {
            meta: v.meta.clone(),
            voxels: v.voxels.iter().map(|&h| u8::from(h > -1000)).collect(),
        };
        let (w, t) = preprocess(&v, &PreprocessConfig::default()).unwrap();
        assert_eq!(t.crop, (4, 5));
        assert_eq!(w.meta.dims, [12, 10, 4]);
        let l = t.map_labels(&labels).unwrap();
        assert!(l.voxels.iter().all(|&c| c == 1));
    }
}
