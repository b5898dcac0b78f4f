//! Blob proposals: thresholded deviations from a robust local background,
//! grouped into 8-connected components slice by slice.
//!
//! Detection runs on a centre-weighted mean of the 9-slice neighbourhood of
//! each slice, lightly smoothed in-plane, against a ring-median background.
//! Pixels over lung-like background
//! use the lung threshold and positive polarity only; everything else uses
//! the soft-tissue threshold with both polarities.

use serde::{Deserialize, Serialize};

use super::embed::Embedder;
use super::Proposal;
use crate::error::{Error, Result};
use crate::geometry::Box2D;
use crate::volio::WindowedVolume;

/// Windowed units per Hounsfield unit.
const UNITS_PER_HU: f64 = 255.0 / 4095.0;
const HIST_BINS: usize = 16;
/// Half-width of the relative-intensity histogram, in windowed units.
const HIST_HALF_RANGE: f64 = 16.0;
const RING: usize = 3;

/// Length of the per-proposal feature vector.
pub const FEATURE_DIM: usize = 29;

pub fn hu_to_units(hu: f64) -> f64 {
    (hu + 1024.0) * UNITS_PER_HU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    /// Slices averaged for detection (centred on the target slice).
    pub context_slices: usize,
    /// Radii (pixels) of the rings sampled for the local background.
    pub background_radii: Vec<f64>,
    /// Samples per ring.
    pub background_samples: usize,
    /// Pixels darker than this are air and never part of a proposal.
    pub air_hu: f64,
    /// Background darker than this is treated as lung parenchyma.
    pub lung_background_hu: f64,
    pub lung_threshold_hu: f64,
    pub soft_threshold_hu: f64,
    pub min_area: usize,
    pub max_area: usize,
    /// Minimum share of the bounding box covered by the component.
    pub min_fill: f64,
    /// Maximum ratio of the longer to the shorter box side.
    pub max_aspect: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            context_slices: 9,
            background_radii: vec![9.0, 12.0],
            background_samples: 24,
            air_hu: -950.0,
            lung_background_hu: -400.0,
            lung_threshold_hu: 90.0,
            soft_threshold_hu: 10.0,
            min_area: 4,
            max_area: 400,
            min_fill: 0.4,
            max_aspect: 3.0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_slices == 0 || self.context_slices % 2 == 0 {
            return Err(Error::InvalidInput("context_slices must be odd and positive".into()));
        }
        if self.background_samples == 0 || self.background_radii.iter().any(|&r| !(r >= 1.0)) {
            return Err(Error::InvalidInput("background rings need radius >= 1 and samples > 0".into()));
        }
        if !(self.lung_threshold_hu > 0.0 && self.soft_threshold_hu > 0.0) {
            return Err(Error::InvalidInput("proposal thresholds must be positive".into()));
        }
        if self.min_area == 0 || self.min_area > self.max_area {
            return Err(Error::InvalidInput("need 0 < min_area <= max_area".into()));
        }
        Ok(())
    }
}

/// Working images for one slice.
struct SliceMaps {
    nx: usize,
    ny: usize,
    smooth: Vec<f64>,
    background: Vec<f64>,
}

/// Centre-weighted mean of the slice neighbourhood: weight `2^-|k|` at offset `k`.
fn context_mean(vol: &WindowedVolume, z: usize, k: usize) -> Vec<f64> {
    let half = (k / 2) as i64;
    let n = vol.meta.slice_len();
    let mut acc = vec![0.0; n];
    let mut wsum = 0.0;
    for dz in -half..=half {
        let s = z as i64 + dz;
        if s < 0 || s >= vol.nz() as i64 {
            continue;
        }
        let w = 0.5f64.powi(dz.abs() as i32);
        wsum += w;
        for (a, &v) in acc.iter_mut().zip(vol.slice(s as usize)) {
            *a += w * v as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= wsum);
    acc
}

fn box3x3(img: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..ny {
        for x in 0..nx {
            let (mut s, mut c) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                    s += img[xx + nx * yy];
                    c += 1.0;
                }
            }
            out[x + nx * y] = s / c;
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    let m = v.len() / 2;
    let (_, hi, _) = v.select_nth_unstable_by(m, |a, b| a.total_cmp(b));
    let upper = *hi;
    if v.len() % 2 == 1 {
        upper
    } else {
        let lower = v[..m].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Offsets of the background sampling rings.
fn ring_offsets(radii: &[f64], samples: usize) -> Vec<(i64, i64)> {
    let mut out: Vec<(i64, i64)> = Vec::new();
    for (k, &r) in radii.iter().enumerate() {
        let phase = k as f64 * 0.5;
        for a in 0..samples {
            let t = (a as f64 + phase) / samples as f64 * std::f64::consts::TAU;
            let o = ((r * t.cos()).round() as i64, (r * t.sin()).round() as i64);
            if !out.contains(&o) {
                out.push(o);
            }
        }
    }
    out
}

/// Ring-median background: the median of tissue (non-air) samples on rings
/// wider than any lesion. Samples of the pixel's own class (lung-like or
/// soft) are preferred so the estimate does not bleed across organ
/// boundaries; near a straight boundary most of a ring stays on the pixel's
/// side anyway. NaN where too few tissue samples exist.
fn background(img: &[f64], class_img: &[f64], nx: usize, ny: usize, cfg: &ProposalConfig) -> Vec<f64> {
    let air = hu_to_units(cfg.air_hu);
    let lung = hu_to_units(cfg.lung_background_hu);
    let offsets = ring_offsets(&cfg.background_radii, cfg.background_samples);
    let min_valid = (offsets.len() / 3).max(1);
    let mut out = vec![f64::NAN; nx * ny];
    let mut own = Vec::with_capacity(offsets.len());
    let mut all = Vec::with_capacity(offsets.len());
    for y in 0..ny as i64 {
        for x in 0..nx as i64 {
            let soft = class_img[x as usize + nx * y as usize] >= lung;
            own.clear();
            all.clear();
            for &(dx, dy) in &offsets {
                let (xx, yy) = (x + dx, y + dy);
                if xx < 0 || yy < 0 || xx >= nx as i64 || yy >= ny as i64 {
                    continue;
                }
                let v = img[xx as usize + nx * yy as usize];
                if v >= air {
                    all.push(v);
                    if (v >= lung) == soft {
                        own.push(v);
                    }
                }
            }
            let i = x as usize + nx * y as usize;
            if own.len() >= min_valid {
                out[i] = median(&mut own);
            } else if all.len() >= min_valid {
                out[i] = median(&mut all);
            }
        }
    }
    out
}

fn slice_maps(vol: &WindowedVolume, z: usize, cfg: &ProposalConfig) -> SliceMaps {
    let (nx, ny) = (vol.nx(), vol.ny());
    let mean = context_mean(vol, z, cfg.context_slices);
    let smooth = box3x3(&mean, nx, ny);
    let background = background(&mean, &smooth, nx, ny, cfg);
    SliceMaps {
        nx,
        ny,
        smooth,
        background,
    }
}

/// Signed candidate mask: +1 bright, -1 dark, 0 neither.
fn candidate_mask(m: &SliceMaps, cfg: &ProposalConfig) -> Vec<i8> {
    let air = hu_to_units(cfg.air_hu);
    let lung_bg = hu_to_units(cfg.lung_background_hu);
    let t_lung = cfg.lung_threshold_hu * UNITS_PER_HU;
    let t_soft = cfg.soft_threshold_hu * UNITS_PER_HU;
    m.smooth
        .iter()
        .zip(&m.background)
        .map(|(&s, &b)| {
            if s < air || !b.is_finite() {
                return 0;
            }
            let d = s - b;
            if b < lung_bg {
                i8::from(d > t_lung)
            } else if d > t_soft {
                1
            } else if d < -t_soft && s > lung_bg {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// 8-connected components of equal non-zero sign, in raster order of their first pixel.
fn components(mask: &[i8], nx: usize, ny: usize) -> Vec<(i8, Vec<usize>)> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        let sign = mask[start];
        let mut pix = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            pix.push(p);
            let (x, y) = (p % nx, p / nx);
            for yy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                    let q = xx + nx * yy;
                    if !seen[q] && mask[q] == sign {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push((sign, pix));
    }
    out
}

/// Pixel indices whose centres fall inside `b` (at least the nearest pixel),
/// clipped to the slice.
fn pixels_in(b: &Box2D, nx: usize, ny: usize) -> (usize, usize, usize, usize) {
    let clampc = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let mut x0 = clampc((b.x1 - 0.5).ceil(), nx);
    let mut x1 = clampc((b.x2 - 0.5).floor(), nx);
    let mut y0 = clampc((b.y1 - 0.5).ceil(), ny);
    let mut y1 = clampc((b.y2 - 0.5).floor(), ny);
    if x0 > x1 {
        let c = clampc(0.5 * (b.x1 + b.x2), nx);
        (x0, x1) = (c, c);
    }
    if y0 > y1 {
        let c = clampc(0.5 * (b.y1 + b.y2), ny);
        (y0, y1) = (c, c);
    }
    (x0, x1, y0, y1)
}

/// Mean inside the pixel rectangle and mean of the surrounding ring.
fn inside_and_ring(img: &[f32], nx: usize, ny: usize, r: (usize, usize, usize, usize)) -> (f64, f64) {
    let (x0, x1, y0, y1) = r;
    let (rx0, ry0) = (x0.saturating_sub(RING), y0.saturating_sub(RING));
    let (rx1, ry1) = ((x1 + RING).min(nx - 1), (y1 + RING).min(ny - 1));
    let (mut si, mut ni, mut sr, mut nr) = (0.0, 0.0, 0.0, 0.0);
    for y in ry0..=ry1 {
        for x in rx0..=rx1 {
            let v = img[x + nx * y] as f64;
            if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                si += v;
                ni += 1.0;
            } else {
                sr += v;
                nr += 1.0;
            }
        }
    }
    let inside = si / ni;
    (inside, if nr > 0.0 { sr / nr } else { inside })
}

/// Signed log of a windowed-unit contrast, roughly in [-5, 5].
fn slog(units: f64) -> f64 {
    let hu = units / UNITS_PER_HU;
    hu.signum() * (1.0 + hu.abs() / 20.0).ln()
}

/// Feature vector for a box on the windowed volume. Layout:
/// `[0]` patch mean, `[1]` patch std, `[2..18]` histogram of patch intensity
/// relative to the ring, `[18]` log-area, `[19]` log aspect ratio,
/// `[20..23]` normalised centroid (x, y, z), `[23]` contrast against the ring,
/// `[24]` ring level, `[25..29]` contrast at slices z-2, z-1, z+1, z+2.
pub fn box_features(vol: &WindowedVolume, b: &Box2D) -> Result<Vec<f64>> {
    let (nx, ny, nz) = (vol.nx(), vol.ny(), vol.nz());
    let z = b.z as usize;
    if z >= nz {
        return Err(Error::Index(format!("slice {z} outside 0..{nz} of {}", vol.meta.volume_id)));
    }
    b.validate()?;
    let rect = pixels_in(b, nx, ny);
    let img = vol.slice(z);
    let (inside, ring) = inside_and_ring(img, nx, ny, rect);
    let (x0, x1, y0, y1) = rect;
    let mut hist = [0.0; HIST_BINS];
    let (mut ss, mut n) = (0.0, 0.0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let v = img[x + nx * y] as f64;
            ss += (v - inside).powi(2);
            n += 1.0;
            let rel = ((v - ring + HIST_HALF_RANGE) / (2.0 * HIST_HALF_RANGE) * HIST_BINS as f64)
                .floor()
                .clamp(0.0, (HIST_BINS - 1) as f64);
            hist[rel as usize] += 1.0;
        }
    }
    let std = (ss / n).sqrt();
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.push(inside / 255.0);
    f.push(std / 16.0);
    f.extend(hist.iter().map(|h| h / n));
    f.push((b.width() * b.height()).ln() / 5.0);
    f.push((b.width() / b.height()).ln());
    let (cx, cy) = b.center();
    f.push(cx / nx as f64);
    f.push(cy / ny as f64);
    f.push((z as f64 + 0.5) / nz as f64);
    f.push(slog(inside - ring));
    f.push(ring / 255.0);
    for dz in [-2i64, -1, 1, 2] {
        let zz = z as i64 + dz;
        if zz < 0 || zz >= nz as i64 {
            f.push(0.0);
        } else {
            let (i, r) = inside_and_ring(vol.slice(zz as usize), nx, ny, rect);
            f.push(slog(i - r));
        }
    }
    debug_assert_eq!(f.len(), FEATURE_DIM);
    Ok(f)
}

/// Raw proposal boxes with objectness for one slice, sorted by (x1, y1).
pub fn propose_boxes(vol: &WindowedVolume, z: usize, cfg: &ProposalConfig) -> Result<Vec<(Box2D, f64)>> {
    if z >= vol.nz() {
        return Err(Error::Index(format!(
            "slice {z} outside 0..{} of {}",
            vol.nz(),
            vol.meta.volume_id
        )));
    }
    let m = slice_maps(vol, z, cfg);
    let mask = candidate_mask(&m, cfg);
    let lung_bg = hu_to_units(cfg.lung_background_hu);
    let mut out = Vec::new();
    for (_, pix) in components(&mask, m.nx, m.ny) {
        if pix.len() < cfg.min_area || pix.len() > cfg.max_area {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut bg = 0.0;
        for &p in &pix {
            let (x, y) = (p % m.nx, p / m.nx);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            bg += m.background[p];
        }
        bg /= pix.len() as f64;
        let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
        if (pix.len() as f64) < cfg.min_fill * bw * bh || bw.max(bh) > cfg.max_aspect * bw.min(bh) {
            continue;
        }
        let b = Box2D {
            z: z as u32,
            x1: x0 as f64,
            y1: y0 as f64,
            x2: (x1 + 1) as f64,
            y2: (y1 + 1) as f64,
        };
        let (inside, ring) = {
            let (mut si, mut sr, mut nr) = (0.0, 0.0, 0.0);
            for &p in &pix {
                si += m.smooth[p];
            }
            let (rx0, ry0) = (x0.saturating_sub(RING), y0.saturating_sub(RING));
            let (rx1, ry1) = ((x1 + RING).min(m.nx - 1), (y1 + RING).min(m.ny - 1));
            for y in ry0..=ry1 {
                for x in rx0..=rx1 {
                    if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                        continue;
                    }
                    sr += m.smooth[x + m.nx * y];
                    nr += 1.0;
                }
            }
            let inside = si / pix.len() as f64;
            (inside, if nr > 0.0 { sr / nr } else { inside })
        };
        let t = if bg < lung_bg {
            cfg.lung_threshold_hu
        } else {
            cfg.soft_threshold_hu
        } * UNITS_PER_HU;
        let c = (inside - ring).abs();
        out.push((b, c / (c + t)));
    }
    out.sort_by(|a, b| a.0.x1.total_cmp(&b.0.x1).then(a.0.y1.total_cmp(&b.0.y1)));
    Ok(out)
}

/// Proposals with features and embeddings for one slice; scores left empty.
pub fn propose(vol: &WindowedVolume, z: usize, cfg: &ProposalConfig, embedder: &Embedder) -> Result<Vec<Proposal>> {
    propose_boxes(vol, z, cfg)?
        .into_iter()
        .enumerate()
        .map(|(k, (bbox, objectness))| {
            let features = box_features(vol, &bbox)?;
            let embedding = embedder.embed(&features)?;
            Ok(Proposal {
                id: format!("{}:z{}:p{}", vol.meta.volume_id, z, k),
                volume_id: vol.meta.volume_id.clone(),
                owner: vol.meta.owner.clone(),
                bbox,
                objectness,
                features,
                embedding,
                scoring: None,
            })
        })
        .collect()
}

/// Every slice of a volume, in (z, x1, y1) order.
pub fn propose_volume(vol: &WindowedVolume, cfg: &ProposalConfig, embedder: &Embedder) -> Result<Vec<Proposal>> {
    use rayon::prelude::*;
    let per_slice = (0..vol.nz())
        .into_par_iter()
        .map(|z| propose(vol, z, cfg, embedder))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_slice.into_iter().flatten().collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::domain::Owner;
    use crate::geometry::iou2d;
    use crate::volio::preprocess::window_hu;
    use crate::volio::{Grid, VolumeMeta};

    const N: usize = 64;
    const NZ: usize = 9;

    /// Uniform soft tissue with bright spheres `(cx, cy, cz, r)` in pixels.
    pub(crate) fn fixture(spheres: &[(f64, f64, f64, f64)]) -> WindowedVolume {
        let meta = VolumeMeta {
            dims: [N, N, NZ],
            spacing: [0.8, 0.8, 2.0],
            volume_id: "v".into(),
            owner: Owner::new("p", "s", "r"),
        };
        let mut v = Grid::filled(meta, window_hu(20.0) as f32).unwrap();
        for z in 0..NZ {
            for y in 0..N {
                for x in 0..N {
                    let inside = spheres.iter().any(|&(cx, cy, cz, r)| {
                        let dz = (z as f64 - cz) * 2.5;
                        (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) + dz * dz <= r * r
                    });
                    if inside {
                        let i = v.index(x, y, z);
                        v.voxels[i] = window_hu(140.0) as f32;
                    }
                }
            }
        }
        v
    }

    fn truth(cx: f64, cy: f64, r: f64) -> Box2D {
        Box2D::new(4, cx - r, cy - r, cx + r, cy + r).unwrap()
    }

    #[test]
    fn uniform_slice_has_no_proposals() {
        let v = fixture(&[]);
        for z in 0..NZ {
            assert!(propose_boxes(&v, z, &ProposalConfig::default()).unwrap().is_empty());
        }
    }

    #[test]
    fn single_lesion_gives_one_matching_box() {
        let v = fixture(&[(30.0, 34.0, 4.0, 5.0)]);
        let boxes = propose_boxes(&v, 4, &ProposalConfig::default()).unwrap();
        assert_eq!(boxes.len(), 1, "{boxes:?}");
        assert!(iou2d(&boxes[0].0, &truth(30.0, 34.0, 5.0)).unwrap() > 0.5);
        assert!(boxes[0].1 > 0.5 && boxes[0].1 < 1.0);
    }

    #[test]
    fn two_lesions_sorted_and_ids_assigned() {
        let v = fixture(&[(44.0, 20.0, 4.0, 4.0), (16.0, 40.0, 4.0, 4.0)]);
        let e = Embedder::new(&super::super::EmbedConfig::default()).unwrap();
        let props = propose(&v, 4, &ProposalConfig::default(), &e).unwrap();
        assert_eq!(props.len(), 2);
        assert!(props[0].bbox.x1 < props[1].bbox.x1);
        assert_eq!(props[0].id, "v:z4:p0");
        assert!(iou2d(&props[0].bbox, &truth(16.0, 40.0, 4.0)).unwrap() > 0.5);
        assert_eq!(props[0].features.len(), FEATURE_DIM);
    }

    #[test]
    fn slice_out_of_range_is_index_error() {
        let v = fixture(&[]);
        assert!(matches!(
            propose_boxes(&v, NZ, &ProposalConfig::default()),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn volume_output_is_deterministic_and_ordered() {
        let v = fixture(&[(44.0, 20.0, 3.0, 4.0), (16.0, 40.0, 5.0, 4.0)]);
        let e = Embedder::new(&super::super::EmbedConfig::default()).unwrap();
        let a = propose_volume(&v, &ProposalConfig::default(), &e).unwrap();
        assert_eq!(a, propose_volume(&v, &ProposalConfig::default(), &e).unwrap());
        assert!(a.windows(2).all(|w| w[0].bbox.z <= w[1].bbox.z));
    }
}
