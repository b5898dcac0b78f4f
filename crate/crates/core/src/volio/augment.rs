//! Random resize-and-shift augmentation applied identically to image and boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::PlaneTransform;
use super::volume::{Grid, VolumeMeta, WindowedVolume};
use crate::error::{Error, Result};
use crate::geometry::Box2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentBounds {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub max_shift: i32,
}

impl Default for AugmentBounds {
    fn default() -> Self {
        AugmentBounds {
            ratio_min: 0.8,
            ratio_max: 1.2,
            max_shift: 8,
        }
    }
}

impl AugmentBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_min > 0.0 && self.ratio_min <= self.ratio_max) || self.max_shift < 0 {
            return Err(Error::InvalidInput(format!(
                "augmentation bounds {:?} are empty",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub resize_ratio: f64,
    pub shift: (i32, i32),
    pub rng_seed: u64,
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec = AugmentSpec {
        resize_ratio: 1.0,
        shift: (0, 0),
        rng_seed: 0,
    };

    /// Draws a ratio and an integer shift from `bounds`; fully determined by `seed`.
    pub fn sample(seed: u64, bounds: &AugmentBounds) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resize_ratio = if bounds.ratio_min == bounds.ratio_max {
            bounds.ratio_min
        } else {
            rng.random_range(bounds.ratio_min..=bounds.ratio_max)
        };
        let s = bounds.max_shift;
        let shift = (rng.random_range(-s..=s), rng.random_range(-s..=s));
        AugmentSpec {
            resize_ratio,
            shift,
            rng_seed: seed,
        }
    }

    pub fn validate(&self, bounds: &AugmentBounds) -> Result<()> {
        let ok = self.resize_ratio >= bounds.ratio_min
            && self.resize_ratio <= bounds.ratio_max
            && self.shift.0.abs() <= bounds.max_shift
            && self.shift.1.abs() <= bounds.max_shift;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("augmentation {:?} outside bounds", self)))
        }
    }

    pub fn transform(&self) -> PlaneTransform {
        PlaneTransform::scale(self.resize_ratio, self.resize_ratio)
            .then(&PlaneTransform::shift(self.shift.0 as f64, self.shift.1 as f64))
    }
}

/// Resizes every slice of `v` by the spec ratio, shifts it, and maps `boxes`
/// with the same affine transform. Pixels shifted in from outside are zero.
pub fn augment(
    v: &WindowedVolume,
    boxes: &[Box2D],
    spec: &AugmentSpec,
) -> Result<(WindowedVolume, Vec<Box2D>)> {
    let t = spec.transform();
    let out_boxes = boxes.iter().map(|b| t.apply(b)).collect();
    if spec.resize_ratio == 1.0 && spec.shift == (0, 0) {
        return Ok((v.clone(), out_boxes));
    }
    let ratio = spec.resize_ratio;
    let (nx, ny) = (v.nx(), v.ny());
    let ox = ((nx as f64 * ratio).round() as usize).max(1);
    let oy = ((ny as f64 * ratio).round() as usize).max(1);
    let coord = |p: usize, shift: i32, n: usize| -> Option<(usize, usize, f64)> {
        let u = (p as f64 + 0.5 - shift as f64) / ratio - 0.5;
        if u < -0.5 || u > n as f64 - 0.5 {
            return None;
        }
        let u = u.clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        Some((i0, (i0 + 1).min(n - 1), u - i0 as f64))
    };
    let xs: Vec<_> = (0..ox).map(|p| coord(p, spec.shift.0, nx)).collect();
    let ys: Vec<_> = (0..oy).map(|q| coord(q, spec.shift.1, ny)).collect();
    let mut out = Vec::with_capacity(ox * oy * v.nz());
    for z in 0..v.nz() {
        for yc in &ys {
            for xc in &xs {
                let val = match (xc, yc) {
                    (Some((x0, x1, tx)), Some((y0, y1, ty))) => {
                        let a = v.get(*x0, *y0, z) as f64 * (1.0 - tx) + v.get(*x1, *y0, z) as f64 * tx;
                        let b = v.get(*x0, *y1, z) as f64 * (1.0 - tx) + v.get(*x1, *y1, z) as f64 * tx;
                        (a * (1.0 - ty) + b * ty) as f32
                    }
                    _ => 0.0,
                };
                out.push(val);
            }
        }
    }
    let meta = VolumeMeta {
        dims: [ox, oy, v.nz()],
        spacing: [v.meta.spacing[0] / ratio, v.meta.spacing[1] / ratio, v.meta.spacing[2]],
        ..v.meta.clone()
    };
    Ok((Grid::new(meta, out)?, out_boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Owner;
    use proptest::prelude::*;

    fn image() -> WindowedVolume {
        let meta = VolumeMeta {
            dims: [32, 24, 2],
            spacing: [0.8, 0.8, 2.0],
            volume_id: "v".into(),
            owner: Owner::new("p", "s", "r"),
        };
        let vox = (0..32 * 24 * 2).map(|i| ((i * 37) % 101) as f32).collect();
        Grid::new(meta, vox).unwrap()
    }

    #[test]
    fn identity_spec_is_identity() {
        let img = image();
        let b = vec![Box2D::new(0, 3.0, 4.0, 9.0, 10.0).unwrap()];
        let (out, ob) = augment(&img, &b, &AugmentSpec::IDENTITY).unwrap();
        assert_eq!(out, img);
        assert_eq!(ob, b);
    }

    #[test]
    fn scale_maps_boxes() {
        let spec = AugmentSpec {
            resize_ratio: 1.2,
            shift: (0, 0),
            rng_seed: 1,
        };
        let b = vec![Box2D::new(0, 10.0, 10.0, 20.0, 20.0).unwrap()];
        let (out, ob) = augment(&image(), &b, &spec).unwrap();
        let (x1, y1, x2, y2) = (ob[0].x1, ob[0].y1, ob[0].x2, ob[0].y2);
        assert!((x1 - 12.0).abs() < 1e-12 && (y1 - 12.0).abs() < 1e-12);
        assert!((x2 - 24.0).abs() < 1e-12 && (y2 - 24.0).abs() < 1e-12);
        assert_eq!(out.meta.dims, [38, 29, 2]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let bounds = AugmentBounds::default();
        let s1 = AugmentSpec::sample(99, &bounds);
        let s2 = AugmentSpec::sample(99, &bounds);
        assert_eq!(s1, s2);
        s1.validate(&bounds).unwrap();
        let b = vec![Box2D::new(1, 5.0, 5.0, 12.0, 9.0).unwrap()];
        let (o1, b1) = augment(&image(), &b, &s1).unwrap();
        let (o2, b2) = augment(&image(), &b, &s2).unwrap();
        let bytes = |g: &WindowedVolume| g.voxels.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&o1), bytes(&o2));
        assert_eq!(b1, b2);
    }

    #[test]
    fn shift_moves_content() {
        let spec = AugmentSpec {
            resize_ratio: 1.0,
            shift: (3, -2),
            rng_seed: 0,
        };
        let img = image();
        let (out, _) = augment(&img, &[], &spec).unwrap();
        assert_eq!(out.get(10, 5, 1), img.get(7, 7, 1));
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    proptest! {
        #[test]
        fn boxes_stay_valid_and_centers_follow(seed in any::<u64>(), x in 0.0..50.0f64, y in 0.0..50.0f64, w in 0.5..20.0f64, h in 0.5..20.0f64) {
            let spec = AugmentSpec::sample(seed, &AugmentBounds::default());
            let b = Box2D::new(0, x, y, x + w, y + h).unwrap();
            let t = spec.transform();
            let m = t.apply(&b);
            prop_assert!(m.validate().is_ok());
            let (cx, cy) = b.center();
            let (tx, ty) = t.apply_point(cx, cy);
            let (mx, my) = m.center();
            prop_assert!((tx - mx).abs() < 1e-9 && (ty - my).abs() < 1e-9);
        }
    }
}
