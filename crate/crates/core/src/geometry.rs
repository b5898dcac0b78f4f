//! Axis-aligned box geometry on the resampled slice grid.
//!
//! Box corners are continuous pixel coordinates: pixel `i` covers `[i, i + 1)`.
//! Areas are geometric, so augmented or resampled boxes with fractional
//! corners keep exact areas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub z: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(z: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Box2D { z, x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::InvalidInput(format!(
                "degenerate box [{}, {}, {}, {}] on slice {}",
                self.x1, self.y1, self.x2, self.y2, self.z
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Box2D {
        Box2D {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
            ..*self
        }
    }

    /// Applies `x -> scale * x + shift` on both in-plane axes.
    pub fn affine(&self, scale: f64, dx: f64, dy: f64) -> Box2D {
        Box2D {
            x1: scale * self.x1 + dx,
            y1: scale * self.y1 + dy,
            x2: scale * self.x2 + dx,
            y2: scale * self.y2 + dy,
            ..*self
        }
    }

    fn intersection_area(&self, other: &Box2D) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

pub fn box_area(b: &Box2D) -> f64 {
    b.width() * b.height()
}

/// Intersection over union of two boxes; the slice index is ignored.
pub fn iou2d(a: &Box2D, b: &Box2D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU for boxes already known to be valid.
pub(crate) fn iou_unchecked(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = box_area(a) + box_area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OverlapMode {
    /// Positive-area intersection.
    Any,
    /// IoU strictly greater than the threshold.
    Iou(f64),
}

/// Overlap test for boxes on the same slice; boxes on different slices never overlap.
pub fn overlaps(a: &Box2D, b: &Box2D, mode: OverlapMode) -> bool {
    if a.z != b.z {
        return false;
    }
    match mode {
        OverlapMode::Any => a.intersection_area(b) > 0.0,
        OverlapMode::Iou(t) => iou_unchecked(a, b) > t,
    }
}

/// A chain of 2D boxes on consecutive slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    members: Vec<Box2D>,
    scores: Vec<f64>,
    pub score: f64,
}

impl Box3D {
    /// Builds a chain from `(box, score)` members; the chain score is the max member score.
    pub fn from_members(members: Vec<(Box2D, f64)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidInput("empty 3D box".into()));
        }
        for w in members.windows(2) {
            if w[1].0.z != w[0].0.z + 1 {
                return Err(Error::InvalidInput(format!(
                    "3D box members not on consecutive slices ({} then {})",
                    w[0].0.z, w[1].0.z
                )));
            }
        }
        let score = members
            .iter()
            .map(|m| m.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let (boxes, scores) = members.into_iter().unzip();
        Ok(Box3D {
            members: boxes,
            scores,
            score,
        })
    }

    pub fn members(&self) -> &[Box2D] {
        &self.members
    }

    pub fn member_scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn z_range(&self) -> (u32, u32) {
        (self.members[0].z, self.members[self.members.len() - 1].z)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Box2D {
        Box2D::new(0, x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou2d(&a, &a).unwrap(), 1.0);
        assert_eq!(iou2d(&a, &b(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        let third = iou2d(&a, &b(5.0, 0.0, 15.0, 10.0)).unwrap();
        assert!((third - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(Box2D::new(0, 1.0, 1.0, 1.0, 5.0).is_err());
        assert!(Box2D::new(0, 1.0, 5.0, 3.0, 2.0).is_err());
        let bad = Box2D {
            z: 0,
            x1: 0.0,
            y1: 0.0,
            x2: 0.0,
            y2: 1.0,
        };
        assert!(iou2d(&bad, &b(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn areas() {
        assert_eq!(box_area(&b(0.0, 0.0, 10.0, 10.0)), 100.0);
        assert_eq!(box_area(&b(0.0, 0.0, 1.0, 2.0)), 2.0);
        assert_eq!(box_area(&b(1.5, 1.5, 4.0, 3.0)), 3.75);
    }

    #[test]
    fn overlap_modes() {
        assert!(!overlaps(
            &b(0.0, 0.0, 5.0, 5.0),
            &b(5.0, 0.0, 10.0, 5.0),
            OverlapMode::Any
        ));
        assert!(overlaps(
            &b(0.0, 0.0, 10.0, 10.0),
            &b(2.0, 2.0, 4.0, 4.0),
            OverlapMode::Any
        ));
        assert!(!overlaps(
            &b(0.0, 0.0, 10.0, 10.0),
            &b(5.0, 0.0, 15.0, 10.0),
            OverlapMode::Iou(0.5)
        ));
        let other_slice = Box2D::new(1, 0.0, 0.0, 10.0, 10.0).unwrap();
        assert!(!overlaps(&b(0.0, 0.0, 10.0, 10.0), &other_slice, OverlapMode::Any));
    }

    #[test]
    fn box3d_requires_consecutive_slices() {
        let m = |z| (Box2D::new(z, 0.0, 0.0, 1.0, 1.0).unwrap(), 0.5);
        assert!(Box3D::from_members(vec![m(3), m(4), m(5)]).is_ok());
        assert!(Box3D::from_members(vec![m(3), m(5)]).is_err());
    }

    fn arb_box() -> impl Strategy<Value = Box2D> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| Box2D::new(0, x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou2d(&a, &c).unwrap();
            let ba = iou2d(&c, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou2d(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), c in arb_box(), tx in -100.0..100.0f64, ty in -100.0..100.0f64) {
            let before = iou2d(&a, &c).unwrap();
            let after = iou2d(&a.translated(tx, ty), &c.translated(tx, ty)).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
