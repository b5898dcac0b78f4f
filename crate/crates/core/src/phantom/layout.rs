//! Analytic organ layout of a phantom torso.
//!
//! Shapes are given as fractions of the field of view so the same layout works
//! for any volume size. All evaluation happens in millimetres.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Organ;

/// Per-voxel region codes stored in label volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Region {
    Air = 0,
    Body = 1,
    Lung = 2,
    Liver = 3,
    LymphCorridor = 4,
}

impl Region {
    pub fn from_code(code: u8) -> Region {
        match code {
            1 => Region::Body,
            2 => Region::Lung,
            3 => Region::Liver,
            4 => Region::LymphCorridor,
            _ => Region::Air,
        }
    }

    /// Organ whose lesions live in this region.
    pub fn organ(self) -> Option<Organ> {
        match self {
            Region::Air => None,
            Region::Body => Some(Organ::Other),
            Region::Lung => Some(Organ::Lung),
            Region::Liver => Some(Organ::Liver),
            Region::LymphCorridor => Some(Organ::LymphNode),
        }
    }

    pub fn of_organ(organ: Organ) -> Region {
        match organ {
            Organ::Other => Region::Body,
            Organ::Lung => Region::Lung,
            Organ::Liver => Region::Liver,
            Organ::LymphNode => Region::LymphCorridor,
        }
    }
}

/// Ellipsoid in field-of-view fractions: `center` and `radii` as (x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrganLayout {
    /// Elliptic cylinder spanning every slice; z entries are ignored.
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub liver: Ellipsoid,
    /// Elliptic cylinder between the lungs, limited to `lymph_z` (fractions).
    pub lymph: Ellipsoid,
    pub lymph_z: [f64; 2],
    /// Relative per-patient size jitter applied to every organ.
    pub jitter: f64,
}

impl Default for OrganLayout {
    fn default() -> Self {
        OrganLayout {
            body: Ellipsoid {
                center: [0.5, 0.5, 0.5],
                radii: [0.45, 0.38, 1.0],
            },
            lungs: [
                Ellipsoid {
                    center: [0.27, 0.45, 0.3],
                    radii: [0.14, 0.22, 0.34],
                },
                Ellipsoid {
                    center: [0.73, 0.45, 0.3],
                    radii: [0.14, 0.22, 0.34],
                },
            ],
            liver: Ellipsoid {
                center: [0.36, 0.52, 0.76],
                radii: [0.25, 0.22, 0.32],
            },
            lymph: Ellipsoid {
                center: [0.5, 0.42, 0.5],
                radii: [0.1, 0.16, 1.0],
            },
            lymph_z: [0.04, 0.62],
            jitter: 0.05,
        }
    }
}

/// Layout resolved to millimetres for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientAnatomy {
    body: ([f64; 3], [f64; 3]),
    lungs: [([f64; 3], [f64; 3]); 2],
    liver: ([f64; 3], [f64; 3]),
    lymph: ([f64; 3], [f64; 3]),
    lymph_z: [f64; 2],
    pub extent_mm: [f64; 3],
}

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3], use_z: bool) -> bool {
    let dx = (p[0] - c[0]) / r[0];
    let dy = (p[1] - c[1]) / r[1];
    let dz = if use_z { (p[2] - c[2]) / r[2] } else { 0.0 };
    dx * dx + dy * dy + dz * dz <= 1.0
}

impl PatientAnatomy {
    /// `scale` multiplies organ radii (per-patient jitter).
    pub fn new(layout: &OrganLayout, extent_mm: [f64; 3], scale: f64) -> Self {
        let mm = |e: &Ellipsoid, s: f64| {
            let c = [
                e.center[0] * extent_mm[0],
                e.center[1] * extent_mm[1],
                e.center[2] * extent_mm[2],
            ];
            let r = [
                e.radii[0] * extent_mm[0] * s,
                e.radii[1] * extent_mm[1] * s,
                e.radii[2] * extent_mm[2] * s,
            ];
            (c, r)
        };
        PatientAnatomy {
            body: mm(&layout.body, 1.0),
            lungs: [mm(&layout.lungs[0], scale), mm(&layout.lungs[1], scale)],
            liver: mm(&layout.liver, scale),
            lymph: mm(&layout.lymph, scale),
            lymph_z: [
                layout.lymph_z[0] * extent_mm[2],
                layout.lymph_z[1] * extent_mm[2],
            ],
            extent_mm,
        }
    }

    /// Region at a point in millimetres; later organs win where shapes overlap.
    pub fn region_at(&self, p: [f64; 3]) -> Region {
        if !inside(p, self.body.0, self.body.1, false) {
            return Region::Air;
        }
        if inside(p, self.liver.0, self.liver.1, true) {
            return Region::Liver;
        }
        if p[2] >= self.lymph_z[0]
            && p[2] <= self.lymph_z[1]
            && inside(p, self.lymph.0, self.lymph.1, false)
        {
            return Region::LymphCorridor;
        }
        if self.lungs.iter().any(|(c, r)| inside(p, *c, *r, true)) {
            return Region::Lung;
        }
        Region::Body
    }

    /// Axis-aligned bounds (mm) of the region's defining shapes, for rejection sampling.
    pub fn region_bounds(&self, region: Region) -> ([f64; 3], [f64; 3]) {
        let bounds = |c: [f64; 3], r: [f64; 3]| {
            (
                [c[0] - r[0], c[1] - r[1], c[2] - r[2]],
                [c[0] + r[0], c[1] + r[1], c[2] + r[2]],
            )
        };
        let full_z = |(lo, hi): ([f64; 3], [f64; 3])| {
            ([lo[0], lo[1], 0.0], [hi[0], hi[1], self.extent_mm[2]])
        };
        let clip = |(lo, hi): ([f64; 3], [f64; 3])| {
            let e = self.extent_mm;
            (
                [lo[0].max(0.0), lo[1].max(0.0), lo[2].max(0.0)],
                [hi[0].min(e[0]), hi[1].min(e[1]), hi[2].min(e[2])],
            )
        };
        clip(match region {
            Region::Air | Region::Body => full_z(bounds(self.body.0, self.body.1)),
            Region::Liver => bounds(self.liver.0, self.liver.1),
            Region::LymphCorridor => {
                let (lo, hi) = bounds(self.lymph.0, self.lymph.1);
                ([lo[0], lo[1], self.lymph_z[0]], [hi[0], hi[1], self.lymph_z[1]])
            }
            Region::Lung => {
                let (a_lo, a_hi) = bounds(self.lungs[0].0, self.lungs[0].1);
                let (b_lo, b_hi) = bounds(self.lungs[1].0, self.lungs[1].1);
                (
                    [a_lo[0].min(b_lo[0]), a_lo[1].min(b_lo[1]), a_lo[2].min(b_lo[2])],
                    [a_hi[0].max(b_hi[0]), a_hi[1].max(b_hi[1]), a_hi[2].max(b_hi[2])],
                )
            }
        })
    }
}

/// Uniform point in the ellipsoid `(c, r)`.
fn in_ellipsoid(rng: &mut impl Rng, c: [f64; 3], r: [f64; 3]) -> [f64; 3] {
    loop {
        let u: [f64; 3] = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return [c[0] + u[0] * r[0], c[1] + u[1] * r[1], c[2] + u[2] * r[2]];
        }
    }
}

impl PatientAnatomy {
    /// Candidate lesion centre: uniform in the region's defining shape with
    /// every radius reduced by `margin` (the body uses its bounding box). The
    /// caller still checks the region and extent.
    pub fn sample_center(&self, region: Region, margin: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
        let shrink = |r: [f64; 3]| [(r[0] - margin[0]).max(0.0), (r[1] - margin[1]).max(0.0), (r[2] - margin[2]).max(0.0)];
        match region {
            Region::Lung => {
                let (c, r) = self.lungs[rng.random_range(0..2)];
                in_ellipsoid(rng, c, shrink(r))
            }
            Region::Liver => in_ellipsoid(rng, self.liver.0, shrink(self.liver.1)),
            Region::LymphCorridor => {
                let (c, r) = self.lymph;
                let r = shrink(r);
                let p = in_ellipsoid(rng, [c[0], c[1], 0.0], [r[0], r[1], 0.0]);
                let (lo, hi) = (self.lymph_z[0] + margin[2], self.lymph_z[1] - margin[2]);
                [p[0], p[1], if lo < hi { rng.random_range(lo..hi) } else { 0.5 * (lo + hi) }]
            }
            Region::Air | Region::Body => {
                let (lo, hi) = self.region_bounds(region);
                let mut p = [0.0; 3];
                for k in 0..3 {
                    let (a, b) = (lo[k] + margin[k], hi[k] - margin[k]);
                    p[k] = if a < b { rng.random_range(a..b) } else { 0.5 * (a + b) };
                }
                p
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_regions() {
        let a = PatientAnatomy::new(&OrganLayout::default(), [100.0, 100.0, 100.0], 1.0);
        assert_eq!(a.region_at([1.0, 1.0, 50.0]), Region::Air);
        assert_eq!(a.region_at([27.0, 45.0, 30.0]), Region::Lung);
        assert_eq!(a.region_at([36.0, 52.0, 76.0]), Region::Liver);
        assert_eq!(a.region_at([50.0, 42.0, 30.0]), Region::LymphCorridor);
        assert_eq!(a.region_at([50.0, 80.0, 90.0]), Region::Body);
        for r in [Region::Air, Region::Body, Region::Lung, Region::Liver, Region::LymphCorridor] {
            assert_eq!(Region::from_code(r as u8), r);
        }
    }
}
