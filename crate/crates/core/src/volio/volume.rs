use serde::{Deserialize, Serialize};

use crate::domain::Owner;
use crate::error::{Error, Result};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f64; 3],
    pub volume_id: String,
    pub owner: Owner,
}

impl VolumeMeta {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "volume {} has a zero dimension {:?}",
                self.volume_id, self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "volume {} has non-positive spacing {:?}",
                self.volume_id, self.spacing
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn nz(&self) -> usize {
        self.dims[2]
    }
}

/// Dense x-fastest voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub meta: VolumeMeta,
    pub voxels: Vec<T>,
}

/// CT volume in Hounsfield units, clamped to the 12-bit window.
pub type VoxelVolume = Grid<i16>;
/// Intensities rescaled to [0, 255].
pub type WindowedVolume = Grid<f32>;
/// Per-voxel organ region codes (see [`crate::phantom::Region`]).
pub type LabelVolume = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(meta: VolumeMeta, voxels: Vec<T>) -> Result<Self> {
        meta.validate()?;
        if voxels.len() != meta.voxel_count() {
            return Err(Error::InvalidInput(format!(
                "volume {} expects {} voxels, got {}",
                meta.volume_id,
                meta.voxel_count(),
                voxels.len()
            )));
        }
        Ok(Grid { meta, voxels })
    }

    pub fn filled(meta: VolumeMeta, value: T) -> Result<Self> {
        let n = meta.voxel_count();
        Grid::new(meta, vec![value; n])
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.meta.dims[0] * (y + self.meta.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.voxels[self.index(x, y, z)]
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.meta.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn nx(&self) -> usize {
        self.meta.dims[0]
    }

    pub fn ny(&self) -> usize {
        self.meta.dims[1]
    }

    pub fn nz(&self) -> usize {
        self.meta.dims[2]
    }
}

impl VoxelVolume {
    /// Clamps every voxel into the 12-bit window; returns how many were changed.
    pub fn clamp_hu(&mut self) -> usize {
        let mut changed = 0;
        for v in &mut self.voxels {
            let c = (*v).clamp(HU_MIN, HU_MAX);
            if c != *v {
                *v = c;
                changed += 1;
            }
        }
        changed
    }
}
