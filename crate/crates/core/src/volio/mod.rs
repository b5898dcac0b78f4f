//! Volume and manifest persistence, plus the preprocessing pipeline.

pub mod augment;
pub mod container;
pub mod embstore;
pub mod manifest;
pub mod preprocess;
pub mod volume;

pub use augment::{augment, AugmentBounds, AugmentSpec};
pub use preprocess::{
    clip_black_borders, preprocess, resample_xy, resample_z, window_hu, window_rescale,
    PlaneTransform, PreprocessConfig, SliceMap, VolumeTransform,
};
pub use volume::{Grid, LabelVolume, VolumeMeta, VoxelVolume, WindowedVolume};
