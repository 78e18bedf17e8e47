mod format;
mod grid;
mod ops;

pub use format::{decode, encode, from_base64, to_base64, GridJson, HEADER_LEN, MAGIC, VERSION};
pub use grid::{Axis, ContinuousGrid, VoxelGrid};
pub use ops::{
    binarize, count_components, drop_voxels, label_components, remove_small_components, symmetrize,
    Connectivity, Keep, Postprocess, DEFAULT_MIN_FRACTION, DEFAULT_THRESHOLD,
};
