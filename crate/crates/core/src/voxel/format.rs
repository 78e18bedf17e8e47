//! VXGB: `"VXGB"`, version `u32`, dims `u32×3` (little-endian), then the
//! occupancy bit-packed X-fastest, least significant bit first.

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::grid::VoxelGrid;
use crate::error::{FormatError, Result};

pub const MAGIC: &[u8; 4] = b"VXGB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode(g: &VoxelGrid) -> Vec<u8> {
    let d = g.dim() as u32;
    let mut out = Vec::with_capacity(HEADER_LEN + g.cells().div_ceil(8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for _ in 0..3 {
        out.extend_from_slice(&d.to_le_bytes());
    }
    let mut payload = vec![0u8; g.cells().div_ceil(8)];
    for i in g.occupied() {
        payload[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<VoxelGrid, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated);
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let (d, h, w) = (word(8), word(12), word(16));
    if d != h || h != w {
        return Err(FormatError::NonCubic(d, h, w));
    }
    let dim = d as usize;
    if dim == 0 || dim > 1024 {
        return Err(FormatError::Encoding(format!("unsupported extent {dim}")));
    }
    let mut g = VoxelGrid::empty(dim);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < g.cells().div_ceil(8) {
        return Err(FormatError::Truncated);
    }
    for i in 0..g.cells() {
        if payload[i / 8] >> (i % 8) & 1 == 1 {
            g.set_index(i, true);
        }
    }
    Ok(g)
}

pub fn to_base64(g: &VoxelGrid) -> String {
    base64::engine::general_purpose::STANDARD.encode(encode(g))
}

pub fn from_base64(s: &str) -> Result<VoxelGrid, FormatError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| FormatError::Encoding(e.to_string()))?;
    decode(&bytes)
}

/// Wire form of a grid: base64 VXGB string or nested `[D][H][W]` 0/1 arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridJson {
    Base64(String),
    Dense(Vec<Vec<Vec<u8>>>),
}

impl GridJson {
    pub fn encode(g: &VoxelGrid) -> Self {
        GridJson::Base64(to_base64(g))
    }

    pub fn to_grid(&self) -> Result<VoxelGrid> {
        match self {
            GridJson::Base64(s) => Ok(from_base64(s)?),
            GridJson::Dense(d) => VoxelGrid::from_dense(d),
        }
    }
}
