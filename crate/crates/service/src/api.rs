//! Request and response bodies.

use serde::{Deserialize, Serialize};
use voxsnap_core::projection::SnapOverrides;
use voxsnap_core::voxel::GridJson;

pub const MAX_GENERATE: usize = 64;
pub const MAX_INTERPOLATE_STEPS: usize = 16;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapRequest {
    pub category: String,
    pub grid: GridJson,
    #[serde(default)]
    pub overrides: Option<SnapOverrides>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub category: String,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub z: Vec<f64>,
    /// Base64 VXGB.
    pub grid: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub seed: u64,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub category: String,
    pub z_a: Vec<f64>,
    pub z_b: Vec<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolateResponse {
    /// Base64 VXGB grids from `z_a` (first) to `z_b` (last).
    pub grids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub category: String,
    pub resolution: usize,
    pub latent_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub models: Vec<ModelInfo>,
    pub version: String,
}
