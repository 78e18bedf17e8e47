use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{Axis, ContinuousGrid, VoxelGrid};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            _ => Err(Error::invalid(format!("connectivity must be 6, 18 or 26, got {n}"))),
        }
    }

    /// Neighbour offsets; a `(dx, dy, dz)` is included when its number of
    /// non-zero components is within the connectivity's limit.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let limit = match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = (dx != 0) as usize + (dy != 0) as usize + (dz != 0) as usize;
                    if nz > 0 && nz <= limit {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keep {
    #[default]
    Low,
    High,
}

pub fn binarize(g: &ContinuousGrid, threshold: f64) -> Result<VoxelGrid> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut out = VoxelGrid::empty(g.dim());
    for (i, &v) in g.values().iter().enumerate() {
        if v >= threshold {
            out.set_index(i, true);
        }
    }
    Ok(out)
}

/// Component label per cell (`usize::MAX` for empty cells) and the size of
/// each component in discovery order.
pub fn label_components(g: &VoxelGrid, conn: Connectivity) -> (Vec<usize>, Vec<usize>) {
    let d = g.dim() as isize;
    let offsets = conn.offsets();
    let mut labels = vec![usize::MAX; g.cells()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in g.occupied() {
        if labels[start] != usize::MAX {
            continue;
        }
        let label = sizes.len();
        let mut size = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = g.coords(i);
            for [dx, dy, dz] in &offsets {
                let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                if nx < 0 || ny < 0 || nz < 0 || nx >= d || ny >= d || nz >= d {
                    continue;
                }
                let j = g.index(nx as usize, ny as usize, nz as usize);
                if g.get_index(j) && labels[j] == usize::MAX {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

pub fn count_components(g: &VoxelGrid, conn: Connectivity) -> usize {
    label_components(g, conn).1.len()
}

/// Deletes components smaller than `min_fraction` of the largest one.
pub fn remove_small_components(
    g: &VoxelGrid,
    min_fraction: f64,
    conn: Connectivity,
) -> Result<VoxelGrid> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::invalid(format!("min_fraction {min_fraction} outside [0, 1]")));
    }
    let (labels, sizes) = label_components(g, conn);
    let Some(&largest) = sizes.iter().max() else {
        return Ok(g.clone());
    };
    let cutoff = min_fraction * largest as f64;
    let keep: Vec<bool> = sizes.iter().map(|&s| s as f64 >= cutoff).collect();
    let mut out = VoxelGrid::empty(g.dim());
    for (i, &l) in labels.iter().enumerate() {
        if l != usize::MAX && keep[l] {
            out.set_index(i, true);
        }
    }
    Ok(out)
}

/// Copies the kept half along `axis` and reflects it onto the other half.
pub fn symmetrize(g: &VoxelGrid, axis: Axis, keep: Keep) -> Result<VoxelGrid> {
    let d = g.dim();
    if d % 2 != 0 {
        return Err(Error::invalid(format!("odd extent {d} along {axis:?}")));
    }
    let half = d / 2;
    let mut out = g.clone();
    for i in 0..g.cells() {
        let (x, y, z) = g.coords(i);
        let c = match axis {
            Axis::X => x,
            Axis::Y => y,
            Axis::Z => z,
        };
        let in_kept = match keep {
            Keep::Low => c < half,
            Keep::High => c >= half,
        };
        if in_kept {
            out.set_index(g.mirror_index(i, axis), g.get_index(i));
        }
    }
    Ok(out)
}

/// Clears exactly `floor(fraction · occupied)` occupied cells chosen
/// uniformly without replacement.
pub fn drop_voxels<R: Rng + ?Sized>(g: &VoxelGrid, fraction: f64, rng: &mut R) -> Result<VoxelGrid> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("drop fraction {fraction} outside [0, 1]")));
    }
    let occupied: Vec<usize> = g.occupied().collect();
    let n_drop = (fraction * occupied.len() as f64).floor() as usize;
    let mut out = g.clone();
    for k in rand::seq::index::sample(rng, occupied.len(), n_drop) {
        out.set_index(occupied[k], false);
    }
    Ok(out)
}

/// Postprocessing switches applied after binarization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Postprocess {
    pub component_removal: bool,
    pub min_fraction: f64,
    pub connectivity: Connectivity,
    pub symmetrize: bool,
    pub axis: Axis,
    pub keep: Keep,
}

impl Default for Postprocess {
    fn default() -> Self {
        Self {
            component_removal: true,
            min_fraction: DEFAULT_MIN_FRACTION,
            connectivity: Connectivity::TwentySix,
            symmetrize: true,
            axis: Axis::X,
            keep: Keep::Low,
        }
    }
}

impl Postprocess {
    pub fn none() -> Self {
        Self {
            component_removal: false,
            symmetrize: false,
            ..Self::default()
        }
    }

    /// Component removal first, then reflection.
    pub fn apply(&self, g: &VoxelGrid) -> Result<VoxelGrid> {
        let mut out = if self.component_removal {
            remove_small_components(g, self.min_fraction, self.connectivity)?
        } else {
            g.clone()
        };
        if self.symmetrize {
            out = symmetrize(&out, self.axis, self.keep)?;
        }
        Ok(out)
    }
}
