use crate::error::{Error, Result};

/// Binary occupancy over a cubic lattice.
///
/// Cells are indexed X-fastest: `x + D·(y + D·z)`, which matches the
/// `D×H×W` tensor layout with W as the X axis. Y is up.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    dim: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for VoxelGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VoxelGrid({}³, {} occupied)", self.dim, self.count())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl VoxelGrid {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            bits: vec![0; (dim * dim * dim).div_ceil(64)],
        }
    }

    pub fn full(dim: usize) -> Self {
        let mut g = Self::empty(dim);
        for i in 0..g.cells() {
            g.set_index(i, true);
        }
        g
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut g = Self::empty(dim);
        for z in 0..dim {
            for y in 0..dim {
                for x in 0..dim {
                    if f(x, y, z) {
                        g.set(x, y, z, true);
                    }
                }
            }
        }
        g
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.dim * self.dim * self.dim
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dim * (y + self.dim * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.dim, (i / self.dim) % self.dim, i / (self.dim * self.dim))
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, v: bool) {
        let (w, b) = (i / 64, i % 64);
        if v {
            self.bits[w] |= 1 << b;
        } else {
            self.bits[w] &= !(1 << b);
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.get_index(self.index(x, y, z))
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.set_index(i, v);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cells()).filter(|&i| self.get_index(i))
    }

    /// True when every occupied cell of `self` is occupied in `other`.
    pub fn is_subset_of(&self, other: &VoxelGrid) -> bool {
        self.dim == other.dim && self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    /// Fills the half-open box `[lo, hi)` (clipped to the grid).
    pub fn fill_box(&mut self, lo: [usize; 3], hi: [usize; 3]) {
        let d = self.dim;
        for z in lo[2]..hi[2].min(d) {
            for y in lo[1]..hi[1].min(d) {
                for x in lo[0]..hi[0].min(d) {
                    self.set(x, y, z, true);
                }
            }
        }
    }

    /// Occupancy as `0.0`/`1.0` values in cell order.
    pub fn to_values(&self) -> Vec<f64> {
        (0..self.cells()).map(|i| if self.get_index(i) { 1.0 } else { 0.0 }).collect()
    }

    pub fn mirror_index(&self, i: usize, axis: Axis) -> usize {
        let (x, y, z) = self.coords(i);
        let m = self.dim - 1;
        match axis {
            Axis::X => self.index(m - x, y, z),
            Axis::Y => self.index(x, m - y, z),
            Axis::Z => self.index(x, y, m - z),
        }
    }

    pub fn is_mirror_symmetric(&self, axis: Axis) -> bool {
        (0..self.cells()).all(|i| self.get_index(i) == self.get_index(self.mirror_index(i, axis)))
    }

    /// Nested `[z][y][x]` 0/1 arrays (the `D×H×W` order).
    pub fn to_dense(&self) -> Vec<Vec<Vec<u8>>> {
        let d = self.dim;
        (0..d)
            .map(|z| (0..d).map(|y| (0..d).map(|x| self.get(x, y, z) as u8).collect()).collect())
            .collect()
    }

    pub fn from_dense(dense: &[Vec<Vec<u8>>]) -> Result<Self> {
        let d = dense.len();
        if d == 0 {
            return Err(Error::invalid("dense grid is empty"));
        }
        let mut g = Self::empty(d);
        for (z, plane) in dense.iter().enumerate() {
            if plane.len() != d {
                return Err(Error::invalid("dense grid is not cubic"));
            }
            for (y, row) in plane.iter().enumerate() {
                if row.len() != d {
                    return Err(Error::invalid("dense grid is not cubic"));
                }
                for (x, &v) in row.iter().enumerate() {
                    match v {
                        0 => {}
                        1 => g.set(x, y, z, true),
                        _ => return Err(Error::invalid(format!("dense cell value {v} is not 0/1"))),
                    }
                }
            }
        }
        Ok(g)
    }
}

/// Real-valued occupancy in `[0, 1]`, same indexing as [`VoxelGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousGrid {
    dim: usize,
    values: Vec<f64>,
}

impl ContinuousGrid {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * dim * dim {
            return Err(Error::invalid(format!(
                "{} values for a {dim}³ grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("occupancy {v} outside [0, 1]")));
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl From<&VoxelGrid> for ContinuousGrid {
    fn from(g: &VoxelGrid) -> Self {
        Self {
            dim: g.dim(),
            values: g.to_values(),
        }
    }
}
