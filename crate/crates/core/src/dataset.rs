//! Procedural parametric shapes and external VXGB corpora.
//!
//! Shape parameters are fractions of the grid extent, so one spec can be
//! rendered at every supported resolution. Y is up, X is the mirror axis and
//! Z runs front (low) to back (high).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxsnap_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::voxel::{self, VoxelGrid};

pub const SUPPORTED_DIMS: [usize; 4] = [8, 16, 32, 64];
pub const ARMREST_PROBABILITY: f64 = 0.5;
pub const SWIVEL_PROBABILITY: f64 = 0.3;
pub const PEDESTAL_PROBABILITY: f64 = 0.3;
pub const T_TAIL_PROBABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Chair,
    Table,
    Airplane,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Chair, Category::Table, Category::Airplane];

    pub fn name(self) -> &'static str {
        match self {
            Category::Chair => "chair",
            Category::Table => "table",
            Category::Airplane => "airplane",
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category {s:?}")))
    }
}

/// Inclusive parameter range.
pub type Range = (f64, f64);

macro_rules! params {
    ($(#[$m:meta])* $name:ident { $($field:ident: $lo:literal..=$hi:literal,)* } flags { $($flag:ident,)* }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            $(pub $field: f64,)*
            $(pub $flag: bool,)*
        }

        impl $name {
            pub const RANGES: &'static [(&'static str, Range)] = &[$((stringify!($field), ($lo, $hi)),)*];

            fn values(&self) -> Vec<f64> {
                vec![$(self.$field,)*]
            }

            fn sample_continuous<R: Rng + ?Sized>(rng: &mut R) -> [f64; Self::RANGES.len()] {
                let mut out = [0.0; Self::RANGES.len()];
                for (o, (_, (lo, hi))) in out.iter_mut().zip(Self::RANGES) {
                    *o = rng.random_range(*lo..=*hi);
                }
                out
            }
        }
    };
}

params! {
    /// Four legs (or a swivel column on a cross base), seat slab, back slab
    /// and optional armrests.
    ChairParams {
        seat_height: 0.25..=0.5,
        seat_width: 0.45..=0.75,
        seat_depth: 0.4..=0.7,
        seat_thickness: 0.08..=0.15,
        back_height: 0.2..=0.35,
        back_thickness: 0.06..=0.12,
        leg_thickness: 0.06..=0.12,
        arm_height: 0.1..=0.2,
    }
    flags { armrests, swivel, }
}

params! {
    /// Four corner legs (or a central pedestal on a foot plate) under a top slab.
    TableParams {
        top_height: 0.35..=0.7,
        top_width: 0.6..=0.95,
        top_depth: 0.45..=0.9,
        top_thickness: 0.06..=0.12,
        leg_thickness: 0.06..=0.15,
    }
    flags { pedestal, }
}

params! {
    /// Fuselage along Z, main wing along X, horizontal tail and a vertical fin.
    AirplaneParams {
        fuselage_length: 0.6..=0.95,
        fuselage_thickness: 0.1..=0.2,
        wing_span: 0.6..=0.95,
        wing_chord: 0.15..=0.3,
        wing_position: 0.3..=0.55,
        tail_span: 0.25..=0.5,
        fin_height: 0.12..=0.25,
    }
    flags { t_tail, }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "category", rename_all = "lowercase")]
pub enum ShapeSpec {
    Chair(ChairParams),
    Table(TableParams),
    Airplane(AirplaneParams),
}

impl ShapeSpec {
    pub fn category(&self) -> Category {
        match self {
            ShapeSpec::Chair(_) => Category::Chair,
            ShapeSpec::Table(_) => Category::Table,
            ShapeSpec::Airplane(_) => Category::Airplane,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ranges, values) = match self {
            ShapeSpec::Chair(p) => (ChairParams::RANGES, p.values()),
            ShapeSpec::Table(p) => (TableParams::RANGES, p.values()),
            ShapeSpec::Airplane(p) => (AirplaneParams::RANGES, p.values()),
        };
        for ((name, (lo, hi)), v) in ranges.iter().zip(values) {
            if !(v >= *lo && v <= *hi) {
                return Err(Error::invalid(format!(
                    "{} parameter {name} = {v} outside [{lo}, {hi}]",
                    self.category()
                )));
            }
        }
        Ok(())
    }
}

pub fn sample_spec<R: Rng + ?Sized>(category: Category, rng: &mut R) -> ShapeSpec {
    match category {
        Category::Chair => {
            let [seat_height, seat_width, seat_depth, seat_thickness, back_height, back_thickness, leg_thickness, arm_height] =
                ChairParams::sample_continuous(rng);
            ShapeSpec::Chair(ChairParams {
                seat_height,
                seat_width,
                seat_depth,
                seat_thickness,
                back_height,
                back_thickness,
                leg_thickness,
                arm_height,
                armrests: rng.random_bool(ARMREST_PROBABILITY),
                swivel: rng.random_bool(SWIVEL_PROBABILITY),
            })
        }
        Category::Table => {
            let [top_height, top_width, top_depth, top_thickness, leg_thickness] =
                TableParams::sample_continuous(rng);
            ShapeSpec::Table(TableParams {
                top_height,
                top_width,
                top_depth,
                top_thickness,
                leg_thickness,
                pedestal: rng.random_bool(PEDESTAL_PROBABILITY),
            })
        }
        Category::Airplane => {
            let [fuselage_length, fuselage_thickness, wing_span, wing_chord, wing_position, tail_span, fin_height] =
                AirplaneParams::sample_continuous(rng);
            ShapeSpec::Airplane(AirplaneParams {
                fuselage_length,
                fuselage_thickness,
                wing_span,
                wing_chord,
                wing_position,
                tail_span,
                fin_height,
                t_tail: rng.random_bool(T_TAIL_PROBABILITY),
            })
        }
    }
}

/// Voxel extent of a fractional length: rounded, at least 1, at most `dim`.
pub fn voxels(frac: f64, dim: usize) -> usize {
    ((frac * dim as f64).round() as usize).clamp(1, dim)
}

/// As [`voxels`] but with the parity of `dim`, so the span centres exactly.
pub fn centred_voxels(frac: f64, dim: usize) -> usize {
    let v = frac * dim as f64;
    let parity = dim % 2;
    let n = (((v - parity as f64) / 2.0).round() as usize) * 2 + parity;
    n.clamp(2 - parity, dim)
}

/// Start of a centred span of `len` voxels.
fn centre(len: usize, dim: usize) -> usize {
    (dim - len) / 2
}

/// One axis-aligned box, half-open `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Part {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Part {
    fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        Self { lo, hi }
    }

    pub fn volume(&self) -> usize {
        (0..3).map(|a| self.hi[a].saturating_sub(self.lo[a])).product()
    }

    /// This part reflected across the X midplane.
    fn mirrored(&self, dim: usize) -> Self {
        Self {
            lo: [dim - self.hi[0], self.lo[1], self.lo[2]],
            hi: [dim - self.lo[0], self.hi[1], self.hi[2]],
        }
    }
}

/// Box layout of a spec at resolution `dim`, mirror pairs included.
pub fn layout(spec: &ShapeSpec, dim: usize) -> Result<Vec<Part>> {
    if !SUPPORTED_DIMS.contains(&dim) {
        return Err(Error::invalid(format!("dims {dim} not in {SUPPORTED_DIMS:?}")));
    }
    spec.validate()?;
    let parts = match spec {
        ShapeSpec::Chair(p) => chair_layout(p, dim),
        ShapeSpec::Table(p) => table_layout(p, dim),
        ShapeSpec::Airplane(p) => airplane_layout(p, dim),
    };
    for part in &parts {
        if (0..3).any(|a| part.hi[a] > dim || part.lo[a] >= part.hi[a]) {
            return Err(Error::invalid(format!("{} part {part:?} does not fit a {dim}³ grid", spec.category())));
        }
    }
    Ok(parts)
}

fn with_mirror(parts: &mut Vec<Part>, part: Part, dim: usize) {
    let m = part.mirrored(dim);
    parts.push(part);
    if m != part {
        parts.push(m);
    }
}

fn chair_layout(p: &ChairParams, d: usize) -> Vec<Part> {
    let seat_h = voxels(p.seat_height, d);
    let seat_t = voxels(p.seat_thickness, d);
    let width = centred_voxels(p.seat_width, d);
    let depth = voxels(p.seat_depth, d);
    let leg = voxels(p.leg_thickness, d).min(width / 2);
    let back_t = voxels(p.back_thickness, d).min(depth);
    let top = seat_h + seat_t;
    let back_h = voxels(p.back_height, d).min(d - top);
    let x0 = centre(width, d);
    let z0 = centre(depth, d);
    let (x1, z1) = (x0 + width, z0 + depth);

    let mut parts = Vec::new();
    if p.swivel {
        let col = centred_voxels(p.leg_thickness, d).max(2);
        let cx = centre(col, d);
        let cz = z0 + (depth - col.min(depth)) / 2;
        // Cross base one voxel high, then the column up to the seat.
        parts.push(Part::new([x0, 0, cz], [x1, 1, cz + col]));
        parts.push(Part::new([cx, 0, z0], [cx + col, 1, z1]));
        parts.push(Part::new([cx, 1, cz], [cx + col, seat_h, cz + col]));
    } else {
        for (za, zb) in [(z0, z0 + leg), (z1 - leg, z1)] {
            with_mirror(&mut parts, Part::new([x0, 0, za], [x0 + leg, seat_h, zb]), d);
        }
    }
    parts.push(Part::new([x0, seat_h, z0], [x1, top, z1]));
    parts.push(Part::new([x0, top, z1 - back_t], [x1, top + back_h, z1]));
    if p.armrests {
        let arm_h = voxels(p.arm_height, d).min(back_h).max(1);
        let rail = arm_h.min(d - top);
        // Front post from the seat up to the rail, rail running to the back.
        with_mirror(&mut parts, Part::new([x0, top, z0], [x0 + 1, top + rail, z0 + 1]), d);
        with_mirror(&mut parts, Part::new([x0, top + rail - 1, z0], [x0 + 1, top + rail, z1 - back_t]), d);
    }
    parts
}

fn table_layout(p: &TableParams, d: usize) -> Vec<Part> {
    let thick = voxels(p.top_thickness, d);
    let top_y = voxels(p.top_height, d).min(d - thick);
    let width = centred_voxels(p.top_width, d);
    let depth = voxels(p.top_depth, d);
    let x0 = centre(width, d);
    let z0 = centre(depth, d);
    let (x1, z1) = (x0 + width, z0 + depth);

    let mut parts = Vec::new();
    if p.pedestal {
        let col = centred_voxels(p.leg_thickness * 1.5, d).max(2);
        let cx = centre(col, d);
        let cz = z0 + (depth - col.min(depth)) / 2;
        let foot = centred_voxels(p.top_width * 0.5, d).max(col);
        let fx = centre(foot, d);
        let fz = z0 + (depth - foot.min(depth)) / 2;
        parts.push(Part::new([fx, 0, fz], [fx + foot, 1, fz + foot.min(depth)]));
        parts.push(Part::new([cx, 1, cz], [cx + col, top_y, cz + col.min(depth)]));
    } else {
        let leg = voxels(p.leg_thickness, d).min(width / 2).min(depth / 2);
        for (za, zb) in [(z0, z0 + leg), (z1 - leg, z1)] {
            with_mirror(&mut parts, Part::new([x0, 0, za], [x0 + leg, top_y, zb]), d);
        }
    }
    parts.push(Part::new([x0, top_y, z0], [x1, top_y + thick, z1]));
    parts
}

fn airplane_layout(p: &AirplaneParams, d: usize) -> Vec<Part> {
    let len = voxels(p.fuselage_length, d);
    let thick = centred_voxels(p.fuselage_thickness, d);
    let span = centred_voxels(p.wing_span, d).max(thick);
    let chord = voxels(p.wing_chord, d).min(len);
    let tail = centred_voxels(p.tail_span, d).max(thick);
    let fin = voxels(p.fin_height, d);
    let z0 = centre(len, d);
    let fx = centre(thick, d);
    let y0 = centre(thick, d).min(d - thick - fin).max(0);
    let wing_z = z0 + ((p.wing_position * len as f64).round() as usize).min(len - chord);
    let tail_chord = (chord / 2).max(1);
    let tail_z = z0 + len - tail_chord;

    let mut parts = vec![Part::new([fx, y0, z0], [fx + thick, y0 + thick, z0 + len])];
    let wy = y0 + thick / 2;
    let sx = centre(span, d);
    parts.push(Part::new([sx, wy, wing_z], [sx + span, wy + 1, wing_z + chord]));
    let fin_x = centre(2 - d % 2, d);
    parts.push(Part::new([fin_x, y0 + thick, tail_z], [fin_x + 2 - d % 2, y0 + thick + fin, z0 + len]));
    let ty = if p.t_tail { y0 + thick + fin - 1 } else { wy };
    let tx = centre(tail, d);
    parts.push(Part::new([tx, ty, tail_z], [tx + tail, ty + 1, z0 + len]));
    parts
}

pub fn gen_procedural_shape(spec: &ShapeSpec, dim: usize) -> Result<VoxelGrid> {
    let mut g = VoxelGrid::empty(dim);
    for part in layout(spec, dim)? {
        g.fill_box(part.lo, part.hi);
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Procedural { seed: u64, index: u64 },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub grid: VoxelGrid,
    pub category: Category,
    pub split: Split,
    pub provenance: Provenance,
}

/// Procedural dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub category: Category,
    pub n_train: usize,
    pub n_heldout: usize,
    pub dims: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            category: Category::Chair,
            n_train: 512,
            n_heldout: 64,
            dims: 16,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    resolution: usize,
    examples: Vec<Example>,
}

/// RNG for the `index`-th shape of a procedural dataset seeded with `seed`.
pub fn shape_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn build_dataset(category: Category, n_train: usize, n_heldout: usize, dims: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_heldout == 0 {
        return Err(Error::invalid("split counts must be >= 1"));
    }
    let mut examples = Vec::with_capacity(n_train + n_heldout);
    for index in 0..(n_train + n_heldout) as u64 {
        let spec = sample_spec(category, &mut shape_rng(seed, index));
        examples.push(Example {
            grid: gen_procedural_shape(&spec, dims)?,
            category,
            split: if (index as usize) < n_train { Split::Train } else { Split::Heldout },
            provenance: Provenance::Procedural { seed, index },
        });
    }
    Dataset::new(dims, examples)
}

impl DatasetConfig {
    pub fn build(&self) -> Result<Dataset> {
        build_dataset(self.category, self.n_train, self.n_heldout, self.dims, self.seed)
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

impl Dataset {
    pub fn new(resolution: usize, examples: Vec<Example>) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.grid.dim() != resolution) {
            return Err(Error::ResolutionMismatch {
                expected: resolution,
                got: e.grid.dim(),
            });
        }
        Ok(Self { resolution, examples })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn grids(&self, split: Split) -> Vec<&VoxelGrid> {
        self.split(split).map(|e| &e.grid).collect()
    }

    /// One epoch of `[N, 1, D, D, D]` batches; the trailing short batch is dropped.
    pub fn batches<R: Rng + ?Sized>(
        &self,
        split: Split,
        batch_size: usize,
        shuffle: bool,
        rng: &mut R,
    ) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        let mut order: Vec<&VoxelGrid> = self.grids(split);
        if order.is_empty() {
            return Err(Error::EmptySplit(split));
        }
        if shuffle {
            order.shuffle(rng);
        }
        Ok(Batches {
            order,
            batch_size,
            next: 0,
        })
    }

    /// Writes one VXGB file per example plus a `path\tcategory\tsplit` manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (i, e) in self.examples.iter().enumerate() {
            let name = format!("{}_{:05}.vxgb", e.category, i);
            write_atomic(&dir.join(&name), &voxel::encode(&e.grid))?;
            manifest.push_str(&format!("{name}\t{}\t{}\n", e.category, e.split.name()));
        }
        write_atomic(&dir.join(MANIFEST_NAME), manifest.as_bytes())
    }

    /// Loads a manifest; relative paths resolve against its directory.
    pub fn load_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut examples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [file, category, split] = fields[..] else {
                return Err(Error::invalid(format!(
                    "{}:{}: expected path<TAB>category<TAB>split",
                    path.display(),
                    lineno + 1
                )));
            };
            let file = base.join(file);
            let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
            examples.push(Example {
                grid: voxel::decode(&bytes)?,
                category: category.parse()?,
                split: split.parse()?,
                provenance: Provenance::File(file),
            });
        }
        let Some(first) = examples.first() else {
            return Err(Error::invalid(format!("{}: manifest lists no grids", path.display())));
        };
        Self::new(first.grid.dim(), examples)
    }
}

pub struct Batches<'a> {
    order: Vec<&'a VoxelGrid>,
    batch_size: usize,
    next: usize,
}

impl Batches<'_> {
    pub fn len(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Iterator for Batches<'_> {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        let end = self.next + self.batch_size;
        if end > self.order.len() {
            return None;
        }
        let grids = &self.order[self.next..end];
        self.next = end;
        Some(grids_to_tensor(grids.iter().copied()))
    }
}

/// Stacks grids of one resolution into `[N, 1, D, D, D]`.
pub fn grids_to_tensor<'a>(grids: impl IntoIterator<Item = &'a VoxelGrid>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    let mut dim = 0;
    for g in grids {
        dim = g.dim();
        data.extend(g.to_values());
        n += 1;
    }
    Tensor::new(&[n, 1, dim, dim, dim], data).expect("grids share one resolution")
}
