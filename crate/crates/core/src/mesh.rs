//! Dyadic geometry over a discretized root cube.
//!
//! The root `[0, side)^d` is split into `2^{dL}` finest cells. Cubes come
//! from the `3^d` shifted dyadic grids: along each axis, grid component
//! `a ∈ {0, 1, 2}` shifts the level-`k` lattice by `(-1)^k · a/3` of the
//! level-`k` side length. A finest cell belongs to a cube when its midpoint
//! does, so every (grid, level) pair partitions the cells exactly and two
//! cubes of one grid are either nested or disjoint as cell sets.
//!
//! Cells are numbered with axis 0 varying fastest; every sum over a cube
//! visits its cells in that order.

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smallmat::{op_norm, Matrix, SpdMatrix, Vector, MAX_DIM};

/// Largest supported depth per spatial dimension (keeps cell counts addressable
/// and integer coordinate arithmetic far from overflow).
const MAX_DEPTH_1D: u32 = 24;
const MAX_DEPTH_2D: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    d: usize,
    depth: u32,
    side: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cube {
    pub grid: usize,
    pub level: u32,
    pub coords: [i64; 2],
}

/// One of the shifted dyadic grids.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridDescriptor {
    pub index: usize,
    /// Per-axis shift components in `{0, 1, 2}`.
    pub shift: Vec<u32>,
}

impl GridDescriptor {
    /// Per-axis offset of the level-`k` lattice, as a fraction of the
    /// level-`k` side length.
    pub fn offset_at(&self, level: u32) -> Vec<f64> {
        let sign = if level.is_multiple_of(2) { 1.0 } else { -1.0 };
        self.shift.iter().map(|&a| sign * a as f64 / 3.0).collect()
    }
}

/// Axis-aligned box of finest cells, `ranges[axis]` half-open.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellBox {
    d: usize,
    per_axis: usize,
    pub ranges: [Range<usize>; 2],
}

impl CellBox {
    pub fn len(&self) -> usize {
        self.ranges[..self.d].iter().map(|r| r.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_cell(&self, cell: usize) -> bool {
        let c0 = cell % self.per_axis;
        let c1 = cell / self.per_axis;
        self.ranges[0].contains(&c0) && (self.d == 1 || self.ranges[1].contains(&c1))
    }

    pub fn contains_box(&self, other: &CellBox) -> bool {
        (0..self.d).all(|ax| {
            let (a, b) = (&self.ranges[ax], &other.ranges[ax]);
            b.is_empty() || (a.start <= b.start && b.end <= a.end)
        })
    }

    /// Cell indices in the fixed summation order.
    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        let rows = if self.d == 1 { 0..1 } else { self.ranges[1].clone() };
        let per_axis = self.per_axis;
        rows.flat_map(move |r| self.ranges[0].clone().map(move |c| r * per_axis + c))
    }

    /// Contiguous runs of cells (one per row), for tight inner loops.
    pub fn rows(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let rows = if self.d == 1 { 0..1 } else { self.ranges[1].clone() };
        let r0 = self.ranges[0].clone();
        let per_axis = self.per_axis;
        rows.map(move |r| r * per_axis + r0.start..r * per_axis + r0.end)
    }
}

#[inline]
fn ceil_div(a: i64, b: i64) -> i64 {
    -((-a).div_euclid(b))
}

impl Mesh {
    pub fn new(d: usize, depth: u32, side: f64) -> Result<Self> {
        let max_depth = match d {
            1 => MAX_DEPTH_1D,
            2 => MAX_DEPTH_2D,
            _ => return Err(Error::UnsupportedSpatialDim(d)),
        };
        if depth < 1 || depth > max_depth {
            return Err(Error::InvalidMesh(format!("depth {depth} outside 1..={max_depth}")));
        }
        if !(side.is_finite() && side > 0.0) {
            return Err(Error::InvalidMesh(format!("side {side} must be positive")));
        }
        Ok(Self { d, depth, side })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn depth(&self) -> u32 {
        self.depth
    }

    #[inline]
    pub fn side(&self) -> f64 {
        self.side
    }

    #[inline]
    pub fn per_axis(&self) -> usize {
        1usize << self.depth
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.per_axis().pow(self.d as u32)
    }

    #[inline]
    pub fn cell_width(&self) -> f64 {
        self.side / self.per_axis() as f64
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.cell_width().powi(self.d as i32)
    }

    pub fn root_measure(&self) -> f64 {
        self.side.powi(self.d as i32)
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 2] {
        let p = self.per_axis();
        if self.d == 1 {
            [cell, 0]
        } else {
            [cell % p, cell / p]
        }
    }

    pub fn cell_index(&self, coords: [usize; 2]) -> usize {
        coords[0] + if self.d == 2 { coords[1] * self.per_axis() } else { 0 }
    }

    pub fn cell_midpoint(&self, cell: usize) -> [f64; 2] {
        let c = self.cell_coords(cell);
        let h = self.cell_width();
        let mut x = [0.0; 2];
        for ax in 0..self.d {
            x[ax] = (c[ax] as f64 + 0.5) * h;
        }
        x
    }

    /// Cell containing a point of the root.
    pub fn cell_at(&self, point: &[f64]) -> Result<usize> {
        if point.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: point.len() });
        }
        let mut c = [0usize; 2];
        for ax in 0..self.d {
            let x = point[ax];
            if !(x >= 0.0 && x < self.side) {
                return Err(Error::CubeOutsideRoot);
            }
            c[ax] = ((x / self.cell_width()) as usize).min(self.per_axis() - 1);
        }
        Ok(self.cell_index(c))
    }

    pub fn grid_count(&self) -> usize {
        3usize.pow(self.d as u32)
    }

    #[inline]
    pub fn grid_shift(&self, grid: usize, axis: usize) -> i64 {
        ((grid / 3usize.pow(axis as u32)) % 3) as i64
    }

    pub fn shifted_grids(&self) -> Vec<GridDescriptor> {
        (0..self.grid_count())
            .map(|g| GridDescriptor {
                index: g,
                shift: (0..self.d).map(|ax| self.grid_shift(g, ax) as u32).collect(),
            })
            .collect()
    }

    /// Cells per cube side at `level`.
    #[inline]
    fn cells_per_side(&self, level: u32) -> i64 {
        1i64 << (self.depth - level)
    }

    #[inline]
    fn signed_shift(level: u32, a: i64) -> i64 {
        if level.is_multiple_of(2) {
            a
        } else {
            -a
        }
    }

    /// Level-`level` lattice coordinate of cell `j` along one axis.
    #[inline]
    pub fn axis_coord(&self, j: usize, level: u32, a: i64) -> i64 {
        let p = self.cells_per_side(level);
        let s = Self::signed_shift(level, a);
        (6 * j as i64 + 3 - 2 * p * s).div_euclid(6 * p)
    }

    /// Cells along one axis whose midpoints fall in lattice interval `m`,
    /// clipped to the root.
    #[inline]
    pub fn axis_range(&self, m: i64, level: u32, a: i64) -> Range<usize> {
        let p = self.cells_per_side(level);
        let s = Self::signed_shift(level, a);
        let first = |m: i64| ceil_div(6 * p * m + 2 * p * s - 3, 6);
        let n = self.per_axis() as i64;
        let lo = first(m).clamp(0, n) as usize;
        let hi = first(m + 1).clamp(0, n) as usize;
        lo..hi.max(lo)
    }

    pub fn cube_containing(&self, cell: usize, grid: usize, level: u32) -> Cube {
        let c = self.cell_coords(cell);
        let mut coords = [0i64; 2];
        for ax in 0..self.d {
            coords[ax] = self.axis_coord(c[ax], level, self.grid_shift(grid, ax));
        }
        Cube { grid, level, coords }
    }

    pub fn cube_box(&self, cube: &Cube) -> CellBox {
        let mut ranges = [0..1, 0..1];
        for ax in 0..self.d {
            ranges[ax] = self.axis_range(cube.coords[ax], cube.level, self.grid_shift(cube.grid, ax));
        }
        CellBox { d: self.d, per_axis: self.per_axis(), ranges }
    }

    pub fn cube_cell_count(&self, cube: &Cube) -> usize {
        self.cube_box(cube).len()
    }

    /// Measure of the cube's intersection with the root, in the cell measure.
    pub fn cube_measure(&self, cube: &Cube) -> f64 {
        self.cube_cell_count(cube) as f64 * self.cell_volume()
    }

    pub fn side_length(&self, level: u32) -> f64 {
        self.side / (1u64 << level) as f64
    }

    /// Unclipped geometric extent `[lo, hi)` per axis.
    pub fn geometric_bounds(&self, cube: &Cube) -> Vec<(f64, f64)> {
        let s = self.side_length(cube.level);
        (0..self.d)
            .map(|ax| {
                let off = Self::signed_shift(cube.level, self.grid_shift(cube.grid, ax)) as f64 / 3.0;
                let lo = s * (cube.coords[ax] as f64 + off);
                (lo, lo + s)
            })
            .collect()
    }

    /// Range of lattice coordinates meeting the root along one axis.
    fn axis_coord_span(&self, level: u32, a: i64) -> Range<i64> {
        let lo = self.axis_coord(0, level, a);
        let hi = self.axis_coord(self.per_axis() - 1, level, a);
        lo..hi + 1
    }

    /// Nonempty cubes of one grid at one level, axis 0 varying fastest.
    pub fn cubes_at(&self, grid: usize, level: u32) -> Vec<Cube> {
        let span0 = self.axis_coord_span(level, self.grid_shift(grid, 0));
        let span1 = if self.d == 2 {
            self.axis_coord_span(level, self.grid_shift(grid, 1))
        } else {
            0..1
        };
        let mut out = Vec::new();
        for m1 in span1 {
            for m0 in span0.clone() {
                out.push(Cube { grid, level, coords: [m0, m1] });
            }
        }
        out
    }

    /// Every admitted cube: all grids, levels `0..=L`, ordered by
    /// (grid, level, coordinates).
    pub fn all_cubes(&self) -> Vec<Cube> {
        let mut out = Vec::new();
        for g in 0..self.grid_count() {
            for k in 0..=self.depth {
                out.extend(self.cubes_at(g, k));
            }
        }
        out
    }

    /// Nonempty dyadic children within the same grid.
    pub fn children(&self, cube: &Cube) -> Vec<Cube> {
        if cube.level >= self.depth {
            return Vec::new();
        }
        let level = cube.level + 1;
        let mut per_axis: [Vec<i64>; 2] = [vec![0], vec![0]];
        for ax in 0..self.d {
            let base = 2 * cube.coords[ax] + Self::signed_shift(cube.level, self.grid_shift(cube.grid, ax));
            per_axis[ax] = vec![base, base + 1];
        }
        let mut out = Vec::with_capacity(1 << self.d);
        for &m1 in &per_axis[1] {
            for &m0 in &per_axis[0] {
                let c = Cube { grid: cube.grid, level, coords: [m0, m1] };
                if !self.cube_box(&c).is_empty() {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn parent(&self, cube: &Cube) -> Option<Cube> {
        if cube.level == 0 {
            return None;
        }
        let level = cube.level - 1;
        let mut coords = [0i64; 2];
        for ax in 0..self.d {
            let s = Self::signed_shift(level, self.grid_shift(cube.grid, ax));
            coords[ax] = (cube.coords[ax] - s).div_euclid(2);
        }
        Some(Cube { grid: cube.grid, level, coords })
    }

    /// Smallest admitted cube (over all grids and levels) containing the
    /// arbitrary cube `[lower, lower + length)^d`, with its side ratio.
    ///
    /// Ties between grids resolve to the lowest grid index.
    pub fn approximate_cube(&self, lower: &[f64], length: f64) -> Result<(Cube, f64)> {
        if lower.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: lower.len() });
        }
        if !(length > 0.0) || lower.iter().any(|&x| !(x >= 0.0) || x + length > self.side) {
            return Err(Error::CubeOutsideRoot);
        }
        let h = self.cell_width();
        for level in (0..=self.depth).rev() {
            let p = self.cells_per_side(level) as f64;
            'grid: for grid in 0..self.grid_count() {
                let mut coords = [0i64; 2];
                for ax in 0..self.d {
                    // Work in units of a third of the cube side: boundaries
                    // sit at integers 3m + s.
                    let s = Self::signed_shift(level, self.grid_shift(grid, ax));
                    let lo = 3.0 * lower[ax] / (h * p);
                    let hi = 3.0 * (lower[ax] + length) / (h * p);
                    let m = ((lo - s as f64) / 3.0).floor() as i64;
                    let cube_hi = (3 * (m + 1) + s) as f64;
                    if hi > cube_hi {
                        continue 'grid;
                    }
                    coords[ax] = m;
                }
                let cube = Cube { grid, level, coords };
                return Ok((cube, self.side_length(level) / length));
            }
        }
        Err(Error::CubeOutsideRoot)
    }
}

/// Cube membership of every cell for one (grid, level).
///
/// `cubes` lists the nonempty cubes in [`Mesh::cubes_at`] order and
/// `slot[cell]` indexes into it. Accumulating over cells in ascending order
/// reproduces the summation order of [`Field::average`] bit for bit.
#[derive(Clone, Debug)]
pub struct LevelIndex {
    pub grid: usize,
    pub level: u32,
    pub cubes: Vec<Cube>,
    pub counts: Vec<u32>,
    pub slot: Vec<u32>,
}

impl LevelIndex {
    pub fn sums(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cubes.len()];
        for (v, &s) in values.iter().zip(&self.slot) {
            out[s as usize] += v;
        }
        out
    }

    pub fn means(&self, values: &[f64]) -> Vec<f64> {
        let mut out = self.sums(values);
        for (o, &c) in out.iter_mut().zip(&self.counts) {
            *o /= c as f64;
        }
        out
    }

    pub fn mins(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; self.cubes.len()];
        for (v, &s) in values.iter().zip(&self.slot) {
            let o = &mut out[s as usize];
            *o = o.min(*v);
        }
        out
    }
}

impl Mesh {
    pub fn level_index(&self, grid: usize, level: u32) -> LevelIndex {
        let span0 = self.axis_coord_span(level, self.grid_shift(grid, 0));
        let span1 = if self.d == 2 {
            self.axis_coord_span(level, self.grid_shift(grid, 1))
        } else {
            0..1
        };
        let width = (span0.end - span0.start) as usize;
        let cubes = self.cubes_at(grid, level);
        let mut counts = vec![0u32; cubes.len()];
        let slot: Vec<u32> = (0..self.cell_count())
            .map(|cell| {
                let c = self.cube_containing(cell, grid, level);
                let s = (c.coords[0] - span0.start) as usize
                    + (c.coords[1] - span1.start) as usize * width;
                counts[s] += 1;
                s as u32
            })
            .collect();
        LevelIndex { grid, level, cubes, counts, slot }
    }

    /// Level indices of one grid for levels `0..=L`.
    pub fn grid_index(&self, grid: usize) -> Vec<LevelIndex> {
        (0..=self.depth).map(|k| self.level_index(grid, k)).collect()
    }

    pub fn index(&self) -> MeshIndex {
        MeshIndex { mesh: *self, grids: (0..self.grid_count()).map(|g| self.grid_index(g)).collect() }
    }
}

/// Level indices for every grid, `grids[grid][level]`.
#[derive(Clone, Debug)]
pub struct MeshIndex {
    pub mesh: Mesh,
    pub grids: Vec<Vec<LevelIndex>>,
}

/// Values storable per cell.
pub trait FieldValue: Copy + Send + Sync + 'static {
    const KIND: &'static str;
    /// Vector/matrix dimension (1 for scalars).
    fn dim(&self) -> usize;
    fn is_finite(&self) -> bool;
    fn zero_like(&self) -> Self;
    fn add_assign(&mut self, other: &Self);
    fn scaled(&self, c: f64) -> Self;
    fn divided(&self, c: f64) -> Self;
    /// Pointwise norm: absolute value, Euclidean length, or operator norm.
    fn magnitude(&self) -> f64;
    fn push_components(&self, out: &mut Vec<f64>);
    fn from_components(n: usize, c: &[f64]) -> Result<Self>;
    fn component_count(n: usize) -> usize;
}

impl FieldValue for f64 {
    const KIND: &'static str = "scalar";
    fn dim(&self) -> usize {
        1
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    fn zero_like(&self) -> Self {
        0.0
    }
    fn add_assign(&mut self, other: &Self) {
        *self += other;
    }
    fn scaled(&self, c: f64) -> Self {
        self * c
    }
    fn divided(&self, c: f64) -> Self {
        self / c
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
    fn push_components(&self, out: &mut Vec<f64>) {
        out.push(*self);
    }
    fn from_components(_n: usize, c: &[f64]) -> Result<Self> {
        Ok(c[0])
    }
    fn component_count(_n: usize) -> usize {
        1
    }
}

impl FieldValue for Vector {
    const KIND: &'static str = "vector";
    fn dim(&self) -> usize {
        Vector::dim(self)
    }
    fn is_finite(&self) -> bool {
        Vector::is_finite(self)
    }
    fn zero_like(&self) -> Self {
        Vector::zeros(self.dim())
    }
    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *a += b;
        }
    }
    fn scaled(&self, c: f64) -> Self {
        self.scale(c)
    }
    fn divided(&self, c: f64) -> Self {
        let mut out = *self;
        out.as_mut_slice().iter_mut().for_each(|x| *x /= c);
        out
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
    fn push_components(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.as_slice());
    }
    fn from_components(_n: usize, c: &[f64]) -> Result<Self> {
        Ok(Vector::from_slice(c))
    }
    fn component_count(n: usize) -> usize {
        n
    }
}

impl FieldValue for Matrix {
    const KIND: &'static str = "matrix";
    fn dim(&self) -> usize {
        Matrix::dim(self)
    }
    fn is_finite(&self) -> bool {
        Matrix::is_finite(self)
    }
    fn zero_like(&self) -> Self {
        Matrix::zeros(self.dim())
    }
    fn add_assign(&mut self, other: &Self) {
        *self = self.add(other);
    }
    fn scaled(&self, c: f64) -> Self {
        self.scale(c)
    }
    fn divided(&self, c: f64) -> Self {
        let n = self.dim();
        let mut out = *self;
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] /= c;
            }
        }
        out
    }
    fn magnitude(&self) -> f64 {
        op_norm(self)
    }
    fn push_components(&self, out: &mut Vec<f64>) {
        out.extend(self.to_row_major());
    }
    fn from_components(n: usize, c: &[f64]) -> Result<Self> {
        Matrix::from_row_major(n, c)
    }
    fn component_count(n: usize) -> usize {
        n * n
    }
}

/// Piecewise-constant function on the finest cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<V> {
    mesh: Mesh,
    values: Vec<V>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub d: usize,
    #[serde(rename = "L")]
    pub depth: u32,
    pub side: f64,
    pub kind: String,
    pub n: usize,
}

impl<V: FieldValue> Field<V> {
    pub fn new(mesh: Mesh, values: Vec<V>) -> Result<Self> {
        if values.len() != mesh.cell_count() {
            return Err(Error::DimensionMismatch { expected: mesh.cell_count(), got: values.len() });
        }
        let n = values[0].dim();
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(i));
            }
            if v.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, got: v.dim() });
            }
        }
        Ok(Self { mesh, values })
    }

    pub fn from_fn(mesh: Mesh, f: impl FnMut(usize) -> V) -> Result<Self> {
        Self::new(mesh, (0..mesh.cell_count()).map(f).collect())
    }

    pub fn constant(mesh: Mesh, v: V) -> Self {
        Self { mesh, values: vec![v; mesh.cell_count()] }
    }

    #[inline]
    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    #[inline]
    pub fn values(&self) -> &[V] {
        &self.values
    }

    #[inline]
    pub fn get(&self, cell: usize) -> &V {
        &self.values[cell]
    }

    pub fn value_dim(&self) -> usize {
        self.values[0].dim()
    }

    pub fn map<U: FieldValue>(&self, f: impl FnMut(&V) -> U) -> Field<U> {
        Field { mesh: self.mesh, values: self.values.iter().map(f).collect() }
    }

    /// Pointwise norms.
    pub fn magnitude(&self) -> Field<f64> {
        self.map(|v| v.magnitude())
    }

    pub fn scale(&self, c: f64) -> Self {
        Field { mesh: self.mesh, values: self.values.iter().map(|v| v.scaled(c)).collect() }
    }

    /// Mean over the cells of `cube`, summed in cell order.
    pub fn average(&self, cube: &Cube) -> Result<V> {
        let b = self.mesh.cube_box(cube);
        if b.is_empty() {
            return Err(Error::EmptyCube(*cube));
        }
        let mut acc = self.values[0].zero_like();
        for c in b.cells() {
            acc.add_assign(&self.values[c]);
        }
        Ok(acc.divided(b.len() as f64))
    }

    /// `∫ |v|` over the root.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.magnitude()).sum::<f64>() * self.mesh.cell_volume()
    }

    pub fn header(&self) -> FieldHeader {
        FieldHeader {
            d: self.mesh.d,
            depth: self.mesh.depth,
            side: self.mesh.side,
            kind: V::KIND.to_string(),
            n: self.value_dim(),
        }
    }

    /// CSV: a `# {json header}` line, a column header, then one row per cell.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header = self.header();
        writeln!(w, "# {}", serde_json::to_string(&header)?)?;
        let k = V::component_count(header.n);
        let cols: Vec<String> = (0..k).map(|i| format!("v{i}")).collect();
        writeln!(w, "cell,{}", cols.join(","))?;
        let mut buf = Vec::with_capacity(k);
        for (i, v) in self.values.iter().enumerate() {
            buf.clear();
            v.push_components(&mut buf);
            write!(w, "{i}")?;
            for x in &buf {
                write!(w, ",{x:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Format("empty file".into()))??;
        let json = first
            .strip_prefix("# ")
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header: FieldHeader = serde_json::from_str(json)?;
        let mesh = Self::check_header(&header)?;
        lines.next().ok_or_else(|| Error::Format("missing column header".into()))??;
        let k = V::component_count(header.n);
        let mut values = Vec::with_capacity(mesh.cell_count());
        let mut comps = Vec::with_capacity(k);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(',');
            let idx: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad cell index on row {i}")))?;
            if idx != i {
                return Err(Error::Format(format!("row {i} carries cell index {idx}")));
            }
            comps.clear();
            for s in it {
                comps.push(s.parse::<f64>().map_err(|e| Error::Format(format!("row {i}: {e}")))?);
            }
            if comps.len() != k {
                return Err(Error::Format(format!("row {i} has {} components", comps.len())));
            }
            values.push(V::from_components(header.n, &comps)?);
        }
        Self::new(mesh, values)
    }

    /// Binary: the JSON header on one line, then little-endian `f64`s.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", serde_json::to_string(&self.header())?)?;
        let mut buf = Vec::new();
        for v in &self.values {
            buf.clear();
            v.push_components(&mut buf);
            for x in &buf {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl BufRead) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: FieldHeader = serde_json::from_str(line.trim_end())?;
        let mesh = Self::check_header(&header)?;
        let k = V::component_count(header.n);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != mesh.cell_count() * k * 8 {
            return Err(Error::Format(format!("payload holds {} bytes", bytes.len())));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let values = flat
            .chunks_exact(k)
            .map(|c| V::from_components(header.n, c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(mesh, values)
    }

    fn check_header(h: &FieldHeader) -> Result<Mesh> {
        if h.kind != V::KIND {
            return Err(Error::Format(format!("expected a {} field, found {}", V::KIND, h.kind)));
        }
        if !(1..=MAX_DIM).contains(&h.n) {
            return Err(Error::UnsupportedMatrixDim(h.n));
        }
        Mesh::new(h.d, h.depth, h.side)
    }
}

impl Field<f64> {
    /// `∫ v` over the root.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.mesh.cell_volume()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Cube mean of a scalar field, without the `Result` wrapper; the cube
    /// must be nonempty.
    #[inline]
    pub fn mean_over(&self, b: &CellBox) -> f64 {
        let mut s = 0.0;
        for row in b.rows() {
            for v in &self.values[row] {
                s += v;
            }
        }
        s / b.len() as f64
    }
}

/// A cube of a sparse family with its owned set `E_Q`.
#[derive(Clone, Debug)]
pub struct FamilyMember {
    pub cube: Cube,
    pub parent: Option<usize>,
    /// Finest cells forming `E_Q`, ascending.
    pub e_cells: Vec<u32>,
    /// Reducing matrix attached by the stopping-time construction.
    pub reducing: Option<SpdMatrix>,
}

#[derive(Clone, Debug)]
pub struct SparseFamily {
    pub mesh: Mesh,
    pub members: Vec<FamilyMember>,
    /// Fingerprint of the weight whose reducing matrices are attached.
    pub weight_fingerprint: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum SparseViolation {
    /// An `E_Q` cell lies outside `Q`.
    OutsideCube { member: usize, cell: usize },
    /// Two `E` sets share a cell.
    Overlap { first: usize, second: usize, cell: usize },
    /// `|E_Q| < η|Q|`.
    TooSmall { member: usize, e_cells: usize, q_cells: usize },
}

#[derive(Clone, Debug, Serialize)]
pub struct SparseReport {
    pub ok: bool,
    pub eta: f64,
    /// Smallest `|E_Q| / |Q|` over the family.
    pub min_ratio: f64,
    pub violations: Vec<SparseViolation>,
}

/// Exact Carleson ratio `Σ_{P ⊆ Q} |P| / |Q|`, kept as integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CarlesonRatio {
    pub member: usize,
    pub covered_cells: u64,
    pub cube_cells: u64,
}

impl CarlesonRatio {
    pub fn value(&self) -> f64 {
        self.covered_cells as f64 / self.cube_cells as f64
    }

    /// Exact test `ratio ≤ num/den`.
    pub fn at_most(&self, num: u64, den: u64) -> bool {
        self.covered_cells as u128 * den as u128 <= num as u128 * self.cube_cells as u128
    }
}

#[derive(Serialize)]
struct MemberRecord {
    grid: usize,
    level: u32,
    coords: Vec<i64>,
    parent_index: Option<usize>,
    #[serde(rename = "E_cell_count")]
    e_cell_count: usize,
}

impl SparseFamily {
    pub fn new(mesh: Mesh) -> Self {
        Self { mesh, members: Vec::new(), weight_fingerprint: None }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// JSON list of `{grid, level, coords, parent_index, E_cell_count}`.
    pub fn to_json(&self) -> Result<String> {
        let d = self.mesh.dim();
        let recs: Vec<MemberRecord> = self
            .members
            .iter()
            .map(|m| MemberRecord {
                grid: m.cube.grid,
                level: m.cube.level,
                coords: m.cube.coords[..d].to_vec(),
                parent_index: m.parent,
                e_cell_count: m.e_cells.len(),
            })
            .collect();
        Ok(serde_json::to_string(&recs)?)
    }
}

/// Worst Carleson ratio over the family (cubes of different grids never
/// count as nested).
pub fn carleson_ratio(family: &SparseFamily) -> Option<CarlesonRatio> {
    let mesh = &family.mesh;
    let boxes: Vec<CellBox> = family.members.iter().map(|m| mesh.cube_box(&m.cube)).collect();
    let mut order: Vec<usize> = (0..family.len()).collect();
    order.sort_by_key(|&i| (family.members[i].cube.grid, family.members[i].cube.level));
    let mut worst: Option<CarlesonRatio> = None;
    for (pos, &q) in order.iter().enumerate() {
        let cq = &family.members[q].cube;
        // Candidates share the grid and sit at the same or finer level;
        // same-level members contain Q only if they are Q itself.
        let mut covered = 0u64;
        let start = order[..pos]
            .iter()
            .rposition(|&i| {
                let c = &family.members[i].cube;
                c.grid != cq.grid || c.level < cq.level
            })
            .map_or(0, |p| p + 1);
        for &p in &order[start..] {
            let cp = &family.members[p].cube;
            if cp.grid != cq.grid {
                break;
            }
            if boxes[q].contains_box(&boxes[p]) {
                covered += boxes[p].len() as u64;
            }
        }
        let r = CarlesonRatio { member: q, covered_cells: covered, cube_cells: boxes[q].len() as u64 };
        let worse = match &worst {
            None => true,
            Some(w) => {
                (r.covered_cells as u128 * w.cube_cells as u128)
                    > (w.covered_cells as u128 * r.cube_cells as u128)
            }
        };
        if worse {
            worst = Some(r);
        }
    }
    worst
}

pub fn carleson_constant(family: &SparseFamily) -> f64 {
    carleson_ratio(family).map_or(0.0, |r| r.value())
}

/// Checks containment, disjointness and the `|E_Q| ≥ η|Q|` bound cell by cell.
pub fn certify_sparse(family: &SparseFamily, eta: f64) -> SparseReport {
    let mesh = &family.mesh;
    let mut owner: Vec<Option<u32>> = vec![None; mesh.cell_count()];
    let mut violations = Vec::new();
    let mut min_ratio = f64::INFINITY;
    for (i, m) in family.members.iter().enumerate() {
        let b = mesh.cube_box(&m.cube);
        for &c in &m.e_cells {
            let c = c as usize;
            if !b.contains_cell(c) {
                violations.push(SparseViolation::OutsideCube { member: i, cell: c });
            }
            match owner[c] {
                Some(prev) => violations.push(SparseViolation::Overlap {
                    first: prev as usize,
                    second: i,
                    cell: c,
                }),
                None => owner[c] = Some(i as u32),
            }
        }
        let (e, q) = (m.e_cells.len(), b.len());
        min_ratio = min_ratio.min(e as f64 / q as f64);
        if (e as f64) < eta * q as f64 {
            violations.push(SparseViolation::TooSmall { member: i, e_cells: e, q_cells: q });
        }
    }
    SparseReport { ok: violations.is_empty(), eta, min_ratio, violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mesh1(depth: u32) -> Mesh {
        Mesh::new(1, depth, 1.0).unwrap()
    }

    #[test]
    fn grid_counts() {
        assert_eq!(mesh1(4).shifted_grids().len(), 3);
        let m2 = Mesh::new(2, 3, 1.0).unwrap();
        assert_eq!(m2.shifted_grids().len(), 9);
        assert_eq!(m2.shifted_grids()[5].shift, vec![2, 1]);
        assert_eq!(m2.shifted_grids()[0].offset_at(3), vec![0.0, 0.0]);
    }

    #[test]
    fn grid_zero_is_classical() {
        let m = mesh1(5);
        for k in 0..=5u32 {
            let cubes = m.cubes_at(0, k);
            assert_eq!(cubes.len(), 1 << k);
            for (i, c) in cubes.iter().enumerate() {
                let width = 1usize << (5 - k);
                assert_eq!(m.cube_box(c).ranges[0], i * width..(i + 1) * width);
            }
        }
    }

    #[test]
    fn level_cubes_partition_root() {
        for mesh in [mesh1(6), Mesh::new(2, 4, 2.0).unwrap()] {
            for g in 0..mesh.grid_count() {
                for k in 0..=mesh.depth() {
                    let mut seen = vec![0u8; mesh.cell_count()];
                    for c in mesh.cubes_at(g, k) {
                        let b = mesh.cube_box(&c);
                        assert!(!b.is_empty(), "{c:?}");
                        for cell in b.cells() {
                            seen[cell] += 1;
                            assert_eq!(mesh.cube_containing(cell, g, k), c);
                        }
                    }
                    assert!(seen.iter().all(|&s| s == 1), "grid {g} level {k}");
                }
            }
        }
    }

    #[test]
    fn finest_level_cubes_are_single_cells() {
        let m = Mesh::new(2, 3, 1.0).unwrap();
        for g in 0..9 {
            for c in m.cubes_at(g, 3) {
                assert_eq!(m.cube_cell_count(&c), 1);
            }
        }
    }

    #[test]
    fn cubes_nest_or_are_disjoint() {
        let m = mesh1(6);
        for g in 0..3 {
            let cubes: Vec<Cube> = (0..=6).flat_map(|k| m.cubes_at(g, k)).collect();
            for a in &cubes {
                let ba = m.cube_box(a);
                for b in &cubes {
                    let bb = m.cube_box(b);
                    let overlap = ba.ranges[0].start < bb.ranges[0].end
                        && bb.ranges[0].start < ba.ranges[0].end;
                    if overlap {
                        assert!(ba.contains_box(&bb) || bb.contains_box(&ba), "{a:?} {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn children_and_parent_agree() {
        let m = Mesh::new(2, 4, 1.0).unwrap();
        for c in m.all_cubes() {
            let b = m.cube_box(&c);
            let kids = m.children(&c);
            let total: usize = kids.iter().map(|k| m.cube_cell_count(k)).sum();
            if c.level < m.depth() {
                assert_eq!(total, b.len(), "{c:?}");
            }
            for k in kids {
                assert!(b.contains_box(&m.cube_box(&k)));
                assert_eq!(m.parent(&k), Some(c));
            }
        }
    }

    #[test]
    fn geometric_bounds_contain_cell_midpoints() {
        let m = mesh1(5);
        for c in m.all_cubes() {
            let (lo, hi) = m.geometric_bounds(&c)[0];
            for cell in m.cube_box(&c).cells() {
                let x = m.cell_midpoint(cell)[0];
                assert!(lo <= x && x < hi);
            }
            assert!((hi - lo - m.side_length(c.level)).abs() < 1e-15);
        }
    }

    #[test]
    fn approximate_dyadic_cube_is_itself() {
        let m = mesh1(6);
        let (c, ratio) = m.approximate_cube(&[0.25], 0.125).unwrap();
        assert_eq!(c, Cube { grid: 0, level: 3, coords: [2, 0] });
        assert_eq!(ratio, 1.0);
    }

    #[test]
    fn approximate_small_interval() {
        // Oracle: exhaustive search over the three grids for [0.3, 0.4).
        let m = mesh1(10);
        let (c, ratio) = m.approximate_cube(&[0.3], 0.1).unwrap();
        let (lo, hi) = m.geometric_bounds(&c)[0];
        assert!(lo <= 0.3 && 0.4 <= hi);
        assert!(hi - lo <= 0.6 + 1e-12);
        assert!(ratio <= 6.0);
        let mut best = f64::INFINITY;
        for g in 0..3 {
            for k in 0..=10 {
                for q in m.cubes_at(g, k) {
                    let (a, b) = m.geometric_bounds(&q)[0];
                    if a <= 0.3 && 0.4 <= b {
                        best = best.min(b - a);
                    }
                }
            }
        }
        assert_eq!(hi - lo, best);
    }

    #[test]
    fn approximate_rejects_escaping_cube() {
        let m = mesh1(4);
        assert!(matches!(m.approximate_cube(&[0.9], 0.2), Err(Error::CubeOutsideRoot)));
    }

    #[test]
    fn average_constant_and_half_indicator() {
        let m = mesh1(4);
        let f = Field::constant(m, 3.5);
        let root = Cube { grid: 0, level: 0, coords: [0, 0] };
        assert_eq!(f.average(&root).unwrap(), 3.5);
        let half = Field::from_fn(m, |c| if c < 8 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(half.average(&root).unwrap(), 0.5);
        let empty = Cube { grid: 0, level: 1, coords: [7, 0] };
        assert!(matches!(f.average(&empty), Err(Error::EmptyCube(_))));
    }

    #[test]
    fn average_matches_independent_resummation() {
        let m = Mesh::new(2, 5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Field::from_fn(m, |_| rng.gen_range(-1.0..1.0)).unwrap();
        for c in m.all_cubes().iter().step_by(7) {
            let [(x0, x1), (y0, y1)] = [m.geometric_bounds(c)[0], m.geometric_bounds(c)[1]];
            let mut s = 0.0f64;
            let mut k = 0usize;
            for cell in 0..m.cell_count() {
                let [x, y] = m.cell_midpoint(cell);
                if x0 <= x && x < x1 && y0 <= y && y < y1 {
                    s += f.values()[cell];
                    k += 1;
                }
            }
            let avg = f.average(c).unwrap();
            assert_eq!(k, m.cube_cell_count(c));
            assert!((avg - s / k as f64).abs() < 1e-13);
        }
    }

    #[test]
    fn level_index_matches_average() {
        let m = Mesh::new(2, 4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Field::from_fn(m, |_| rng.gen_range(0.0..1.0)).unwrap();
        for g in 0..9 {
            for k in 0..=4 {
                let idx = m.level_index(g, k);
                let means = idx.means(f.values());
                for (i, c) in idx.cubes.iter().enumerate() {
                    assert_eq!(idx.counts[i] as usize, m.cube_cell_count(c));
                    assert_eq!(means[i], f.average(c).unwrap());
                }
            }
        }
    }

    fn member(cube: Cube, mesh: &Mesh, e: Vec<u32>) -> FamilyMember {
        let _ = mesh;
        FamilyMember { cube, parent: None, e_cells: e, reducing: None }
    }

    #[test]
    fn carleson_of_disjoint_and_full_tree() {
        let m = mesh1(4);
        let mut fam = SparseFamily::new(m);
        for c in m.cubes_at(0, 2) {
            fam.members.push(member(c, &m, vec![]));
        }
        assert_eq!(carleson_constant(&fam), 1.0);

        let mut tree = SparseFamily::new(m);
        for k in 0..=3 {
            for c in m.cubes_at(0, k) {
                tree.members.push(member(c, &m, vec![]));
            }
        }
        assert_eq!(carleson_constant(&tree), 4.0);
    }

    #[test]
    fn certify_singleton_and_overlap() {
        let m = mesh1(3);
        let root = Cube { grid: 0, level: 0, coords: [0, 0] };
        let mut fam = SparseFamily::new(m);
        fam.members.push(member(root, &m, (0..8).collect()));
        assert!(certify_sparse(&fam, 1.0).ok);

        let left = Cube { grid: 0, level: 1, coords: [0, 0] };
        fam.members[0].e_cells = (0..6).collect();
        fam.members.push(member(left, &m, vec![2, 3]));
        let rep = certify_sparse(&fam, 0.6);
        assert!(!rep.ok);
        assert!(rep.violations.contains(&SparseViolation::Overlap { first: 0, second: 1, cell: 2 }));
        assert!(rep
            .violations
            .contains(&SparseViolation::TooSmall { member: 1, e_cells: 2, q_cells: 4 }));
    }

    #[test]
    fn field_csv_and_binary_round_trip() {
        let m = Mesh::new(2, 3, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Field::from_fn(m, |_| {
            let a = rng.gen_range(-1.0..1.0) * 1e-7;
            Matrix::from_rows(&[&[1.0 + a, a / 3.0], &[-0.0, std::f64::consts::PI]])
        })
        .unwrap();
        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        let back: Field<Matrix> = Field::read_csv(&csv[..]).unwrap();
        assert_eq!(back, f);
        let mut bin = Vec::new();
        f.write_binary(&mut bin).unwrap();
        let back: Field<Matrix> = Field::read_binary(&bin[..]).unwrap();
        assert_eq!(back, f);
        assert!(Field::<f64>::read_binary(&bin[..]).is_err());
    }
}
