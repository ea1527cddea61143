//! Uniform lattices over a box in three dimensions and the fields sampled on them.
//!
//! Nodes are addressed by a flat index with `i` varying fastest:
//! `idx = i + nx * (j + ny * k)`. Every node owns a cubic cell of side `h`
//! centred on it; quadratures treat the node value as the cell value.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Minimum number of nodes per axis.
pub const MIN_AXIS_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dims: [usize; 3],
    origin: Point,
    spacing: f64,
}

impl Grid {
    pub fn new(dims: [usize; 3], origin: Point, spacing: f64) -> Result<Self> {
        if dims.iter().any(|&d| d < MIN_AXIS_POINTS) {
            return Err(Error::InvalidGrid(format!(
                "every axis needs at least {MIN_AXIS_POINTS} points, got {dims:?}"
            )));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        let total = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or_else(|| Error::InvalidGrid(format!("{dims:?} exceeds the addressable range")))?;
        debug_assert!(total > 0);
        Ok(Self { dims, origin, spacing })
    }

    /// Cube `[lo, hi]^3` with `n` nodes per axis.
    pub fn cube(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(hi > lo) || n < 2 {
            return Err(Error::InvalidGrid(format!("bad cube [{lo}, {hi}] with {n} points")));
        }
        Self::new([n; 3], [lo; 3], (hi - lo) / (n - 1) as f64)
    }

    /// Box with corners `lo` and `hi` at spacing `h`. Each extent must be an
    /// integer multiple of `h` (to 1e-9 relative); anisotropic spacing is rejected.
    pub fn from_extent(lo: Point, hi: Point, h: f64) -> Result<Self> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let cells = (hi[a] - lo[a]) / h;
            let rounded = cells.round();
            if !(rounded >= 1.0) || (cells - rounded).abs() > 1e-9 * rounded.max(1.0) {
                return Err(Error::InvalidGrid(format!(
                    "extent {} on axis {a} is not a multiple of h = {h}",
                    hi[a] - lo[a]
                )));
            }
            dims[a] = rounded as usize + 1;
        }
        Self::new(dims, lo, h)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(3)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn point_ijk(&self, c: [usize; 3]) -> Point {
        let h = self.spacing;
        [self.origin[0] + h * c[0] as f64, self.origin[1] + h * c[1] as f64, self.origin[2] + h * c[2] as f64]
    }

    #[inline]
    pub fn point(&self, idx: usize) -> Point {
        self.point_ijk(self.coords(idx))
    }

    /// Index of the node offset by `d` from `c`, if it stays on the grid.
    #[inline]
    pub fn offset(&self, c: [usize; 3], d: [i64; 3]) -> Option<usize> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as i64 + d[a];
            if v < 0 || v >= self.dims[a] as i64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(self.index(out[0], out[1], out[2]))
    }

    /// Upper corner of the node box.
    pub fn upper(&self) -> Point {
        let h = self.spacing;
        [
            self.origin[0] + h * (self.dims[0] - 1) as f64,
            self.origin[1] + h * (self.dims[1] - 1) as f64,
            self.origin[2] + h * (self.dims[2] - 1) as f64,
        ]
    }

    pub fn center(&self) -> Point {
        let u = self.upper();
        [0.5 * (self.origin[0] + u[0]), 0.5 * (self.origin[1] + u[1]), 0.5 * (self.origin[2] + u[2])]
    }

    /// Half the diagonal of the node box.
    pub fn half_diameter(&self) -> f64 {
        let u = self.upper();
        0.5 * dist(&self.origin, &u)
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let c = self.coords(idx);
        (0..3).any(|a| c[a] == 0 || c[a] + 1 == self.dims[a])
    }

    /// Distance (in index units) from node `c` to the nearest box face.
    pub fn boundary_distance(&self, c: [usize; 3]) -> usize {
        (0..3).map(|a| c[a].min(self.dims[a] - 1 - c[a])).min().unwrap_or(0)
    }

    /// Euclidean distance from `x` to the boundary of the cell-extended box
    /// `[origin - h/2, upper + h/2]`; negative outside.
    pub fn distance_to_cell_box(&self, x: &Point) -> f64 {
        let u = self.upper();
        let half = 0.5 * self.spacing;
        (0..3).map(|a| (x[a] - (self.origin[a] - half)).min(u[a] + half - x[a])).fold(f64::INFINITY, f64::min)
    }

    /// Node nearest to `x`, if `x` lies inside the cell-extended box.
    pub fn nearest_index(&self, x: &Point) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let t = ((x[a] - self.origin[a]) / self.spacing).round();
            if t < 0.0 || t >= self.dims[a] as f64 {
                return None;
            }
            c[a] = t as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }

    /// Node located exactly at `x` (within 1e-9 h), if any.
    pub fn node_at(&self, x: &Point) -> Option<usize> {
        let idx = self.nearest_index(x)?;
        (dist(&self.point(idx), x) <= 1e-9 * self.spacing).then_some(idx)
    }

    pub fn contains(&self, x: &Point) -> bool {
        let u = self.upper();
        (0..3).all(|a| x[a] >= self.origin[a] - 1e-12 && x[a] <= u[a] + 1e-12)
    }

    /// The inner sub-box spanning the middle half of each axis.
    pub fn inner_half_box(&self) -> BoxRegion {
        let c = self.center();
        let u = self.upper();
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            let q = 0.25 * (u[a] - self.origin[a]);
            lo[a] = c[a] - q;
            hi[a] = c[a] + q;
        }
        BoxRegion { lo, hi }
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Axis-aligned box, closed on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: Point,
    pub hi: Point,
}

impl BoxRegion {
    pub fn new(lo: Point, hi: Point) -> Self {
        Self { lo, hi }
    }

    pub fn cube(center: Point, half_side: f64) -> Self {
        Self {
            lo: [center[0] - half_side, center[1] - half_side, center[2] - half_side],
            hi: [center[0] + half_side, center[1] + half_side, center[2] + half_side],
        }
    }

    pub fn contains(&self, x: &Point) -> bool {
        (0..3).all(|a| x[a] >= self.lo[a] - 1e-12 && x[a] <= self.hi[a] + 1e-12)
    }

    pub fn contains_box(&self, other: &BoxRegion) -> bool {
        self.contains(&other.lo) && self.contains(&other.hi)
    }

    /// Euclidean distance between two boxes (0 when they touch or overlap).
    pub fn distance_to(&self, other: &BoxRegion) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let gap = (other.lo[a] - self.hi[a]).max(self.lo[a] - other.hi[a]).max(0.0);
            s += gap * gap;
        }
        s.sqrt()
    }

    pub fn nodes(&self, grid: &Grid) -> Vec<usize> {
        (0..grid.len()).filter(|&i| self.contains(&grid.point(i))).collect()
    }
}

#[inline]
pub fn dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[inline]
pub fn norm(a: &Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Real values on every node of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        assert!(c.is_finite());
        Self { values: vec![c; grid.len()], grid: grid.clone() }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(Point) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(grid.point(i))).collect();
        Self::new(grid.clone(), values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    /// Riemann sum with one cell volume per node.
    pub fn integral(&self) -> f64 {
        crate::stats::neumaier_sum(self.values.iter().copied()) * self.grid.cell_volume()
    }
}

/// Three real components on every node.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    values: [Vec<f64>; 3],
}

impl VectorField {
    pub fn new(grid: Grid, values: [Vec<f64>; 3]) -> Result<Self> {
        for comp in &values {
            if comp.len() != grid.len() {
                return Err(Error::LengthMismatch { expected: grid.len(), got: comp.len() });
            }
            if let Some(i) = comp.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        let z = vec![0.0; grid.len()];
        Self { grid: grid.clone(), values: [z.clone(), z.clone(), z] }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(Point) -> [f64; 3]) -> Result<Self> {
        let mut values =
            [Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len())];
        for i in 0..grid.len() {
            let v = f(grid.point(i));
            for a in 0..3 {
                values[a].push(v[a]);
            }
        }
        Self::new(grid.clone(), values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.values[axis]
    }

    #[inline]
    pub fn get(&self, idx: usize) -> [f64; 3] {
        [self.values[0][idx], self.values[1][idx], self.values[2][idx]]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|c| c.iter().all(|&v| v == 0.0))
    }

    /// Pointwise sum of two vector fields on the same grid.
    pub fn add(&self, other: &VectorField) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        let values = [0, 1, 2].map(|a| self.values[a].iter().zip(&other.values[a]).map(|(x, y)| x + y).collect());
        Self::new(self.grid.clone(), values)
    }
}

/// Complex values on every node (solutions and Green's function columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    grid: Grid,
    values: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(grid: Grid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self { grid: grid.clone(), values: vec![Complex64::new(0.0, 0.0); grid.len()] }
    }

    pub fn from_real(field: &ScalarField) -> Self {
        Self { grid: field.grid.clone(), values: field.values.iter().map(|&v| Complex64::new(v, 0.0)).collect() }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    #[inline]
    pub fn get(&self, idx: usize) -> Complex64 {
        self.values[idx]
    }

    pub fn abs(&self) -> ScalarField {
        ScalarField { grid: self.grid.clone(), values: self.values.iter().map(|v| v.norm()).collect() }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { grid: self.grid.clone(), values: self.values.iter().map(|v| v * s).collect() }
    }

    pub fn norm_l2(&self) -> f64 {
        (crate::stats::neumaier_sum(self.values.iter().map(|v| v.norm_sqr())) * self.grid.cell_volume()).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_real(&self) -> bool {
        self.values.iter().all(|v| v.im == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_axes_and_bad_spacing() {
        assert!(Grid::new([3, 4, 4], [0.0; 3], 1.0).is_err());
        assert!(Grid::new([4, 4, 4], [0.0; 3], 0.0).is_err());
        assert!(Grid::new([4, 4, 4], [0.0; 3], f64::NAN).is_err());
        assert!(Grid::new([4, 4, 4], [0.0; 3], 0.5).is_ok());
    }

    #[test]
    fn rejects_overflowing_point_counts() {
        assert!(Grid::new([1 << 12, 1 << 12, 1 << 12], [0.0; 3], 1.0).is_err());
    }

    #[test]
    fn index_point_bijection() {
        let g = Grid::new([5, 6, 7], [-1.0, 0.5, 2.0], 0.25).unwrap();
        for idx in 0..g.len() {
            let c = g.coords(idx);
            assert_eq!(g.index(c[0], c[1], c[2]), idx);
            assert_eq!(g.nearest_index(&g.point(idx)), Some(idx));
        }
        assert_eq!(g.point(g.index(2, 3, 4)), [-0.5, 1.25, 3.0]);
    }

    #[test]
    fn from_extent_requires_integer_cells() {
        let g = Grid::from_extent([-2.0; 3], [2.0; 3], 0.125).unwrap();
        assert_eq!(g.dims(), [33; 3]);
        assert!(Grid::from_extent([0.0; 3], [1.0; 3], 0.3).is_err());
    }

    #[test]
    fn field_invariants() {
        let g = Grid::cube(0.0, 1.0, 4).unwrap();
        assert!(ScalarField::new(g.clone(), vec![0.0; 63]).is_err());
        let mut v = vec![0.0; 64];
        v[7] = f64::INFINITY;
        assert_eq!(ScalarField::new(g.clone(), v), Err(Error::NonFinite(7)));
        let f = ScalarField::constant(&g, 2.0);
        assert!((f.integral() - 2.0 * 64.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn box_distance() {
        let a = BoxRegion::cube([0.0; 3], 0.5);
        let b = BoxRegion::cube([2.0, 0.0, 0.0], 0.5);
        assert!((a.distance_to(&b) - 1.0).abs() < 1e-15);
        assert_eq!(a.distance_to(&a), 0.0);
    }
}
