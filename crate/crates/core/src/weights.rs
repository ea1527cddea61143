//! Ball integrals of a weight, the maximal function `m(x, w)` and reverse
//! Hölder diagnostics.
//!
//! `Φ(r) = r^{-1} ∫_{B(x,r)} w` in three dimensions and `m(x, w) = 1/r̂` with
//! `r̂ = sup{r : Φ(r) ≤ 1}`.
//!
//! Grid quadrature gives every cell a covered fraction that ramps linearly
//! from 0 to 1 as the distance `ρ` from `x` to the node crosses a shell of
//! width `2s` around a curvature-corrected radius `G(r)`. The ramp keeps `Φ`
//! continuous and increasing in `r` (so the root can be refined to machine
//! precision) and its mean fractional volume is `(4π/3) r^3` to second order.
//! The cell that contains `x` uses the exact small-ball fraction instead.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dist, Grid, Point, ScalarField};
use crate::par;
use crate::potential::PotentialKind;
use crate::stats::gauss_legendre;

/// Number of log-spaced radii in the bracketing scan.
pub const SCAN_RADII: usize = 64;
/// Half-width of the fractional shell, in units of `h`.
const RAMP_HALF_WIDTH: f64 = 0.5;
/// Relative bracket width at which the root refinement stops.
const ROOT_REL_TOL: f64 = 1e-13;
/// `∫ 1/|z|` over the unit cube centred at the origin.
pub const CUBE_INVERSE_DISTANCE: f64 = 2.380_077_363_979_553_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallIntegral {
    pub value: f64,
    /// The ball reaches outside the domain, so the integral is clipped.
    pub truncated: bool,
}

/// Anything whose integral over a ball can be evaluated.
pub trait Weight: Sync {
    fn ball_integral(&self, x: &Point, r: f64) -> Result<BallIntegral>;
    /// Smallest and largest radius of the bracketing scan.
    fn scan_range(&self) -> (f64, f64);
}

#[inline]
fn ramp_shift(r: f64, s: f64) -> f64 {
    r - s * s / (3.0 * r)
}

/// Covered fraction of a cell whose node lies at distance `rho > 0`.
#[inline]
fn ramp_fraction(rho: f64, g: f64, s: f64) -> f64 {
    ((g - rho + s) / (2.0 * s)).clamp(0.0, 1.0)
}

/// Covered fraction of the cell whose node is the ball centre.
#[inline]
fn centre_fraction(r: f64, h: f64) -> f64 {
    let q = r / h;
    (4.0 * PI / 3.0 * q * q * q).min(1.0)
}

impl Weight for ScalarField {
    fn ball_integral(&self, x: &Point, r: f64) -> Result<BallIntegral> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::NonpositiveRadius(r));
        }
        let grid = self.grid();
        let edge = grid.distance_to_cell_box(x);
        if edge < -r {
            return Err(Error::EmptyIntersection);
        }
        let h = grid.spacing();
        let s = RAMP_HALF_WIDTH * h;
        let g = ramp_shift(r, s);
        let reach = (g + s).max(0.0);
        let o = grid.origin();
        let dims = grid.dims();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = ((x[a] - reach - o[a]) / h).ceil().max(0.0);
            let u = ((x[a] + reach - o[a]) / h).floor().min((dims[a] - 1) as f64);
            if u < l {
                return Ok(BallIntegral { value: 0.0, truncated: edge < r });
            }
            lo[a] = l as usize;
            hi[a] = u as usize;
        }
        let vals = self.values();
        let mut acc = 0.0;
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let p = grid.point_ijk([i, j, k]);
                    let rho = dist(&p, x);
                    let frac = if rho <= 1e-9 * h { centre_fraction(r, h) } else { ramp_fraction(rho, g, s) };
                    if frac > 0.0 {
                        acc += frac * vals[grid.index(i, j, k)];
                    }
                }
            }
        }
        Ok(BallIntegral { value: acc * grid.cell_volume(), truncated: edge < r })
    }

    fn scan_range(&self) -> (f64, f64) {
        (0.5 * self.grid().spacing(), self.grid().half_diameter())
    }
}

/// A closed-form potential integrated over whole balls, with no domain clipping.
#[derive(Clone, Debug)]
pub struct ModelWeight<'a> {
    pub kind: &'a PotentialKind,
    pub r_min: f64,
    pub r_max: f64,
}

impl<'a> ModelWeight<'a> {
    /// Scan range matched to `grid`, for comparison with field quadrature.
    pub fn on_grid(kind: &'a PotentialKind, grid: &Grid) -> Self {
        Self { kind, r_min: 0.5 * grid.spacing(), r_max: grid.half_diameter() }
    }
}

const SPH_RADIAL: usize = 24;
const SPH_POLAR: usize = 24;
const SPH_AZIMUTH: usize = 48;

impl Weight for ModelWeight<'_> {
    fn ball_integral(&self, x: &Point, r: f64) -> Result<BallIntegral> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::NonpositiveRadius(r));
        }
        if let Some(v) = self.kind.exact_ball_integral(x, r) {
            return Ok(BallIntegral { value: v, truncated: false });
        }
        // Product rule: Gauss–Legendre in radius and polar cosine, trapezoid in azimuth.
        let (xr, wr) = gauss_legendre(SPH_RADIAL);
        let (xm, wm) = gauss_legendre(SPH_POLAR);
        let dphi = 2.0 * PI / SPH_AZIMUTH as f64;
        let mut acc = 0.0;
        for (a, wa) in xr.iter().zip(&wr) {
            let rad = 0.5 * r * (a + 1.0);
            let mut shell = 0.0;
            for (mu, wmu) in xm.iter().zip(&wm) {
                let st = (1.0 - mu * mu).sqrt();
                for k in 0..SPH_AZIMUTH {
                    let phi = (k as f64 + 0.5) * dphi;
                    let p = [x[0] + rad * st * phi.cos(), x[1] + rad * st * phi.sin(), x[2] + rad * mu];
                    let v = self.kind.eval(&p).ok_or(Error::OutOfDomain(p[0], p[1], p[2]))?;
                    shell += wmu * v;
                }
            }
            acc += wa * rad * rad * shell * dphi;
        }
        Ok(BallIntegral { value: 0.5 * r * acc, truncated: false })
    }

    fn scan_range(&self) -> (f64, f64) {
        (self.r_min, self.r_max)
    }
}

/// `Φ(r) = r^{-1} ∫_{B(x,r)} w`.
pub fn phi(w: &dyn Weight, x: &Point, r: f64) -> Result<f64> {
    Ok(w.ball_integral(x, r)?.value / r)
}

/// Result of the maximal-function root search at one point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaximalPoint {
    pub m: f64,
    pub rhat: f64,
    /// `|Φ(r̂) − 1|` as evaluated by the same quadrature.
    pub residual: f64,
    /// The `r̂`-ball reaches outside the box, so `Φ` was clipped there.
    pub truncated: bool,
}

fn scan_radii(r_min: f64, r_max: f64) -> Vec<f64> {
    let ratio = (r_max / r_min).ln() / (SCAN_RADII - 1) as f64;
    let mut radii: Vec<f64> = (0..SCAN_RADII).map(|k| r_min * (ratio * k as f64).exp()).collect();
    radii[SCAN_RADII - 1] = r_max;
    radii
}

/// Moves `r` by a few ulps so that `(1/r) * r == 1` holds exactly.
fn exact_reciprocal_pair(r: f64) -> (f64, f64) {
    let mut cand = r;
    for step in 0..64 {
        let m = 1.0 / cand;
        if m * cand == 1.0 {
            return (m, cand);
        }
        let k = (step / 2 + 1) as u64;
        let bits = r.to_bits();
        cand = f64::from_bits(if step % 2 == 0 { bits + k } else { bits - k });
    }
    (1.0 / r, r)
}

/// Illinois false position for the root of `g` in `[a, b]` with `g(a) <= 0 < g(b)`.
fn refine_root(mut a: f64, mut ga: f64, mut b: f64, mut gb: f64, g: impl Fn(f64) -> f64) -> f64 {
    let mut side = 0i8;
    for _ in 0..200 {
        if b - a <= ROOT_REL_TOL * b {
            break;
        }
        let mut c = (a * gb - b * ga) / (gb - ga);
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let gc = g(c);
        if gc == 0.0 {
            return c;
        }
        if gc < 0.0 {
            a = c;
            ga = gc;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        } else {
            b = c;
            gb = gc;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        }
        if gc.abs() < 1e-14 {
            return c;
        }
    }
    if g(a).abs() <= g(b).abs() {
        a
    } else {
        b
    }
}

/// `m(x, w)` by the largest scanned radius with `Φ ≤ 1`, refined in the
/// bracket above it.
pub fn maximal_function(w: &dyn Weight, x: &Point) -> Result<MaximalPoint> {
    let (r_min, r_max) = w.scan_range();
    let radii = scan_radii(r_min, r_max);
    let mut vals = Vec::with_capacity(SCAN_RADII);
    let mut last_ok = None;
    for (k, &r) in radii.iter().enumerate() {
        let integral = w.ball_integral(x, r)?.value;
        vals.push(integral / r);
        if integral / r <= 1.0 {
            last_ok = Some(k);
        } else if integral > r_max {
            break;
        }
    }
    let root = |a: f64, pa: f64, b: f64, pb: f64| {
        refine_root(a, pa - 1.0, b, pb - 1.0, |r| {
            w.ball_integral(x, r).map(|bi| bi.value / r - 1.0).unwrap_or(f64::NAN)
        })
    };
    let rhat = match last_ok {
        Some(k) if k + 1 == SCAN_RADII => {
            if *vals.last().expect("scan is non-empty") == 0.0 {
                return Err(Error::DegenerateWeight);
            }
            return Err(Error::NoCrossing);
        }
        Some(k) => root(radii[k], vals[k], radii[k + 1], vals[k + 1]),
        None => {
            // Φ already exceeds 1 at the smallest radius: shrink geometrically.
            let mut b = radii[0];
            let mut pb = vals[0];
            loop {
                let a = 0.5 * b;
                if a < 1e-12 * radii[0] {
                    return Err(Error::InvalidParameter("weight too singular to bracket".into()));
                }
                let pa = phi(w, x, a)?;
                if pa <= 1.0 {
                    break root(a, pa, b, pb);
                }
                b = a;
                pb = pa;
            }
        }
    };
    let (m, rhat) = exact_reciprocal_pair(rhat);
    let bi = w.ball_integral(x, rhat)?;
    Ok(MaximalPoint { m, rhat, residual: (bi.value / rhat - 1.0).abs(), truncated: bi.truncated })
}

/// Per-node outcome flags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointFlags {
    /// A crossing `Φ = 1` was found and refined.
    pub converged: bool,
    /// No crossing up to the box half-diameter; `m` is set to its reciprocal.
    pub clipped_at_box: bool,
    /// The `r̂`-ball reaches outside the box.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaximalField {
    pub m_values: ScalarField,
    pub rhat_values: ScalarField,
    pub flags: Vec<PointFlags>,
    /// `|Φ(r̂) − 1|` per node (0 where not converged).
    pub residuals: Vec<f64>,
}

/// Summary numbers for reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaximalSummary {
    pub points: usize,
    pub m_min: f64,
    pub m_max: f64,
    pub converged: usize,
    pub clipped_at_box: usize,
    pub truncated: usize,
    pub max_residual: f64,
}

impl MaximalField {
    pub fn grid(&self) -> &Grid {
        self.m_values.grid()
    }

    pub fn m(&self, idx: usize) -> f64 {
        self.m_values.get(idx)
    }

    /// Field of a weight too small for the box everywhere: every node is
    /// clipped, with `m` the reciprocal of the box half-diameter. This is the
    /// degenerate branch used for `w ≡ 0`.
    pub fn all_clipped(grid: &Grid) -> Self {
        let r_max = grid.half_diameter();
        let n = grid.len();
        Self {
            m_values: ScalarField::constant(grid, 1.0 / r_max),
            rhat_values: ScalarField::constant(grid, r_max),
            flags: vec![PointFlags { converged: false, clipped_at_box: true, truncated: true }; n],
            residuals: vec![0.0; n],
        }
    }

    pub fn unconverged_count(&self) -> usize {
        self.flags.iter().filter(|f| !f.converged).count()
    }

    pub fn summary(&self) -> MaximalSummary {
        MaximalSummary {
            points: self.flags.len(),
            m_min: self.m_values.min(),
            m_max: self.m_values.max(),
            converged: self.flags.iter().filter(|f| f.converged).count(),
            clipped_at_box: self.flags.iter().filter(|f| f.clipped_at_box).count(),
            truncated: self.flags.iter().filter(|f| f.truncated).count(),
            max_residual: self.residuals.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// `ci ± dx`, listing `ci` once when `dx = 0`.
fn mirrored(ci: i64, dx: i64) -> impl Iterator<Item = i64> {
    std::iter::once(ci - dx).chain((dx != 0).then_some(ci + dx))
}

/// Node-centred maximal-function engine over one weight field.
///
/// Ball sums run row by row: cells covered in full come from per-row prefix
/// sums and only the thin shell of partial cells is visited one by one.
pub struct MaximalEngine<'a> {
    w: &'a ScalarField,
    prefix: Vec<f64>,
    radii: Vec<f64>,
    s: f64,
}

impl<'a> MaximalEngine<'a> {
    pub fn new(w: &'a ScalarField) -> Self {
        let grid = w.grid();
        let nx = grid.dims()[0];
        let rows = grid.len() / nx;
        let mut prefix = Vec::with_capacity(rows * (nx + 1));
        for row in w.values().chunks(nx) {
            let mut acc = 0.0;
            prefix.push(0.0);
            for v in row {
                acc += v;
                prefix.push(acc);
            }
        }
        let h = grid.spacing();
        Self { w, prefix, radii: scan_radii(0.5 * h, grid.half_diameter()), s: RAMP_HALF_WIDTH * h }
    }

    /// Visits every row that meets the ball of radius `outer` about node `c`:
    /// `f(row_start_index, dx_limit_inner, dx_limit_outer, b2, is_centre_row)`.
    fn for_rows(&self, c: [usize; 3], inner: f64, outer: f64, mut f: impl FnMut(usize, i64, i64, f64, bool)) {
        let grid = self.w.grid();
        let dims = grid.dims();
        let h = grid.spacing();
        let reach = (outer / h).floor() as i64;
        let (ck, cj) = (c[2] as i64, c[1] as i64);
        let o2 = outer * outer;
        let i2 = inner * inner;
        for dk in (-reach).max(-ck)..=reach.min(dims[2] as i64 - 1 - ck) {
            for dj in (-reach).max(-cj)..=reach.min(dims[1] as i64 - 1 - cj) {
                let b2 = ((dj * dj + dk * dk) as f64) * h * h;
                if b2 >= o2 {
                    continue;
                }
                let x_out = ((o2 - b2).sqrt() / h).floor() as i64;
                let x_in = if inner > 0.0 && b2 <= i2 { ((i2 - b2).sqrt() / h).floor() as i64 } else { -1 };
                let row = grid.index(0, (cj + dj) as usize, (ck + dk) as usize);
                f(row, x_in.min(x_out), x_out, b2, dj == 0 && dk == 0);
            }
        }
    }

    /// `Σ frac·w` over the ball of radius `r` about node `idx` (no cell volume).
    fn ball_sum(&self, idx: usize, r: f64) -> f64 {
        let grid = self.w.grid();
        let h = grid.spacing();
        let nx = grid.dims()[0] as i64;
        let s = self.s;
        let g = ramp_shift(r, s);
        let c = grid.coords(idx);
        let ci = c[0] as i64;
        let vals = self.w.values();
        let w0 = vals[idx];
        let mut acc = w0 * centre_fraction(r, h);
        if g + s <= 0.0 {
            return acc;
        }
        self.for_rows(c, g - s, g + s, |row, x_in, x_out, b2, centre| {
            let prow = (row / nx as usize) * (nx as usize + 1);
            if x_in >= 0 {
                let a = (ci - x_in).max(0) as usize;
                let b = (ci + x_in).min(nx - 1) as usize;
                acc += self.prefix[prow + b + 1] - self.prefix[prow + a];
                if centre {
                    acc -= w0;
                }
            }
            for dx in (x_in + 1).max(if centre { 1 } else { 0 })..=x_out {
                let rho = ((dx * dx) as f64 * h * h + b2).sqrt();
                let frac = ramp_fraction(rho, g, s);
                if frac > 0.0 {
                    for i in mirrored(ci, dx) {
                        if (0..nx).contains(&i) {
                            acc += frac * vals[row + i as usize];
                        }
                    }
                }
            }
        });
        acc
    }

    /// Φ on `[r_a, r_b]` through a sorted list of the cells that can be
    /// partial there; each evaluation is then a binary search.
    fn bracket(&self, idx: usize, r_a: f64, r_b: f64) -> impl Fn(f64) -> f64 + '_ {
        let grid = self.w.grid();
        let h = grid.spacing();
        let vol = grid.cell_volume();
        let nx = grid.dims()[0] as i64;
        let s = self.s;
        let inner = ramp_shift(r_a, s) - s;
        let outer = ramp_shift(r_b, s) + s;
        let c = grid.coords(idx);
        let ci = c[0] as i64;
        let vals = self.w.values();
        let w0 = vals[idx];
        let mut base = 0.0;
        let mut zone: Vec<(f64, f64)> = Vec::new();
        if outer > 0.0 {
            self.for_rows(c, inner, outer, |row, x_in, x_out, b2, centre| {
                let prow = (row / nx as usize) * (nx as usize + 1);
                if x_in >= 0 {
                    let a = (ci - x_in).max(0) as usize;
                    let b = (ci + x_in).min(nx - 1) as usize;
                    base += self.prefix[prow + b + 1] - self.prefix[prow + a];
                    if centre {
                        base -= w0;
                    }
                }
                for dx in (x_in + 1).max(if centre { 1 } else { 0 })..=x_out {
                    let rho = ((dx * dx) as f64 * h * h + b2).sqrt();
                    for i in mirrored(ci, dx) {
                        if (0..nx).contains(&i) {
                            zone.push((rho, vals[row + i as usize]));
                        }
                    }
                }
            });
        }
        zone.sort_by(|a, b| a.0.total_cmp(&b.0));
        let rho: Vec<f64> = zone.iter().map(|z| z.0).collect();
        let mut cw = vec![0.0];
        let mut crw = vec![0.0];
        for &(r, v) in &zone {
            cw.push(cw.last().unwrap() + v);
            crw.push(crw.last().unwrap() + v * r);
        }
        move |r: f64| {
            let g = ramp_shift(r, s);
            let i1 = rho.partition_point(|&x| x <= g - s);
            let i2 = rho.partition_point(|&x| x < g + s);
            let shell = ((g + s) * (cw[i2] - cw[i1]) - (crw[i2] - crw[i1])) / (2.0 * s);
            (base + cw[i1] + shell + w0 * centre_fraction(r, h)) * vol / r
        }
    }

    /// `(Σ w over cells with ρ ≤ G−s, Σ w over cells with ρ < G+s)`, each
    /// plus the centre term: bounds on `ball_sum` from prefix sums alone.
    fn ball_bounds(&self, idx: usize, r: f64) -> (f64, f64) {
        let grid = self.w.grid();
        let nx = grid.dims()[0] as i64;
        let g = ramp_shift(r, self.s);
        let c = grid.coords(idx);
        let ci = c[0] as i64;
        let w0 = self.w.get(idx);
        let centre = w0 * centre_fraction(r, grid.spacing());
        let (mut lo, mut hi) = (centre, centre);
        if g + self.s <= 0.0 {
            return (lo, hi);
        }
        let row_sum = |row: usize, x: i64| {
            let prow = (row / nx as usize) * (nx as usize + 1);
            let a = (ci - x).max(0) as usize;
            let b = (ci + x).min(nx - 1) as usize;
            self.prefix[prow + b + 1] - self.prefix[prow + a]
        };
        self.for_rows(c, g - self.s, g + self.s, |row, x_in, x_out, _, is_centre| {
            let skip = if is_centre { w0 } else { 0.0 };
            if x_in >= 0 {
                lo += row_sum(row, x_in) - skip;
            }
            hi += row_sum(row, x_out) - skip;
        });
        (lo, hi)
    }

    /// `m` at node `idx`.
    pub fn at_node(&self, idx: usize) -> Result<MaximalPoint> {
        let grid = self.w.grid();
        let vol = grid.cell_volume();
        let w0 = self.w.get(idx);
        let radii = &self.radii;
        let top = radii.len() - 1;
        let r_max = radii[top];
        let mut probe = Probe { engine: self, idx, bounds: [None; SCAN_RADII], exact: [None; SCAN_RADII] };
        let first_above = |r: f64, from: usize| -> usize { from + radii[from..].partition_point(|&x| x < r) };
        // Largest scanned index with Φ ≤ 1. Indices below a known Φ ≤ 1 never
        // matter, so the search jumps ahead on a cubic growth guess; above a
        // Φ > 1 index, I(r) ≥ I(r_k) > r certifies every radius below I(r_k).
        let mut last_ok: Option<usize> = None;
        let mut k = 0usize;
        let answer = loop {
            if probe.phi_at_most_one(k) {
                last_ok = Some(k);
                if k == top {
                    return Err(if self.ball_sum(idx, r_max) == 0.0 {
                        Error::DegenerateWeight
                    } else {
                        Error::NoCrossing
                    });
                }
                let est = probe.upper(k);
                let guess = if est > 0.0 { radii[k] * (radii[k] / est).sqrt() } else { 4.0 * radii[k] };
                let next = first_above(guess, k + 1).saturating_sub(1);
                k = next.clamp(k + 1, k + MAX_JUMP).min(top);
                continue;
            }
            let floor = last_ok.map_or(0, |v| v + 1);
            let mut j = k;
            while j > floor {
                if probe.phi_at_most_one(j - 1) {
                    last_ok = Some(j - 1);
                    break;
                }
                j -= 1;
            }
            let mut c = k;
            let resumed = loop {
                let lc = probe.lower(c);
                if lc >= r_max {
                    break None;
                }
                let n = first_above(lc, c + 1);
                if n > top {
                    break None;
                }
                if probe.phi_at_most_one(n) {
                    break Some(n);
                }
                c = n;
            };
            match resumed {
                Some(n) => k = n,
                None => break last_ok,
            }
        };
        let (rhat, residual) = match answer {
            Some(k) => {
                let f = self.bracket(idx, radii[k], radii[k + 1]);
                let (a, b) = (radii[k], radii[k + 1]);
                let root = refine_root(a, f(a) - 1.0, b, f(b) - 1.0, |r| f(r) - 1.0);
                let (_, rhat) = exact_reciprocal_pair(root);
                (rhat, (f(rhat) - 1.0).abs())
            }
            // Only the centre cell meets the smallest scanned ball, where
            // Φ(r) = w0 (4π/3) r^2 exactly.
            None => {
                let (_, rhat) = exact_reciprocal_pair((3.0 / (4.0 * PI * w0)).sqrt());
                (rhat, (self.ball_sum(idx, rhat) * vol / rhat - 1.0).abs())
            }
        };
        let truncated = grid.distance_to_cell_box(&grid.point(idx)) < rhat;
        Ok(MaximalPoint { m: 1.0 / rhat, rhat, residual, truncated })
    }
}

/// Largest forward jump, in scan indices, taken on a growth guess.
const MAX_JUMP: usize = 8;

/// Per-node cache of ball-sum bounds and exact values at the scanned radii.
struct Probe<'e, 'a> {
    engine: &'e MaximalEngine<'a>,
    idx: usize,
    bounds: [Option<(f64, f64)>; SCAN_RADII],
    exact: [Option<f64>; SCAN_RADII],
}

impl Probe<'_, '_> {
    fn bounds(&mut self, k: usize) -> (f64, f64) {
        let vol = self.engine.w.grid().cell_volume();
        *self.bounds[k].get_or_insert_with(|| {
            let (lo, hi) = self.engine.ball_bounds(self.idx, self.engine.radii[k]);
            (lo * vol, hi * vol)
        })
    }

    fn exact(&mut self, k: usize) -> f64 {
        let vol = self.engine.w.grid().cell_volume();
        *self.exact[k].get_or_insert_with(|| self.engine.ball_sum(self.idx, self.engine.radii[k]) * vol)
    }

    fn lower(&mut self, k: usize) -> f64 {
        self.exact[k].unwrap_or_else(|| self.bounds(k).0)
    }

    fn upper(&mut self, k: usize) -> f64 {
        self.exact[k].unwrap_or_else(|| self.bounds(k).1)
    }

    fn phi_at_most_one(&mut self, k: usize) -> bool {
        let r = self.engine.radii[k];
        let (lo, hi) = self.bounds(k);
        if hi <= r {
            true
        } else if lo > r {
            false
        } else {
            self.exact(k) <= r
        }
    }
}

/// `m` at every node. Points without a crossing are flagged and receive the
/// reciprocal of the box half-diameter.
pub fn maximal_field(w: &ScalarField) -> Result<MaximalField> {
    if w.values().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter("weight must be non-negative".into()));
    }
    if w.values().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateWeight);
    }
    let engine = MaximalEngine::new(w);
    let r_max = w.grid().half_diameter();
    let results = par::map_range(w.grid().len(), |idx| engine.at_node(idx));
    let n = results.len();
    let mut m = Vec::with_capacity(n);
    let mut rhat = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    for res in results {
        match res {
            Ok(p) => {
                m.push(p.m);
                rhat.push(p.rhat);
                residuals.push(p.residual);
                flags.push(PointFlags { converged: true, clipped_at_box: false, truncated: p.truncated });
            }
            Err(Error::NoCrossing) | Err(Error::DegenerateWeight) => {
                m.push(1.0 / r_max);
                rhat.push(r_max);
                residuals.push(0.0);
                flags.push(PointFlags { converged: false, clipped_at_box: true, truncated: true });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MaximalField {
        m_values: ScalarField::new(w.grid().clone(), m)?,
        rhat_values: ScalarField::new(w.grid().clone(), rhat)?,
        flags,
        residuals,
    })
}

/// Sampled reverse Hölder and doubling diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RHEstimate {
    pub p: f64,
    /// Max over sampled balls of `(⨍ w^p)^{1/p} / ⨍ w`. A sampled sup over
    /// in-box balls, so it can only underestimate the true norm.
    pub norm_estimate: f64,
    pub samples: usize,
    /// Max over sampled balls of `∫_{2B} w / ∫_B w`.
    pub doubling_constant: f64,
    /// `2^{1 + ln 2 / ln α}`; absent when `p = 1` makes it infinite.
    pub doubling_bound: Option<f64>,
    /// Max over sampled balls of `∫_B w(z)/|z − x| dz ÷ (R^{-1} ∫_B w)`.
    pub kato_ratio: f64,
    /// `(n − q(n−2))^{-1/q} C₀` with `q = p/(p−1)`; absent when undefined.
    pub kato_bound: Option<f64>,
}

/// Doubling constant `2^{1+ln2/lnα}`, `α = [1 − (1/(2K))^{p/(p−1)}]^{−1/n}`.
pub fn doubling_bound(norm: f64, p: f64) -> Option<f64> {
    if p <= 1.0 {
        return None;
    }
    let q = p / (p - 1.0);
    let alpha = (1.0 - (0.5 / norm).powf(q)).powf(-1.0 / 3.0);
    let la = alpha.ln();
    (la > 0.0).then(|| 2f64.powf(1.0 + 2f64.ln() / la)).filter(|v| v.is_finite())
}

/// `(n − q(n−2))^{−1/q} C₀`, defined when `q < 3` (that is, `p > 3/2`).
pub fn kato_bound(norm: f64, p: f64) -> Option<f64> {
    let c0 = doubling_bound(norm, p)?;
    let q = p / (p - 1.0);
    let base = 3.0 - q;
    (base > 0.0).then(|| base.powf(-1.0 / q) * c0)
}

struct BallSample {
    centre: usize,
    radius: f64,
}

fn sample_balls(grid: &Grid, n: usize, seed: u64) -> Result<Vec<BallSample>> {
    let inner = grid.inner_half_box();
    let nodes = inner.nodes(grid);
    if nodes.is_empty() {
        return Err(Error::InvalidGrid("inner half-box holds no nodes".into()));
    }
    let h = grid.spacing();
    let u = grid.upper();
    let o = grid.origin();
    let min_side = (0..3).map(|a| u[a] - o[a]).fold(f64::INFINITY, f64::min);
    let (r_lo, r_hi) = (2.0 * h, min_side / 8.0);
    if r_hi < r_lo {
        return Err(Error::InsufficientResolution(r_hi));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let centre = nodes[rng.gen_range(0..nodes.len())];
            let t: f64 = rng.gen();
            BallSample { centre, radius: r_lo * (r_hi / r_lo).powf(t) }
        })
        .collect())
}

/// Fractionally weighted sums over a node-centred ball: `(Σf, Σf·w, Σf·w^p, Σ'f·w/ρ)`.
/// The last sum skips the centre cell.
fn ball_moments(w: &ScalarField, centre: usize, r: f64, p: f64) -> [f64; 4] {
    let grid = w.grid();
    let h = grid.spacing();
    let s = RAMP_HALF_WIDTH * h;
    let g = ramp_shift(r, s);
    let reach = ((g + s) / h).ceil() as i64;
    let c = grid.coords(centre);
    let mut m = [0.0; 4];
    let f0 = centre_fraction(r, h);
    let w0 = w.get(centre);
    m[0] += f0;
    m[1] += f0 * w0;
    m[2] += f0 * w0.powf(p);
    for dk in -reach..=reach {
        for dj in -reach..=reach {
            for di in -reach..=reach {
                if di == 0 && dj == 0 && dk == 0 {
                    continue;
                }
                let Some(idx) = grid.offset(c, [di, dj, dk]) else { continue };
                let rho = h * ((di * di + dj * dj + dk * dk) as f64).sqrt();
                let f = ramp_fraction(rho, g, s);
                if f > 0.0 {
                    let v = w.get(idx);
                    m[0] += f;
                    m[1] += f * v;
                    m[2] += f * v.powf(p);
                    m[3] += f * v / rho;
                }
            }
        }
    }
    m
}

/// Sampled reverse Hölder norm at exponent `p`, doubling ratio and the
/// inverse-distance (Kato) integral ratio over `n_samples` balls.
pub fn rh_estimate(w: &ScalarField, p: f64, n_samples: usize, seed: u64) -> Result<RHEstimate> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidParameter(format!("p must be >= 1, got {p}")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    let grid = w.grid();
    let h = grid.spacing();
    let balls = sample_balls(grid, n_samples, seed)?;
    let cells = ball_moments(w, balls[0].centre, 2.0 * h, 1.0)[0];
    if cells < 8.0 {
        return Err(Error::InsufficientResolution(cells));
    }
    let per_ball: Vec<Option<(f64, f64, f64)>> = par::map_slice(&balls, |b| {
        let inner = ball_moments(w, b.centre, b.radius, p);
        let outer = ball_moments(w, b.centre, 2.0 * b.radius, 1.0);
        if inner[1] <= 0.0 {
            return None;
        }
        let mean = inner[1] / inner[0];
        let mean_p = inner[2] / inner[0];
        let norm = mean_p.powf(1.0 / p) / mean;
        let doubling = outer[1] / inner[1];
        let centre_term = w.get(b.centre) * CUBE_INVERSE_DISTANCE / h;
        let kato = (inner[3] + centre_term) * b.radius / inner[1];
        Some((norm, doubling, kato))
    });
    let valid: Vec<(f64, f64, f64)> = per_ball.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::DegenerateWeight);
    }
    let norm_estimate = valid.iter().map(|v| v.0).fold(1.0, f64::max);
    let doubling_constant = valid.iter().map(|v| v.1).fold(1.0, f64::max);
    let kato_ratio = valid.iter().map(|v| v.2).fold(0.0, f64::max);
    Ok(RHEstimate {
        p,
        norm_estimate,
        samples: valid.len(),
        doubling_constant,
        doubling_bound: doubling_bound(norm_estimate, p),
        kato_ratio,
        kato_bound: kato_bound(norm_estimate, p),
    })
}

/// One measured property with its verdict kept apart from the raw number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub measured: f64,
    pub bound: Option<f64>,
    pub samples: usize,
    pub verdict: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub checks: Vec<PropertyCheck>,
}

impl PropertyReport {
    pub fn get(&self, name: &str) -> Option<&PropertyCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.verdict)
    }
}

/// Parameters for [`check_weight_properties`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPropertyParams {
    pub p: f64,
    pub p_tilde: f64,
    pub sample_pairs: usize,
    pub seed: u64,
    /// Relative quadrature slack on explicit constants.
    pub slack: f64,
}

impl Default for WeightPropertyParams {
    fn default() -> Self {
        Self { p: 1.5, p_tilde: 1.6, sample_pairs: 200, seed: 0, slack: 0.05 }
    }
}

/// Reverse Hölder comparison of `Φ` across radii, local comparability and
/// polynomial growth of `m`, doubling and the inverse-distance integral bound.
pub fn check_weight_properties(
    w: &ScalarField,
    m_field: &MaximalField,
    params: &WeightPropertyParams,
) -> Result<PropertyReport> {
    let grid = w.grid();
    grid.check_same(m_field.grid())?;
    let h = grid.spacing();
    let rh = rh_estimate(w, params.p, params.sample_pairs, params.seed)?;
    let rh_tilde = rh_estimate(w, params.p_tilde, params.sample_pairs, params.seed)?;
    let slack = 1.0 + params.slack;
    let mut checks = Vec::new();

    // Φ(r) ≤ K (R/r)^{3/p − 2} Φ(R) for r < R.
    let balls = sample_balls(grid, params.sample_pairs, params.seed ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(1));
    let mut worst = 0.0f64;
    let mut count = 0;
    for b in &balls {
        let t: f64 = rng.gen_range(0.1..0.9);
        let r = (b.radius * t).max(h);
        if r >= b.radius {
            continue;
        }
        let x = grid.point(b.centre);
        let (pr, pbig) = (phi(w, &x, r)?, phi(w, &x, b.radius)?);
        if pbig > 0.0 {
            worst = worst.max(pr / ((b.radius / r).powf(3.0 / params.p - 2.0) * pbig));
            count += 1;
        }
    }
    checks.push(PropertyCheck {
        name: "phi_radius_comparison".into(),
        measured: worst,
        bound: Some(rh.norm_estimate),
        samples: count,
        verdict: worst <= rh.norm_estimate * slack,
    });

    // m(x) ~ m(y) when |x − y| ≤ 1/m(x), and polynomial growth otherwise.
    let converged: Vec<usize> =
        (0..grid.len()).filter(|&i| m_field.flags[i].converged && !m_field.flags[i].truncated).collect();
    let mut near_worst = 1.0f64;
    let mut near_count = 0;
    let mut k0 = 0.0f64;
    let mut far_count = 0;
    if !converged.is_empty() {
        for _ in 0..params.sample_pairs {
            let xi = converged[rng.gen_range(0..converged.len())];
            let x = grid.point(xi);
            let mx = m_field.m(xi);
            let dir = random_unit(&mut rng);
            let len = rng.gen::<f64>() / mx;
            let target = [x[0] + len * dir[0], x[1] + len * dir[1], x[2] + len * dir[2]];
            if let Some(yi) = grid.nearest_index(&target) {
                if dist(&grid.point(yi), &x) * mx <= 1.0 && m_field.flags[yi].converged {
                    let my = m_field.m(yi);
                    near_worst = near_worst.max((mx / my).max(my / mx));
                    near_count += 1;
                }
            }
            let yi = converged[rng.gen_range(0..converged.len())];
            let my = m_field.m(yi);
            let sep = dist(&grid.point(yi), &x) * my;
            if sep >= 1.0 && mx > my {
                k0 = k0.max((mx / my).ln() / (1.0 + sep).ln());
                far_count += 1;
            }
        }
    }
    checks.push(PropertyCheck {
        name: "m_local_comparability".into(),
        measured: near_worst,
        bound: None,
        samples: near_count,
        verdict: near_worst.is_finite(),
    });
    checks.push(PropertyCheck {
        name: "m_growth_exponent".into(),
        measured: k0,
        bound: None,
        samples: far_count,
        verdict: k0.is_finite(),
    });
    checks.push(PropertyCheck {
        name: "doubling".into(),
        measured: rh.doubling_constant,
        bound: rh.doubling_bound,
        samples: rh.samples,
        verdict: rh.doubling_bound.is_none_or(|b| rh.doubling_constant <= b * slack),
    });
    checks.push(PropertyCheck {
        name: "inverse_distance_integral".into(),
        measured: rh_tilde.kato_ratio,
        bound: rh_tilde.kato_bound,
        samples: rh_tilde.samples,
        verdict: rh_tilde.kato_bound.is_some_and(|b| rh_tilde.kato_ratio <= b * slack),
    });
    Ok(PropertyReport { checks })
}

pub(crate) fn random_unit<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}
