//! Decay and inequality checks on computed fields: Fefferman–Phong, weighted
//! L² decay, Gaffney off-diagonal bounds, scale-invariant Harnack, the
//! two-sided pointwise envelope and the small-ball perturbation bound.
//!
//! Decay rates are fitted, never asserted. Pointwise comparisons stay inside
//! a trust region (the inner half-box by default) and skip the `4h` shell
//! around each pole.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agmon::{metric_distance, Connectivity, DistanceField};
use crate::error::{Error, Result};
use crate::grid::{dist, BoxRegion, ComplexField, Grid, Point};
use crate::io::RegressionRow;
use crate::par;
use crate::schrodinger::{resolvent_apply, solve, MatrixAKind, SparseOperator};
use crate::stats::{fit_line, lower_envelope, neumaier_sum, upper_envelope, LinearFit};
use crate::weights::{random_unit, MaximalField};

/// Fitted rates at or below this magnitude count as "no decay".
pub const DECAY_FLOOR: f64 = 0.05;

/// Pole exclusion radius in grid spacings.
pub const POLE_SHELL: f64 = 4.0;

/// `|a/b − 1| ≤ tol`, the two-resolution stability test.
pub fn stable_within(a: f64, b: f64, tol: f64) -> bool {
    a.is_finite() && b.is_finite() && b != 0.0 && (a / b - 1.0).abs() <= tol
}

// ---------------------------------------------------------------------------
// Fefferman–Phong

/// Truncated Gaussian `amplitude · exp(−|x − centre|²/(2 radius²))`, zero
/// beyond three radii.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub centre: Point,
    pub radius: f64,
    pub amplitude: Complex64,
}

pub const BUMP_CUTOFF: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub bumps: Vec<Bump>,
}

impl TestFunction {
    pub fn eval(&self, x: &Point) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for b in &self.bumps {
            let r = dist(x, &b.centre);
            if r <= BUMP_CUTOFF * b.radius {
                acc += b.amplitude * (-0.5 * (r / b.radius).powi(2)).exp();
            }
        }
        acc
    }

    pub fn sample(&self, grid: &Grid) -> Result<ComplexField> {
        ComplexField::new(grid.clone(), par::map_range(grid.len(), |i| self.eval(&grid.point(i))))
    }
}

/// Sums of 1–5 bumps with radii log-uniform in `[r_min, r_max]`, each
/// supported inside `domain`.
pub fn random_test_functions(
    domain: &BoxRegion,
    r_min: f64,
    r_max: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<TestFunction>> {
    let reach = |r: f64| BUMP_CUTOFF * r;
    let side = (0..3).map(|a| domain.hi[a] - domain.lo[a]).fold(f64::INFINITY, f64::min);
    if !(r_min > 0.0 && r_min <= r_max && 2.0 * reach(r_min) < side) {
        return Err(Error::InvalidParameter(format!("bump radii [{r_min}, {r_max}] do not fit the domain")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let k = rng.gen_range(1..=5);
            let bumps = (0..k)
                .map(|_| {
                    let mut radius = (rng.gen_range(r_min.ln()..=r_max.ln())).exp();
                    radius = radius.min(0.5 * side / BUMP_CUTOFF);
                    let c = std::array::from_fn(|a| {
                        rng.gen_range(domain.lo[a] + reach(radius)..=domain.hi[a] - reach(radius))
                    });
                    let amplitude = Complex64::from_polar(rng.gen_range(0.5..1.5), rng.gen_range(0.0..2.0 * PI));
                    Bump { centre: c, radius, amplitude }
                })
                .collect();
            TestFunction { bumps }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FPReport {
    /// Worst `∫ m²|u|² / ∫ (|𝒟u|² + V|u|²)` over the test functions.
    pub max_ratio: f64,
    pub ratios: Vec<f64>,
    pub n_test_functions: usize,
    /// `max_ratio` at `h` over `max_ratio` at `h/2`, when both were run.
    pub resolution_stability: Option<f64>,
}

/// `∫ m²|u|² / ∫ (|𝒟u|² + V|u|²)` for one test function.
pub fn fefferman_phong_ratio(m_field: &MaximalField, op: &SparseOperator, u: &ComplexField) -> Result<f64> {
    let grid = op.grid();
    grid.check_same(m_field.grid())?;
    grid.check_same(u.grid())?;
    let energy = op.covariant_energy_density(u)?;
    let v = op.potential();
    let vals = u.values();
    let num = par::sum_range(vals.len(), |i| m_field.m(i).powi(2) * vals[i].norm_sqr());
    let den = par::sum_range(vals.len(), |i| energy[i] + v.get(i) * vals[i].norm_sqr());
    if num == 0.0 || den == 0.0 {
        return Err(Error::DegenerateTest);
    }
    Ok(num / den)
}

/// Worst ratio over the given test functions. `op` supplies `V` and `a`;
/// its shift is ignored.
pub fn fefferman_phong_check(m_field: &MaximalField, op: &SparseOperator, tests: &[TestFunction]) -> Result<FPReport> {
    let grid = op.grid();
    let ratios =
        tests.iter().map(|t| fefferman_phong_ratio(m_field, op, &t.sample(grid)?)).collect::<Result<Vec<f64>>>()?;
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(FPReport { max_ratio, ratios, n_test_functions: tests.len(), resolution_stability: None })
}

/// Attaches the `h` over `h/2` ratio of worst cases to the coarse report.
pub fn with_resolution_stability(mut coarse: FPReport, fine: &FPReport) -> FPReport {
    coarse.resolution_stability = Some(coarse.max_ratio / fine.max_ratio);
    coarse
}

// ---------------------------------------------------------------------------
// Weighted L² decay

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellPoint {
    pub d: f64,
    /// `∫_{shell} m²|u|²`.
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2DecayReport {
    /// `None` for `L^{-1}`, else the resolvent parameter.
    pub t: Option<f64>,
    pub d_tilde: f64,
    /// Smallest `d` reached by a boundary node or a node whose `r̂`-ball is truncated.
    pub d_max: f64,
    /// Fitted rate of `∫_{shell} m²|u|² ~ e^{−2εd}`.
    pub eps_fit: f64,
    pub fit: Option<LinearFit>,
    pub shells: Vec<ShellPoint>,
    /// `(ε, lhs(ε)/rhs)` on a grid of multiples of `eps_fit`.
    pub ratios: Vec<(f64, f64)>,
    /// `lhs/rhs` at `ε = eps_fit/2`: the constant the bound holds with.
    pub constant: f64,
    /// `∫|f|²/m²` for `L^{-1}`, `∫|f|² m²` for the resolvent.
    pub rhs: f64,
    pub verdict: bool,
}

/// Output of [`l2_decay_solve`]: the report plus the solution and distances it used.
pub struct L2Decay {
    pub report: L2DecayReport,
    pub solution: ComplexField,
    pub distance: DistanceField,
}

const L2_SHELLS: usize = 12;

/// Solves `L u = f` (`t = None`) or `u = (1 + t²L)^{-1} f`, measures the
/// decay of `m²|u|²` in `d(·, supp f)` and evaluates
/// `∫_{d ≥ d̃} m²|u|² e^{2εd}` against the matching right-hand side.
/// `m_field` must belong to the weight `V + |B|` (plus `1/t²` when `t` is set).
pub fn l2_decay_solve(
    op: &SparseOperator,
    f: &ComplexField,
    m_field: &MaximalField,
    t: Option<f64>,
    d_tilde: f64,
    tol: f64,
) -> Result<L2Decay> {
    let grid = op.grid();
    grid.check_same(f.grid())?;
    grid.check_same(m_field.grid())?;
    let support: Vec<usize> = (0..grid.len()).filter(|&i| f.get(i).norm() > 0.0).collect();
    let trust = grid.inner_half_box();
    if support.iter().any(|&i| !trust.contains(&grid.point(i))) {
        return Err(Error::SupportTooLarge);
    }
    let vol = grid.cell_volume();
    let m = |i: usize| m_field.m(i);
    let rhs = match t {
        None => neumaier_sum(support.iter().map(|&i| f.get(i).norm_sqr() / m(i).powi(2))) * vol,
        Some(_) => neumaier_sum(support.iter().map(|&i| f.get(i).norm_sqr() * m(i).powi(2))) * vol,
    };
    if support.is_empty() {
        let distance = metric_distance(&m_field.m_values, &[grid.index(0, 0, 0)], Connectivity::TwentySix)?;
        let report = L2DecayReport {
            t,
            d_tilde,
            d_max: 0.0,
            eps_fit: 0.0,
            fit: None,
            shells: Vec::new(),
            ratios: vec![(0.0, 0.0)],
            constant: 0.0,
            rhs: 0.0,
            verdict: true,
        };
        return Ok(L2Decay { report, solution: ComplexField::zeros(grid), distance });
    }
    // Clipped metrics are still usable here: the degenerate branch is part of the check.
    let distance = metric_distance(&m_field.m_values, &support, Connectivity::TwentySix)?;
    let u = match t {
        None => solve(op, f, tol)?.0,
        Some(t) => resolvent_apply(op, t, f, tol)?,
    };
    // Shells stop where the metric or the solution feels the box.
    let d_max = (0..grid.len())
        .filter(|&i| grid.is_boundary(i) || m_field.flags[i].truncated)
        .map(|i| distance.d(i))
        .fold(f64::INFINITY, f64::min);
    let mut shells = Vec::new();
    let mut fit = None;
    if d_max > d_tilde {
        let width = (d_max - d_tilde) / L2_SHELLS as f64;
        let mut mass = [0.0f64; L2_SHELLS];
        for i in 0..grid.len() {
            let d = distance.d(i);
            if d >= d_tilde && d < d_max {
                let k = (((d - d_tilde) / width) as usize).min(L2_SHELLS - 1);
                mass[k] += m(i).powi(2) * u.get(i).norm_sqr() * vol;
            }
        }
        shells = mass
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(k, &v)| ShellPoint { d: d_tilde + (k as f64 + 0.5) * width, mass: v })
            .collect();
        let xs: Vec<f64> = shells.iter().map(|s| s.d).collect();
        let ys: Vec<f64> = shells.iter().map(|s| s.mass.ln()).collect();
        fit = fit_line(&xs, &ys);
    }
    let eps_fit = fit.map_or(0.0, |f| (-0.5 * f.slope).max(0.0));
    let lhs = |eps: f64| {
        neumaier_sum((0..grid.len()).filter(|&i| distance.d(i) >= d_tilde).map(|i| {
            let d = distance.d(i);
            m(i).powi(2) * u.get(i).norm_sqr() * (2.0 * eps * d).exp()
        })) * vol
    };
    let ratios: Vec<(f64, f64)> =
        [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&q| (q * eps_fit, lhs(q * eps_fit) / rhs)).collect();
    let constant = ratios[2].1;
    let report = L2DecayReport {
        t,
        d_tilde,
        d_max,
        eps_fit,
        fit,
        shells,
        ratios,
        constant,
        rhs,
        verdict: eps_fit > DECAY_FLOOR && constant.is_finite(),
    };
    Ok(L2Decay { report, solution: u, distance })
}

pub fn l2_decay_check(
    op: &SparseOperator,
    f: &ComplexField,
    m_field: &MaximalField,
    t: Option<f64>,
    d_tilde: f64,
    tol: f64,
) -> Result<L2DecayReport> {
    Ok(l2_decay_solve(op, f, m_field, t, d_tilde, tol)?.report)
}

// ---------------------------------------------------------------------------
// Gaffney

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaffneyRow {
    pub t: f64,
    pub dist: f64,
    /// `‖R_t f‖_{L²(E)}`.
    pub lhs: f64,
    /// Bound implied by the fitted L² estimate at `ε = eps_fit/2`:
    /// `√C e^{−ε d(E)} ‖m f‖_{L²(F)} / min_E m`.
    pub rhs: f64,
    /// `‖R_t f‖_{L²(E')}` with `E'` moved to twice the separation.
    pub lhs_doubled: f64,
    /// Euclidean rate in units of `dist/t`: `eps_fit · t · min m`.
    pub eps_gaffney: f64,
    /// `lhs_doubled / lhs`.
    pub shrink: f64,
    /// `e^{−eps_gaffney · Δdist / t}`.
    pub predicted: f64,
    pub l2: L2DecayReport,
    pub verdict: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaffneyReport {
    pub rows: Vec<GaffneyRow>,
    /// Relative slack on the doubling comparison.
    pub slack: f64,
    pub verdict: bool,
}

fn l2_norm_on(u: &ComplexField, region: &BoxRegion) -> f64 {
    let grid = u.grid();
    (neumaier_sum(region.nodes(grid).into_iter().map(|i| u.get(i).norm_sqr())) * grid.cell_volume()).sqrt()
}

/// Resolvent decay from `F` to `E` for each `(t, m-field of V + |B| + 1/t²)`.
/// The bound uses the L² fit for that `t`; the doubling test moves `E`
/// away from `F` until the separation doubles and requires
/// `lhs_doubled / lhs ≤ e^{−ε Δdist/t}(1 + slack)`.
#[allow(clippy::too_many_arguments)]
pub fn gaffney_check(
    op: &SparseOperator,
    f: &ComplexField,
    f_region: &BoxRegion,
    e_region: &BoxRegion,
    settings: &[(f64, &MaximalField)],
    d_tilde: f64,
    tol: f64,
    slack: f64,
) -> Result<GaffneyReport> {
    let grid = op.grid();
    let sep = e_region.distance_to(f_region);
    if sep <= 0.0 {
        return Err(Error::SetsOverlap);
    }
    if (0..grid.len()).any(|i| f.get(i).norm() > 0.0 && !f_region.contains(&grid.point(i))) {
        return Err(Error::InvalidParameter("f is not supported in F".into()));
    }
    let fc = [0, 1, 2].map(|a| 0.5 * (f_region.lo[a] + f_region.hi[a]));
    let ec = [0, 1, 2].map(|a| 0.5 * (e_region.lo[a] + e_region.hi[a]));
    let dir_len = dist(&fc, &ec);
    let shift = [0, 1, 2].map(|a| sep * (ec[a] - fc[a]) / dir_len);
    let e2 = BoxRegion::new([0, 1, 2].map(|a| e_region.lo[a] + shift[a]), [0, 1, 2].map(|a| e_region.hi[a] + shift[a]));
    let bbox = BoxRegion::new(grid.origin(), grid.upper());
    if !bbox.contains_box(e_region) || !bbox.contains_box(&e2) {
        return Err(Error::InvalidParameter("target sets must stay inside the box".into()));
    }
    let sep2 = e2.distance_to(f_region);
    let mut rows = Vec::new();
    for &(t, m_field) in settings {
        let run = l2_decay_solve(op, f, m_field, Some(t), d_tilde, tol)?;
        let u = &run.solution;
        let e_nodes = e_region.nodes(grid);
        let lhs = l2_norm_on(u, e_region);
        let lhs_doubled = l2_norm_on(u, &e2);
        let eps = 0.5 * run.report.eps_fit;
        let m_min_e = e_nodes.iter().map(|&i| m_field.m(i)).fold(f64::INFINITY, f64::min);
        let d_min_e = e_nodes.iter().map(|&i| run.distance.d(i)).fold(f64::INFINITY, f64::min);
        let mf = (neumaier_sum(
            (0..grid.len())
                .filter(|&i| f_region.contains(&grid.point(i)))
                .map(|i| (m_field.m(i) * f.get(i).norm()).powi(2)),
        ) * grid.cell_volume())
        .sqrt();
        let rhs = run.report.constant.sqrt() * (-eps * d_min_e).exp() * mf / m_min_e;
        let m_min = m_field.m_values.min();
        let eps_gaffney = run.report.eps_fit * t * m_min;
        let shrink = if lhs > 0.0 { lhs_doubled / lhs } else { 0.0 };
        let predicted = (-eps_gaffney * (sep2 - sep) / t).exp();
        let verdict = lhs <= rhs * (1.0 + 1e-12) && shrink <= predicted * (1.0 + slack);
        rows.push(GaffneyRow {
            t,
            dist: sep,
            lhs,
            rhs,
            lhs_doubled,
            eps_gaffney,
            shrink,
            predicted,
            l2: run.report,
            verdict,
        });
    }
    let verdict = rows.iter().all(|r| r.verdict);
    Ok(GaffneyReport { rows, slack, verdict })
}

// ---------------------------------------------------------------------------
// Harnack

fn nodes_in_ball(grid: &Grid, x0: &Point, r: f64) -> Vec<usize> {
    let h = grid.spacing();
    let o = grid.origin();
    let d = grid.dims();
    let span = |a: usize| {
        let lo = (((x0[a] - r - o[a]) / h).floor().max(0.0) as usize).min(d[a] - 1);
        let hi = (((x0[a] + r - o[a]) / h).ceil().max(0.0) as usize).min(d[a] - 1);
        lo..=hi
    };
    let mut out = Vec::new();
    for k in span(2) {
        for j in span(1) {
            for i in span(0) {
                let idx = grid.index(i, j, k);
                if dist(&grid.point(idx), x0) <= r + 1e-12 * h {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// `sup/inf` of a positive real solution over the nodes of `B(x0, r)`.
pub fn harnack_ball_ratio(u: &ComplexField, x0: &Point, r: f64) -> Result<f64> {
    let nodes = nodes_in_ball(u.grid(), x0, r);
    if nodes.is_empty() {
        return Err(Error::InsufficientResolution(0.0));
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &i in &nodes {
        let v = u.get(i).re;
        if !(v > 0.0) {
            return Err(Error::NonpositiveSolution(i));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(hi / lo)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnackBall {
    pub source: usize,
    pub centre: usize,
    pub radius: f64,
    pub m: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnackReport {
    pub c_radius_fraction: f64,
    pub balls: Vec<HarnackBall>,
    pub max_ratio: f64,
    /// Worst ratio among balls with `m(x0)` below the median.
    pub max_ratio_low_m: f64,
    /// Worst ratio among balls with `m(x0)` at or above the median.
    pub max_ratio_high_m: f64,
    /// `|high/low − 1|`: growth with `m(x0)` would break scale invariance.
    pub scale_variation: f64,
    pub verdict: bool,
}

/// Pole distance of sampled Harnack balls, in radii.
pub const HARNACK_POLE_RATIO: f64 = 5.0;

/// Balls `B(x0, c/m(x0))` at `HARNACK_POLE_RATIO` radii from a pole, in a
/// random direction from a round-robin source. Fixing the pole distance in
/// units of `r` makes the Newtonian part of `sup/inf` the same for every
/// ball, so the comparison across `m(x0)` isolates scale dependence. Centres
/// must carry an untruncated `r̂`-ball, span at least one grid step and keep
/// `2B` inside the box.
pub fn harnack_check(
    op: &SparseOperator,
    columns: &[(usize, ComplexField)],
    m_field: &MaximalField,
    c_radius_fraction: f64,
    n_balls: usize,
    seed: u64,
) -> Result<HarnackReport> {
    if op.has_magnetic || op.matrix_a_kind == MatrixAKind::ComplexDiagonal {
        return Err(Error::UnsupportedSetting("the Harnack check needs a = 0 and real A".into()));
    }
    if columns.is_empty() {
        return Err(Error::InvalidParameter("no columns given".into()));
    }
    let grid = op.grid();
    grid.check_same(m_field.grid())?;
    let h = grid.spacing();
    let kc = HARNACK_POLE_RATIO * c_radius_fraction;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut balls = Vec::new();
    let mut attempts = 0;
    while balls.len() < n_balls && attempts < 200 * n_balls {
        attempts += 1;
        let (y, col) = &columns[attempts % columns.len()];
        let py = grid.point(*y);
        let dir = random_unit(&mut rng);
        let at = |rho: f64| grid.nearest_index(&std::array::from_fn(|a| py[a] + rho * dir[a]));
        // ρ = κ c / m(y + ρ·dir) by fixed-point iteration; m is slowly varying.
        let mut rho = kc / m_field.m(*y);
        let mut x0 = None;
        for _ in 0..8 {
            x0 = at(rho);
            let Some(i) = x0 else { break };
            rho = kc / m_field.m(i);
        }
        let Some(x0) = x0.and_then(|_| at(rho)) else { continue };
        let p0 = grid.point(x0);
        let m = m_field.m(x0);
        let r = c_radius_fraction / m;
        let flags = m_field.flags[x0];
        if r < h
            || !flags.converged
            || flags.truncated
            || dist(&p0, &py) < (HARNACK_POLE_RATIO - 0.5) * r
            || grid.distance_to_cell_box(&p0) < 2.0 * r + 0.5 * h
        {
            continue;
        }
        let ratio = harnack_ball_ratio(col, &p0, r)?;
        balls.push(HarnackBall { source: *y, centre: x0, radius: r, m, ratio });
    }
    if balls.is_empty() {
        return Err(Error::InvalidParameter(format!("no admissible Harnack balls for c = {c_radius_fraction}")));
    }
    let mut ms: Vec<f64> = balls.iter().map(|b| b.m).collect();
    ms.sort_by(f64::total_cmp);
    let median = ms[ms.len() / 2];
    let max_of =
        |pred: &dyn Fn(&HarnackBall) -> bool| balls.iter().filter(|b| pred(b)).map(|b| b.ratio).fold(0.0, f64::max);
    let max_ratio = max_of(&|_| true);
    let low = max_of(&|b| b.m < median);
    let high = max_of(&|b| b.m >= median);
    let scale_variation = if low > 0.0 { (high / low - 1.0).abs() } else { 0.0 };
    Ok(HarnackReport {
        c_radius_fraction,
        max_ratio,
        max_ratio_low_m: low,
        max_ratio_high_m: high,
        scale_variation,
        verdict: max_ratio.is_finite(),
        balls,
    })
}

// ---------------------------------------------------------------------------
// Pointwise envelope

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    /// Rate of the upper envelope `|Γ||x − y| ≤ c_upper e^{−eps_upper d}`.
    pub eps_upper: f64,
    /// Rate of the lower envelope; `None` outside the real, non-magnetic setting.
    pub eps_lower: Option<f64>,
    pub c_upper: f64,
    pub c_lower: Option<f64>,
    /// Least-squares slope of `log(|Γ||x − y|)` against `d`.
    pub slope: f64,
    /// Least-squares slope of `log(|Γ||x − y|)` against `|x − y|`. This is
    /// the meaningful one in the no-decay branch, where `d` only rescales
    /// `|x − y|` by the clipping constant.
    pub slope_euclid: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_pairs: usize,
    pub trust_region: BoxRegion,
    pub resolution: f64,
    /// Share of pairs lying between the two envelopes.
    pub coverage: f64,
    /// Upper-envelope rate of the ball-averaged `(⨍_{B(x,1/m(x))}|Γ|²)^{1/2}`.
    pub eps_upper_ball: Option<f64>,
    /// The weight is too small for the box (metric box-clipped): no decay to fit.
    pub no_decay: bool,
    pub note: String,
}

/// One `(x, y)` sample: `x` index, source index, `|x − y|`, `d(x, y)`, `|Γ(x, y)|`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct PairSample {
    x: usize,
    y: usize,
    euclid: f64,
    d: f64,
    gamma: f64,
}

fn envelope_pairs(
    columns: &[(usize, ComplexField)],
    d_fields: &[DistanceField],
    trust: &BoxRegion,
) -> Result<Vec<PairSample>> {
    if columns.len() != d_fields.len() {
        return Err(Error::InvalidParameter("one distance field per column is required".into()));
    }
    let mut out = Vec::new();
    for ((y, col), df) in columns.iter().zip(d_fields) {
        let grid = col.grid();
        grid.check_same(df.grid())?;
        if df.sources != [*y] {
            return Err(Error::InvalidParameter("distance field source does not match the column".into()));
        }
        let py = grid.point(*y);
        let min_r = POLE_SHELL * grid.spacing() - 1e-12;
        for x in trust.nodes(grid) {
            let euclid = dist(&grid.point(x), &py);
            if euclid >= min_r {
                out.push(PairSample { x, y: *y, euclid, d: df.d(x), gamma: col.get(x).norm() });
            }
        }
    }
    Ok(out)
}

/// Regression rows for CSV export.
pub fn regression_rows(
    columns: &[(usize, ComplexField)],
    d_fields: &[DistanceField],
    trust: &BoxRegion,
) -> Result<Vec<RegressionRow>> {
    Ok(envelope_pairs(columns, d_fields, trust)?
        .into_iter()
        .map(|p| RegressionRow {
            x_idx: p.x,
            y_idx: p.y,
            euclid: p.euclid,
            agmon_d: p.d,
            gamma_abs: p.gamma,
            log_env: (p.gamma * p.euclid).ln(),
        })
        .collect())
}

/// Fits `log(|Γ(x, y)||x − y|)` against `d(x, y)` over trust-region pairs.
/// `d_fields[k]` must be the single-source field of `columns[k].0`.
pub fn envelope_fit(
    op: &SparseOperator,
    columns: &[(usize, ComplexField)],
    d_fields: &[DistanceField],
    m_field: &MaximalField,
    trust: &BoxRegion,
) -> Result<DecayReport> {
    let grid = op.grid();
    grid.check_same(m_field.grid())?;
    let pairs = envelope_pairs(columns, d_fields, trust)?;
    if pairs.len() < 50 {
        return Err(Error::InsufficientPairs(pairs.len()));
    }
    if let Some(p) = pairs.iter().find(|p| !(p.gamma > 0.0)) {
        return Err(Error::NonpositiveSolution(p.x));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.d).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| (p.gamma * p.euclid).ln()).collect();
    let ls = fit_line(&xs, &ys).ok_or(Error::InsufficientPairs(pairs.len()))?;
    let es: Vec<f64> = pairs.iter().map(|p| p.euclid).collect();
    let ls_euclid = fit_line(&es, &ys).ok_or(Error::InsufficientPairs(pairs.len()))?;
    let clipped = m_field.flags.iter().filter(|f| f.clipped_at_box).count();
    let no_decay = 2 * clipped > m_field.flags.len();
    if !no_decay && ls.slope >= 0.0 {
        return Err(Error::UnsupportedSetting("fundamental solution does not decay in d".into()));
    }
    let up = upper_envelope(&xs, &ys).ok_or(Error::InsufficientPairs(pairs.len()))?;
    let lower_ok = !op.has_magnetic && op.matrix_a_kind != MatrixAKind::ComplexDiagonal;
    let low = if lower_ok { lower_envelope(&xs, &ys) } else { None };
    let covered = xs
        .iter()
        .zip(&ys)
        .filter(|(&x, &y)| {
            y <= up.eval(x) + 1e-12 * (1.0 + y.abs()) && low.is_none_or(|l| y >= l.eval(x) - 1e-12 * (1.0 + y.abs()))
        })
        .count();
    let eps_upper_ball = ball_averaged_rate(columns, d_fields, m_field, trust)?;
    Ok(DecayReport {
        eps_upper: -up.slope,
        eps_lower: low.map(|l| -l.slope),
        c_upper: up.intercept.exp(),
        c_lower: low.map(|l| l.intercept.exp()),
        slope: ls.slope,
        slope_euclid: ls_euclid.slope,
        intercept: ls.intercept,
        r_squared: ls.r_squared,
        n_pairs: pairs.len(),
        trust_region: *trust,
        resolution: grid.spacing(),
        coverage: covered as f64 / pairs.len() as f64,
        eps_upper_ball,
        no_decay,
        note: "graph distances overestimate d by up to 12.8% (26-neighbour metrication); the induced bias on the rates is not determined"
            .into(),
    })
}

/// Upper-envelope rate for ball averages over `B(x, 1/m(x))`, on a sparse
/// subsample of pairs whose ball avoids the pole shell.
fn ball_averaged_rate(
    columns: &[(usize, ComplexField)],
    d_fields: &[DistanceField],
    m_field: &MaximalField,
    trust: &BoxRegion,
) -> Result<Option<f64>> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ((y, col), df) in columns.iter().zip(d_fields) {
        let grid = col.grid();
        let py = grid.point(*y);
        let nodes = trust.nodes(grid);
        let stride = (nodes.len() / 200).max(1);
        let samples: Vec<Option<(f64, f64)>> =
            par::map_slice(&nodes.iter().step_by(stride).copied().collect::<Vec<_>>(), |&x| {
                let px = grid.point(x);
                let r = 1.0 / m_field.m(x);
                let e = dist(&px, &py);
                if e < r + POLE_SHELL * grid.spacing() || grid.distance_to_cell_box(&px) < r {
                    return None;
                }
                let ball = nodes_in_ball(grid, &px, r);
                let mean = neumaier_sum(ball.iter().map(|&z| col.get(z).norm_sqr())) / ball.len() as f64;
                Some((df.d(x), (mean.sqrt() * e).ln()))
            });
        for (d, v) in samples.into_iter().flatten() {
            xs.push(d);
            ys.push(v);
        }
    }
    if xs.len() < 10 {
        return Ok(None);
    }
    Ok(upper_envelope(&xs, &ys).map(|e| -e.slope))
}

// ---------------------------------------------------------------------------
// Small-ball perturbation

/// Pole exclusion for the small-ball comparison, in grid spacings. Both
/// columns carry the same discrete singularity, so their difference is
/// regular at the pole and a thinner shell than [`POLE_SHELL`] suffices.
pub const SMALL_BALL_SHELL: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallBallReport {
    pub p_tilde: f64,
    pub delta: f64,
    /// Inner radius of the sampled shell.
    pub r_min: f64,
    /// Max of `|Γ_V − Γ_0||x − y| / (|x − y| m(y))^δ` over `r_min ≤ |x − y| < 1/m(y)`.
    pub max_ratio: f64,
    pub n_pairs: usize,
    /// Min of `|Γ_V||x − y|` over `r_min ≤ |x − y| ≤ 1/(2m(y))`; `None` when
    /// the grid resolves no such pair.
    pub min_lower: Option<f64>,
    /// Min of `(|Γ_0| − |Γ_V − Γ_0|)|x − y|` over the same pairs.
    pub free_minus_perturbation: Option<f64>,
    pub verdict: bool,
}

/// Small-ball comparison of a column with the free column at the same
/// source, over pairs at least `shell` grid spacings from the pole.
pub fn perturbation_smallball_check(
    column_v: &ComplexField,
    column_0: &ComplexField,
    y: usize,
    m_field: &MaximalField,
    p_tilde: f64,
    shell: f64,
) -> Result<SmallBallReport> {
    let grid = column_v.grid();
    grid.check_same(column_0.grid())?;
    grid.check_same(m_field.grid())?;
    if !(p_tilde > 1.5) {
        return Err(Error::InvalidParameter(format!("p_tilde must exceed 3/2, got {p_tilde}")));
    }
    let delta = 2.0 - 3.0 / p_tilde;
    let my = m_field.m(y);
    let py = grid.point(y);
    let r_min = shell * grid.spacing();
    let (mut max_ratio, mut n) = (0.0f64, 0usize);
    let (mut min_lower, mut fmp) = (None::<f64>, None::<f64>);
    for x in nodes_in_ball(grid, &py, 1.0 / my) {
        let r = dist(&grid.point(x), &py);
        if r < r_min - 1e-12 || r >= 1.0 / my {
            continue;
        }
        let diff = (column_v.get(x) - column_0.get(x)).norm();
        max_ratio = max_ratio.max(diff * r / (r * my).powf(delta));
        n += 1;
        if r <= 0.5 / my {
            let lower = column_v.get(x).norm() * r;
            let free = (column_0.get(x).norm() - diff) * r;
            min_lower = Some(min_lower.map_or(lower, |v| v.min(lower)));
            fmp = Some(fmp.map_or(free, |v| v.min(free)));
        }
    }
    if n == 0 {
        return Err(Error::NoSmallBallPairs);
    }
    Ok(SmallBallReport {
        p_tilde,
        delta,
        r_min,
        max_ratio,
        n_pairs: n,
        min_lower,
        free_minus_perturbation: fmp,
        verdict: max_ratio.is_finite() && min_lower.is_none_or(|v| v > 0.0),
    })
}

/// Nodes of the trust region usable as sources: at least `4h` from every
/// face, on a coarse lattice so columns are well separated.
pub fn default_sources(grid: &Grid, count: usize) -> Vec<usize> {
    let c = grid.center();
    let trust = grid.inner_half_box();
    let q = 0.5 * (trust.hi[0] - trust.lo[0]) * 0.5;
    let offsets: [[f64; 3]; 5] = [[0.0; 3], [q, 0.0, 0.0], [0.0, q, 0.0], [0.0, 0.0, q], [-q, -q, 0.0]];
    offsets
        .iter()
        .take(count.max(1))
        .filter_map(|o| grid.nearest_index(&[c[0] + o[0], c[1] + o[1], c[2] + o[2]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agmon::agmon_distances;
    use crate::grid::ScalarField;
    use crate::schrodinger::{assemble, fundamental_column, point_source, Boundary, CoefficientMatrix};
    use crate::weights::maximal_field;

    fn op_for(v: &ScalarField) -> SparseOperator {
        assemble(v, None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic).unwrap()
    }

    #[test]
    fn wide_bump_ratio_tends_to_m_squared() {
        // V ≡ 1: ∫m²|u|² / ∫(|∇u|² + |u|²) = m² / (1 + ∫|∇u|²/∫|u|²), and for a
        // Gaussian of width s the Dirichlet quotient is 3/(2s²).
        let g = Grid::cube(-3.0, 3.0, 33).unwrap();
        let v = ScalarField::constant(&g, 1.0);
        let mf = maximal_field(&v).unwrap();
        let op = op_for(&v);
        let s = 0.9;
        let t = TestFunction { bumps: vec![Bump { centre: [0.0; 3], radius: s, amplitude: Complex64::new(1.0, 0.0) }] };
        let ratio = fefferman_phong_ratio(&mf, &op, &t.sample(&g).unwrap()).unwrap();
        let m2 = 4.0 * PI / 3.0;
        let oracle = m2 / (1.0 + 3.0 / (2.0 * s * s));
        assert!((ratio - oracle).abs() < 0.03 * oracle, "{ratio} vs {oracle}");
        let zero = TestFunction { bumps: vec![] };
        assert_eq!(fefferman_phong_ratio(&mf, &op, &zero.sample(&g).unwrap()), Err(Error::DegenerateTest));
    }

    #[test]
    fn bumps_stay_inside_their_domain() {
        let dom = BoxRegion::cube([0.0; 3], 1.0);
        for t in random_test_functions(&dom, 0.05, 0.25, 20, 7).unwrap() {
            assert!((1..=5).contains(&t.bumps.len()));
            for b in &t.bumps {
                assert!((0..3).all(
                    |a| b.centre[a] - 3.0 * b.radius >= -1.0 - 1e-12 && b.centre[a] + 3.0 * b.radius <= 1.0 + 1e-12
                ));
            }
        }
    }

    #[test]
    fn harnack_on_constant_and_newtonian_balls() {
        let g = Grid::cube(-1.0, 1.0, 9).unwrap();
        let one = ComplexField::from_real(&ScalarField::constant(&g, 1.0));
        assert_eq!(harnack_ball_ratio(&one, &[0.0; 3], 0.5).unwrap(), 1.0);
        let neg = one.scale(-1.0);
        assert!(matches!(harnack_ball_ratio(&neg, &[0.0; 3], 0.3), Err(Error::NonpositiveSolution(_))));
    }

    #[test]
    fn yukawa_envelope_slope() {
        let g = Grid::cube(-2.0, 2.0, 33).unwrap();
        let v = ScalarField::constant(&g, 1.0);
        let mf = maximal_field(&v).unwrap();
        let op = op_for(&v);
        let ys = default_sources(&g, 1);
        let cols: Vec<(usize, ComplexField)> =
            ys.iter().map(|&y| (y, fundamental_column(&op, y, 1e-10).unwrap().0)).collect();
        let dfs = agmon_distances(&mf, &ys, Connectivity::TwentySix).unwrap();
        let rep = envelope_fit(&op, &cols, &dfs, &mf, &g.inner_half_box()).unwrap();
        let target = 1.0 / mf.m(ys[0]);
        assert!((-rep.slope - target).abs() < 0.15 * target, "{rep:?}");
        assert!(rep.r_squared >= 0.9);
        assert_eq!(rep.coverage, 1.0);
        assert!(rep.eps_lower.unwrap() >= rep.eps_upper - DECAY_FLOOR);
        assert!(rep.c_lower.unwrap() <= rep.c_upper);
    }

    #[test]
    fn l2_decay_zero_and_constant_potential() {
        let g = Grid::cube(-2.0, 2.0, 25).unwrap();
        let v = ScalarField::constant(&g, 1.0);
        let mf = maximal_field(&v).unwrap();
        let op = op_for(&v);
        let zero = l2_decay_check(&op, &ComplexField::zeros(&g), &mf, None, 0.5, 1e-10).unwrap();
        assert!(zero.ratios.iter().all(|r| r.1 == 0.0));
        let f = point_source(&g, g.index(12, 12, 12));
        let rep = l2_decay_check(&op, &f, &mf, None, 0.5, 1e-10).unwrap();
        assert!(rep.verdict, "{rep:?}");
        // On ℝ³, e^{−r}/r gives shell mass ∝ e^{−2r} = e^{−2d/m}. The far-field
        // boundary row is tuned to 1/r tails and flattens the outer shells, so
        // the fitted rate sits below 1/m on a small box.
        let target = 1.0 / mf.m(g.index(12, 12, 12));
        assert!(rep.eps_fit > 0.6 * target && rep.eps_fit < 1.15 * target, "{}", rep.eps_fit);
        let dir = assemble(&v, None, &CoefficientMatrix::Identity, 0.0, Boundary::Dirichlet).unwrap();
        let rep = l2_decay_check(&dir, &f, &mf, None, 0.5, 1e-10).unwrap();
        assert!((rep.eps_fit - target).abs() < 0.15 * target, "{}", rep.eps_fit);
        let far = point_source(&g, g.index(3, 12, 12));
        assert_eq!(l2_decay_check(&op, &far, &mf, None, 0.5, 1e-10).unwrap_err(), Error::SupportTooLarge);
    }

    #[test]
    fn gaffney_rejects_overlap_and_is_linear() {
        let g = Grid::cube(-2.0, 2.0, 17).unwrap();
        let v = ScalarField::constant(&g, 1.0);
        let op = op_for(&v);
        let w = crate::potential::shifted_weight(&v, 1.0).unwrap();
        let mf = maximal_field(&w).unwrap();
        let fb = BoxRegion::cube([0.0; 3], 0.25);
        let f =
            ComplexField::from_real(&ScalarField::from_fn(&g, |x| if fb.contains(&x) { 1.0 } else { 0.0 }).unwrap());
        assert_eq!(gaffney_check(&op, &f, &fb, &fb, &[(1.0, &mf)], 0.0, 1e-10, 0.25).unwrap_err(), Error::SetsOverlap);
        let e = BoxRegion::new([0.5, -0.25, -0.25], [0.75, 0.25, 0.25]);
        let a = gaffney_check(&op, &f, &fb, &e, &[(1.0, &mf)], 0.0, 1e-10, 0.25).unwrap();
        let b = gaffney_check(&op, &f.scale(10.0), &fb, &e, &[(1.0, &mf)], 0.0, 1e-10, 0.25).unwrap();
        assert!((b.rows[0].lhs / a.rows[0].lhs - 10.0).abs() < 1e-6);
        assert!((b.rows[0].rhs / a.rows[0].rhs - 10.0).abs() < 1e-6);
    }

    #[test]
    fn small_ball_free_difference_vanishes() {
        let g = Grid::cube(-1.0, 1.0, 21).unwrap();
        let v = ScalarField::constant(&g, 1.0);
        let mf = maximal_field(&v).unwrap();
        let zero = ScalarField::constant(&g, 0.0);
        let y = g.index(10, 10, 10);
        let c0 = fundamental_column(&op_for(&zero), y, 1e-10).unwrap().0;
        assert_eq!(perturbation_smallball_check(&c0, &c0, y, &mf, 1.6, 10.0).unwrap_err(), Error::NoSmallBallPairs);
        let rep = perturbation_smallball_check(&c0, &c0, y, &mf, 1.6, SMALL_BALL_SHELL).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
        assert!((rep.delta - 0.125).abs() < 1e-15);
        let c1 = fundamental_column(&op_for(&v), y, 1e-10).unwrap().0;
        let rep = perturbation_smallball_check(&c1, &c0, y, &mf, 1.6, SMALL_BALL_SHELL).unwrap();
        assert!(rep.verdict && rep.min_lower.unwrap() >= rep.free_minus_perturbation.unwrap());
        // Γ_V ≤ Γ_0 and Γ_V·r stays near 1/(4π) close to the pole.
        assert!(rep.free_minus_perturbation.unwrap() > 0.5 / (4.0 * PI));
    }
}
