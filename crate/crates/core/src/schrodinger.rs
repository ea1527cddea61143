//! Discretized `L = −(∇ − i a)ᵀ A (∇ − i a) + V` on the grid, its solves,
//! fundamental-solution columns, resolvents and local inequality checks.
//!
//! Every grid node is an unknown. Neighbours outside the grid are ghost
//! nodes: zero for [`Boundary::Dirichlet`], and `β u(p)` with
//! `β = |p − c| / |g − c|` for [`Boundary::Asymptotic`], `g` the ghost node
//! and `c` the box centre. The latter is exact for the `1/|x − c|` far field
//! of a whole-space Green's function. Neither choice depends on `V` or the shift,
//! so `L_V − L_0 = diag(V)` holds exactly.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dist, ComplexField, Grid, Point, ScalarField, VectorField};
use crate::io::Triplet;
use crate::par;
use crate::sparse::{bicgstab, cg, CsrMatrix, SolveStats};
use crate::stats::neumaier_sum;

/// Sources must sit at least this many nodes from every face.
pub const MIN_SOURCE_DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Asymptotic,
    Dirichlet,
}

/// The coefficient matrix `A(x)`. Only diagonal matrices fit the 7-point
/// stencil; a general matrix is accepted when its off-diagonal part vanishes.
#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientMatrix {
    Identity,
    RealDiagonal(Vec<[f64; 3]>),
    ComplexDiagonal(Vec<[Complex64; 3]>),
    General(Vec<[[Complex64; 3]; 3]>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixAKind {
    Identity,
    RealDiagonal,
    ComplexDiagonal,
}

impl CoefficientMatrix {
    pub fn constant_diagonal(grid: &Grid, diag: [f64; 3]) -> Self {
        CoefficientMatrix::RealDiagonal(vec![diag; grid.len()])
    }

    /// Per-node diagonal, after rejecting what the stencil cannot represent.
    fn diagonal(&self, n: usize) -> Result<(Vec<[Complex64; 3]>, MatrixAKind)> {
        let lift = |d: [f64; 3]| d.map(|v| Complex64::new(v, 0.0));
        let len_ok = |len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::LengthMismatch { expected: n, got: len })
            }
        };
        match self {
            CoefficientMatrix::Identity => Ok((vec![lift([1.0; 3]); n], MatrixAKind::Identity)),
            CoefficientMatrix::RealDiagonal(d) => {
                len_ok(d.len())?;
                Ok((d.iter().map(|&v| lift(v)).collect(), MatrixAKind::RealDiagonal))
            }
            CoefficientMatrix::ComplexDiagonal(d) => {
                len_ok(d.len())?;
                let kind = if d.iter().flatten().all(|v| v.im == 0.0) {
                    MatrixAKind::RealDiagonal
                } else {
                    MatrixAKind::ComplexDiagonal
                };
                Ok((d.clone(), kind))
            }
            CoefficientMatrix::General(m) => {
                len_ok(m.len())?;
                let off = m.iter().any(|a| (0..3).any(|j| (0..3).any(|k| j != k && a[j][k].norm() != 0.0)));
                if off {
                    return Err(Error::UnsupportedMatrixA(
                        "off-diagonal coefficients need a wider stencil than 7 points".into(),
                    ));
                }
                CoefficientMatrix::ComplexDiagonal(m.iter().map(|a| [a[0][0], a[1][1], a[2][2]]).collect()).diagonal(n)
            }
        }
    }
}

/// Assembled operator `L + shift` with the ingredients it came from.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    pub matrix: CsrMatrix,
    pub hermitian: bool,
    pub shift: f64,
    pub has_magnetic: bool,
    pub matrix_a_kind: MatrixAKind,
    pub boundary: Boundary,
    potential: ScalarField,
    vector_potential: Option<VectorField>,
    diag_a: Vec<[Complex64; 3]>,
}

/// Ghost factor for the missing neighbour of `p` one step along `step`
/// (`±1`) on `axis`.
fn ghost_factor(grid: &Grid, p: usize, axis: usize, step: f64, boundary: Boundary) -> f64 {
    match boundary {
        Boundary::Dirichlet => 0.0,
        Boundary::Asymptotic => {
            let h = grid.spacing();
            let c = grid.center();
            let x = grid.point(p);
            let mut g = x;
            g[axis] += step * h;
            dist(&x, &c).max(h) / dist(&g, &c).max(h)
        }
    }
}

/// Peierls phase `∫_p^q a·dl` along axis `axis` from `p` to its `+h` neighbour `q`,
/// with the midpoint value of `a` taken as the mean of the endpoint samples.
fn edge_phase(a: Option<&VectorField>, p: usize, q: usize, axis: usize, h: f64) -> f64 {
    match a {
        Some(a) => {
            let c = a.component(axis);
            0.5 * (c[p] + c[q]) * h
        }
        None => 0.0,
    }
}

/// Assembles `L + shift` with the 7-point stencil and Peierls phases.
pub fn assemble(
    v: &ScalarField,
    a: Option<&VectorField>,
    coeff: &CoefficientMatrix,
    shift: f64,
    boundary: Boundary,
) -> Result<SparseOperator> {
    let grid = v.grid();
    if let Some(a) = a {
        grid.check_same(a.grid())?;
    }
    if !(shift >= 0.0 && shift.is_finite()) {
        return Err(Error::InvalidParameter(format!("shift must be finite and non-negative, got {shift}")));
    }
    let vmin = v.min();
    if vmin < -1e-12 {
        return Err(Error::NegativePotential(vmin));
    }
    let a = a.filter(|a| !a.is_zero());
    if a.is_some() && !matches!(coeff, CoefficientMatrix::Identity) {
        return Err(Error::UnsupportedMatrixA("a magnetic potential requires A = I".into()));
    }
    let n = grid.len();
    let (diag_a, kind) = coeff.diagonal(n)?;
    if let Some(bad) = diag_a.iter().position(|d| d.iter().any(|c| !(c.re > 0.0) || !c.im.is_finite())) {
        return Err(Error::EllipticityViolation(bad));
    }
    let h = grid.spacing();
    let ih2 = 1.0 / (h * h);
    let rows = par::map_range(n, |p| {
        let c = grid.coords(p);
        let mut entries: Vec<(usize, Complex64)> = Vec::with_capacity(7);
        let mut diag = Complex64::new(v.get(p).max(0.0) + shift, 0.0);
        for axis in (0..3).rev() {
            let mut d = [0i64; 3];
            d[axis] = -1;
            match grid.offset(c, d) {
                Some(q) => {
                    let af = 0.5 * (diag_a[p][axis] + diag_a[q][axis]);
                    let theta = edge_phase(a, q, p, axis, h);
                    // Hop p → q runs against the axis: phase e^{+iθ(q→p)}.
                    entries.push((q, -af * ih2 * Complex64::from_polar(1.0, theta)));
                    diag += af * ih2;
                }
                None => diag += diag_a[p][axis] * ih2 * (1.0 - ghost_factor(grid, p, axis, -1.0, boundary)),
            }
        }
        let diag_pos = entries.len();
        for axis in 0..3 {
            let mut d = [0i64; 3];
            d[axis] = 1;
            match grid.offset(c, d) {
                Some(q) => {
                    let af = 0.5 * (diag_a[p][axis] + diag_a[q][axis]);
                    let theta = edge_phase(a, p, q, axis, h);
                    entries.push((q, -af * ih2 * Complex64::from_polar(1.0, -theta)));
                    diag += af * ih2;
                }
                None => diag += diag_a[p][axis] * ih2 * (1.0 - ghost_factor(grid, p, axis, 1.0, boundary)),
            }
        }
        entries.insert(diag_pos, (p, diag));
        entries
    });
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut cols = Vec::with_capacity(7 * n);
    let mut vals = Vec::with_capacity(7 * n);
    for row in rows {
        for (q, val) in row {
            cols.push(q as u32);
            vals.push(val);
        }
        row_ptr.push(cols.len());
    }
    let matrix = CsrMatrix::from_parts(n, row_ptr, cols, vals);
    Ok(SparseOperator {
        matrix,
        hermitian: kind != MatrixAKind::ComplexDiagonal,
        shift,
        has_magnetic: a.is_some(),
        matrix_a_kind: kind,
        boundary,
        potential: v.clone(),
        vector_potential: a.cloned(),
        diag_a,
    })
}

impl SparseOperator {
    pub fn grid(&self) -> &Grid {
        self.potential.grid()
    }

    pub fn potential(&self) -> &ScalarField {
        &self.potential
    }

    pub fn vector_potential(&self) -> Option<&VectorField> {
        self.vector_potential.as_ref()
    }

    /// Same operator with the shift replaced; only the diagonal changes.
    pub fn with_shift(&self, shift: f64) -> Result<SparseOperator> {
        if !(shift >= 0.0 && shift.is_finite()) {
            return Err(Error::InvalidParameter(format!("shift must be finite and non-negative, got {shift}")));
        }
        let delta = shift - self.shift;
        let n = self.matrix.dim();
        let entries: Vec<Triplet> = self
            .matrix
            .triplets()
            .into_iter()
            .map(|mut t| {
                if t.row == t.col {
                    t.value += delta;
                }
                t
            })
            .collect();
        Ok(SparseOperator { matrix: CsrMatrix::from_triplets(n, &entries)?, shift, ..self.clone() })
    }

    pub fn apply(&self, u: &ComplexField) -> Result<ComplexField> {
        self.grid().check_same(u.grid())?;
        ComplexField::new(self.grid().clone(), self.matrix.apply(u.values()))
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        self.matrix.triplets()
    }

    /// `Re A` on the edge from `p` along `+axis`, the neighbour and the
    /// covariant hop factor `e^{−i∫a}`.
    fn forward_edge(&self, p: usize, axis: usize) -> Option<(usize, f64, Complex64)> {
        let grid = self.grid();
        let mut d = [0i64; 3];
        d[axis] = 1;
        let q = grid.offset(grid.coords(p), d)?;
        let af = 0.5 * (self.diag_a[p][axis] + self.diag_a[q][axis]).re;
        let theta = edge_phase(self.vector_potential.as_ref(), p, q, axis, grid.spacing());
        Some((q, af, Complex64::from_polar(1.0, -theta)))
    }

    /// `Σ_axis Re A |e^{−iθ} u(q) − u(p)|² / h²` over forward edges of each node.
    pub fn covariant_energy_density(&self, u: &ComplexField) -> Result<Vec<f64>> {
        self.grid().check_same(u.grid())?;
        let h2 = self.grid().spacing().powi(2);
        let vals = u.values();
        Ok(par::map_range(vals.len(), |p| {
            (0..3)
                .filter_map(|axis| self.forward_edge(p, axis))
                .map(|(q, af, hop)| af * (hop * vals[q] - vals[p]).norm_sqr() / h2)
                .sum()
        }))
    }
}

/// Solves `op · u = rhs` to relative residual `tol`: CG for Hermitian
/// operators, BiCGStab otherwise.
pub fn solve(op: &SparseOperator, rhs: &ComplexField, tol: f64) -> Result<(ComplexField, SolveStats)> {
    op.grid().check_same(rhs.grid())?;
    let (x, stats) =
        if op.hermitian { cg(&op.matrix, rhs.values(), tol)? } else { bicgstab(&op.matrix, rhs.values(), tol)? };
    Ok((ComplexField::new(op.grid().clone(), x)?, stats))
}

/// Discrete point mass `e_y / h³`.
pub fn point_source(grid: &Grid, y: usize) -> ComplexField {
    let mut f = ComplexField::zeros(grid);
    f.values_mut()[y] = Complex64::new(1.0 / grid.cell_volume(), 0.0);
    f
}

/// Column `Γ_h(·, y)` of the inverse.
pub fn fundamental_column(op: &SparseOperator, y: usize, tol: f64) -> Result<(ComplexField, SolveStats)> {
    let grid = op.grid();
    if y >= grid.len() || grid.boundary_distance(grid.coords(y)) < MIN_SOURCE_DEPTH {
        return Err(Error::BoundarySource);
    }
    solve(op, &point_source(grid, y), tol)
}

/// Columns for several sources, solved concurrently over the shared operator.
pub fn fundamental_columns(op: &SparseOperator, ys: &[usize], tol: f64) -> Result<Vec<ComplexField>> {
    par::map_slice(ys, |&y| fundamental_column(op, y, tol).map(|c| c.0)).into_iter().collect()
}

/// `R_t f = (1 + t² L)^{−1} f = t^{−2} (L + t^{−2})^{−1} f`.
pub fn resolvent_apply(op: &SparseOperator, t: f64, f: &ComplexField, tol: f64) -> Result<ComplexField> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("t must be positive, got {t}")));
    }
    let shifted = op.with_shift(op.shift + 1.0 / (t * t))?;
    Ok(solve(&shifted, f, tol)?.0.scale(1.0 / (t * t)))
}

/// `|u|` entries for the nodes of `B(x0, r)`.
fn ball_nodes(grid: &Grid, x0: &Point, r: f64) -> Vec<usize> {
    let h = grid.spacing();
    let o = grid.origin();
    let d = grid.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        lo[a] = (((x0[a] - r - o[a]) / h).floor().max(0.0) as usize).min(d[a] - 1);
        hi[a] = (((x0[a] + r - o[a]) / h).ceil().max(0.0) as usize).min(d[a] - 1);
    }
    let mut out = Vec::new();
    for k in lo[2]..=hi[2] {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                let idx = grid.index(i, j, k);
                if dist(&grid.point(idx), x0) <= r {
                    out.push(idx);
                }
            }
        }
    }
    out
}

fn ball_inside(grid: &Grid, x0: &Point, r: f64) -> bool {
    let (o, u) = (grid.origin(), grid.upper());
    (0..3).all(|a| x0[a] - r >= o[a] && x0[a] + r <= u[a])
}

/// Local energy inequality measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalRatio {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, with `0/0` read as 0.
    pub ratio: f64,
}

fn ratio(lhs: f64, rhs: f64) -> LocalRatio {
    let ratio = if lhs == 0.0 {
        0.0
    } else if rhs == 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    };
    LocalRatio { lhs, rhs, ratio }
}

/// `∫_{B(x0,r)} |𝒟u|²` against `(R − r)^{−2} ∫_{B(x0,R)} |u|² + ∫_{B(x0,R)} |f||u|`
/// (the potential is non-negative, so the lower-order constant vanishes).
pub fn caccioppoli_check(
    op: &SparseOperator,
    u: &ComplexField,
    f: &ComplexField,
    x0: &Point,
    r: f64,
    big_r: f64,
) -> Result<LocalRatio> {
    let grid = op.grid();
    grid.check_same(f.grid())?;
    if !(r > 0.0 && big_r > r) {
        return Err(Error::InvalidParameter(format!("need 0 < r < R, got r = {r}, R = {big_r}")));
    }
    if !ball_inside(grid, x0, big_r) {
        return Err(Error::BallOutOfBox);
    }
    let vol = grid.cell_volume();
    let energy = op.covariant_energy_density(u)?;
    let lhs = neumaier_sum(ball_nodes(grid, x0, r).into_iter().map(|p| energy[p])) * vol;
    let outer = ball_nodes(grid, x0, big_r);
    let l2 = neumaier_sum(outer.iter().map(|&p| u.get(p).norm_sqr())) * vol;
    let fu = neumaier_sum(outer.iter().map(|&p| f.get(p).norm() * u.get(p).norm())) * vol;
    Ok(ratio(lhs, l2 / (big_r - r).powi(2) + fu))
}

/// `‖u‖_{L∞(B/4)}` against `(⨍_{2B}|u|²)^{1/2} + R² (⨍_{2B}|f|²)^{1/2}` with `B = B(x0, R)`.
pub fn moser_check(
    op: &SparseOperator,
    u: &ComplexField,
    f: &ComplexField,
    x0: &Point,
    big_r: f64,
) -> Result<LocalRatio> {
    let grid = op.grid();
    grid.check_same(u.grid())?;
    grid.check_same(f.grid())?;
    if op.matrix_a_kind != MatrixAKind::Identity {
        return Err(Error::UnsupportedMatrixA("the local bound is stated for A = I".into()));
    }
    if !(big_r > 0.0) {
        return Err(Error::NonpositiveRadius(big_r));
    }
    if !ball_inside(grid, x0, 2.0 * big_r) {
        return Err(Error::BallOutOfBox);
    }
    let inner = ball_nodes(grid, x0, 0.25 * big_r);
    if inner.is_empty() {
        return Err(Error::InsufficientResolution(0.0));
    }
    let sup = inner.iter().map(|&p| u.get(p).norm()).fold(0.0, f64::max);
    let outer = ball_nodes(grid, x0, 2.0 * big_r);
    let k = outer.len() as f64;
    let mu = (neumaier_sum(outer.iter().map(|&p| u.get(p).norm_sqr())) / k).sqrt();
    let mf = (neumaier_sum(outer.iter().map(|&p| f.get(p).norm_sqr())) / k).sqrt();
    Ok(ratio(sup, mu + big_r * big_r * mf))
}

/// Pointwise comparison `|(L + ε)^{−1} f|` against `(−Δ_h + ε)^{−1}|f|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KatoSimonEntry {
    pub eps: f64,
    /// `max_x (|u_L| − u_free) / ‖f‖∞`; non-positive means domination.
    pub max_excess: f64,
    /// `max_x (u_free − |u_L|) / ‖f‖∞`.
    pub max_gap: f64,
    pub verdict: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KatoSimonReport {
    pub entries: Vec<KatoSimonEntry>,
    pub slack: f64,
    pub verdict: bool,
}

/// Kato–Simon domination for `A = I`, at each shift in `eps_list`.
/// Passes when `|u_L| ≤ u_free + slack·‖f‖∞` everywhere.
#[allow(clippy::too_many_arguments)]
pub fn kato_simon_check(
    v: &ScalarField,
    a: Option<&VectorField>,
    coeff: &CoefficientMatrix,
    f: &ScalarField,
    eps_list: &[f64],
    boundary: Boundary,
    solver_tol: f64,
    slack: f64,
) -> Result<KatoSimonReport> {
    if !matches!(coeff, CoefficientMatrix::Identity) {
        return Err(Error::UnsupportedMatrixA("domination is checked for A = I only".into()));
    }
    v.grid().check_same(f.grid())?;
    if f.min() < 0.0 {
        return Err(Error::InvalidParameter("right-hand side must be non-negative".into()));
    }
    let fmax = f.max();
    let rhs = ComplexField::from_real(f);
    let zero = ScalarField::constant(v.grid(), 0.0);
    let mut entries = Vec::new();
    for &eps in eps_list {
        let op = assemble(v, a, coeff, eps, boundary)?;
        let free = assemble(&zero, None, &CoefficientMatrix::Identity, eps, boundary)?;
        let (u, _) = solve(&op, &rhs, solver_tol)?;
        let (w, _) = solve(&free, &rhs, solver_tol)?;
        let (mut excess, mut gap) = (f64::NEG_INFINITY, 0.0f64);
        for (ui, wi) in u.values().iter().zip(w.values()) {
            let diff = ui.norm() - wi.re;
            excess = excess.max(diff);
            gap = gap.max(-diff);
        }
        let scale = if fmax > 0.0 { fmax } else { 1.0 };
        let entry =
            KatoSimonEntry { eps, max_excess: excess / scale, max_gap: gap / scale, verdict: excess <= slack * fmax };
        entries.push(entry);
    }
    let verdict = entries.iter().all(|e| e.verdict);
    Ok(KatoSimonReport { entries, slack, verdict })
}

/// Defect of `L₀^{−1} f = L_V^{−1} f + L₀^{−1}(V L_V^{−1} f)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationIdentity {
    /// `‖L₀^{−1}f − L_V^{−1}f − L₀^{−1}(V L_V^{−1}f)‖∞ / ‖f‖∞`.
    pub max_abs_defect: f64,
    pub tol: f64,
    pub verdict: bool,
}

/// Checks the resolvent identity with both operators at shift `shift`
/// (positive shift keeps the free operator invertible on every boundary).
pub fn perturbation_identity_check(
    v: &ScalarField,
    a: Option<&VectorField>,
    f: &ComplexField,
    boundary: Boundary,
    tol: f64,
) -> Result<PerturbationIdentity> {
    let grid = v.grid();
    grid.check_same(f.grid())?;
    let zero = ScalarField::constant(grid, 0.0);
    let l0 = assemble(&zero, a, &CoefficientMatrix::Identity, 0.0, boundary)?;
    let lv = assemble(v, a, &CoefficientMatrix::Identity, 0.0, boundary)?;
    let (u0, _) = solve(&l0, f, tol)?;
    let (uv, _) = solve(&lv, f, tol)?;
    let vu: Vec<Complex64> = uv.values().iter().zip(v.values()).map(|(u, vv)| u * vv).collect();
    let (w, _) = solve(&l0, &ComplexField::new(grid.clone(), vu)?, tol)?;
    let defect = u0
        .values()
        .iter()
        .zip(uv.values())
        .zip(w.values())
        .map(|((a0, av), wi)| (a0 - av - wi).norm())
        .fold(0.0, f64::max);
    let fmax = f.norm_inf();
    let rel = if fmax > 0.0 { defect / fmax } else { defect };
    Ok(PerturbationIdentity { max_abs_defect: rel, tol, verdict: rel <= 10.0 * tol })
}

/// Smooth gauge function `χ(x) = Σ c_j sin(k_j·x + φ_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeFunction {
    pub modes: Vec<(f64, [f64; 3], f64)>,
}

impl GaugeFunction {
    /// Three modes with amplitudes up to 1 and wavenumbers up to 1.5.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = (0..3)
            .map(|_| {
                let k = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
                (rng.gen_range(0.2..1.0), k, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { modes }
    }

    pub fn eval(&self, x: &Point) -> f64 {
        self.modes.iter().map(|(c, k, ph)| c * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).sin()).sum()
    }

    pub fn gradient(&self, x: &Point) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (c, k, ph) in &self.modes {
            let s = c * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).cos();
            for a in 0..3 {
                g[a] += s * k[a];
            }
        }
        g
    }

    /// `a + ∇χ` sampled on the grid of `a`.
    pub fn transform(&self, a: &VectorField) -> Result<VectorField> {
        a.add(&VectorField::from_fn(a.grid(), |x| self.gradient(&x))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeReport {
    /// Max over the trust region of `||Γ'| − |Γ|| / |Γ|`.
    pub modulus_defect: f64,
    /// Max over the trust region of `|Γ' − e^{iχ(x)} e^{−iχ(y)} Γ| / |Γ|`.
    pub phase_defect: f64,
    pub tolerance: f64,
    pub verdict: bool,
}

/// Compares columns at `y` before and after `a → a + ∇χ`; tolerance `max(1%, h²)`.
pub fn gauge_check(
    v: &ScalarField,
    a: &VectorField,
    gauge: &GaugeFunction,
    y: usize,
    boundary: Boundary,
    tol: f64,
) -> Result<GaugeReport> {
    let grid = v.grid();
    let op = assemble(v, Some(a), &CoefficientMatrix::Identity, 0.0, boundary)?;
    let a2 = gauge.transform(a)?;
    let op2 = assemble(v, Some(&a2), &CoefficientMatrix::Identity, 0.0, boundary)?;
    let (g1, _) = fundamental_column(&op, y, tol)?;
    let (g2, _) = fundamental_column(&op2, y, tol)?;
    let chi_y = gauge.eval(&grid.point(y));
    let trust = grid.inner_half_box();
    let (mut dm, mut dp) = (0.0f64, 0.0f64);
    for p in trust.nodes(grid) {
        let (a1, b1) = (g1.get(p), g2.get(p));
        let m = a1.norm();
        if m == 0.0 {
            continue;
        }
        dm = dm.max((b1.norm() - m).abs() / m);
        let rot = Complex64::from_polar(1.0, gauge.eval(&grid.point(p)) - chi_y);
        dp = dp.max((b1 - rot * a1).norm() / m);
    }
    let tolerance = 0.01f64.max(grid.spacing().powi(2));
    Ok(GaugeReport { modulus_defect: dm, phase_defect: dp, tolerance, verdict: dm <= tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{sample_vector_potential, MagneticModel};
    use std::f64::consts::PI;

    fn uniform_a(grid: &Grid) -> VectorField {
        sample_vector_potential(&MagneticModel::uniform([0.0, 0.0, 1.0]), grid).unwrap()
    }

    #[test]
    fn laplacian_stencil_with_unit_spacing() {
        let g = Grid::new([5, 5, 5], [0.0; 3], 1.0).unwrap();
        let op =
            assemble(&ScalarField::constant(&g, 0.0), None, &CoefficientMatrix::Identity, 0.0, Boundary::Dirichlet)
                .unwrap();
        let c = g.index(2, 2, 2);
        assert_eq!(op.matrix.get(c, c), Complex64::new(6.0, 0.0));
        assert_eq!(op.matrix.get(c, g.index(3, 2, 2)), Complex64::new(-1.0, 0.0));
        assert_eq!(op.matrix.get(c, g.index(2, 2, 1)), Complex64::new(-1.0, 0.0));
        assert_eq!(op.matrix.row(c).count(), 7);
        // Corner rows keep the full diagonal under the Dirichlet ghost layer.
        assert_eq!(op.matrix.get(0, 0), Complex64::new(6.0, 0.0));
        assert!(op.matrix.is_real());
        let shifted = op.with_shift(0.25).unwrap();
        assert_eq!(shifted.matrix.get(c, c), Complex64::new(6.25, 0.0));
        assert_eq!(shifted.matrix.get(c, g.index(3, 2, 2)), Complex64::new(-1.0, 0.0));
    }

    #[test]
    fn peierls_phases_are_unimodular_and_hermitian() {
        let g = Grid::cube(-1.0, 1.0, 9).unwrap();
        let a = uniform_a(&g);
        let v = ScalarField::constant(&g, 0.0);
        let op = assemble(&v, Some(&a), &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic).unwrap();
        let plain = assemble(&v, None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic).unwrap();
        assert!(op.hermitian && op.has_magnetic && !op.matrix.is_real());
        for i in 0..g.len() {
            for (j, val) in op.matrix.row(i) {
                assert!((val.norm() - plain.matrix.get(i, j).norm()).abs() < 1e-14);
                assert!((val - op.matrix.get(j, i).conj()).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_negative_potential_and_bad_coefficients() {
        let g = Grid::cube(0.0, 1.0, 5).unwrap();
        let v = ScalarField::constant(&g, -1e-6);
        assert!(matches!(
            assemble(&v, None, &CoefficientMatrix::Identity, 0.0, Boundary::Dirichlet),
            Err(Error::NegativePotential(_))
        ));
        let z = ScalarField::constant(&g, 0.0);
        let bad = CoefficientMatrix::constant_diagonal(&g, [1.0, 0.0, 1.0]);
        assert_eq!(assemble(&z, None, &bad, 0.0, Boundary::Dirichlet).unwrap_err(), Error::EllipticityViolation(0));
        let a = uniform_a(&g);
        let aniso = CoefficientMatrix::constant_diagonal(&g, [1.0, 2.0, 1.0]);
        assert!(matches!(assemble(&z, Some(&a), &aniso, 0.0, Boundary::Dirichlet), Err(Error::UnsupportedMatrixA(_))));
        let mut full = [[Complex64::new(0.0, 0.0); 3]; 3];
        (0..3).for_each(|k| full[k][k] = Complex64::new(1.0, 0.0));
        full[0][1] = Complex64::new(0.1, 0.0);
        let general = CoefficientMatrix::General(vec![full; g.len()]);
        assert!(matches!(assemble(&z, None, &general, 0.0, Boundary::Dirichlet), Err(Error::UnsupportedMatrixA(_))));
    }

    #[test]
    fn complex_coefficients_use_bicgstab() {
        let g = Grid::cube(-1.0, 1.0, 9).unwrap();
        let a = CoefficientMatrix::ComplexDiagonal(vec![[Complex64::new(1.0, 0.3); 3]; g.len()]);
        let op = assemble(&ScalarField::constant(&g, 1.0), None, &a, 0.0, Boundary::Dirichlet).unwrap();
        assert!(!op.hermitian);
        assert!(op.matrix.hermitian_defect() > 0.0);
        let (u, st) = solve(&op, &point_source(&g, g.index(4, 4, 4)), 1e-10).unwrap();
        assert_eq!(st.method, crate::sparse::SolveMethod::Bicgstab);
        assert!(u.norm_inf() > 0.0);
    }

    #[test]
    fn boundary_source_is_rejected() {
        let g = Grid::cube(-1.0, 1.0, 17).unwrap();
        let op =
            assemble(&ScalarField::constant(&g, 0.0), None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic)
                .unwrap();
        assert_eq!(fundamental_column(&op, g.index(3, 8, 8), 1e-8).unwrap_err(), Error::BoundarySource);
        assert!(fundamental_column(&op, g.index(4, 8, 8), 1e-8).is_ok());
    }

    #[test]
    fn free_column_is_positive_and_near_newtonian() {
        let g = Grid::cube(-2.0, 2.0, 33).unwrap();
        let op =
            assemble(&ScalarField::constant(&g, 0.0), None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic)
                .unwrap();
        let y = g.index(16, 16, 16);
        let (col, _) = fundamental_column(&op, y, 1e-10).unwrap();
        assert!(col.values().iter().all(|v| v.re > 0.0 && v.im == 0.0));
        let h = g.spacing();
        for i in 20..=20 + 4 {
            let p = g.index(i, 16, 16);
            let r = dist(&g.point(p), &g.point(y));
            if r >= 4.0 * h {
                let exact = 1.0 / (4.0 * PI * r);
                assert!((col.get(p).re - exact).abs() < 0.1 * exact, "r = {r}");
            }
        }
    }

    #[test]
    fn potential_lowers_the_column() {
        let g = Grid::cube(-1.5, 1.5, 21).unwrap();
        let y = g.index(10, 10, 10);
        let free =
            assemble(&ScalarField::constant(&g, 0.0), None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic)
                .unwrap();
        let one =
            assemble(&ScalarField::constant(&g, 1.0), None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic)
                .unwrap();
        let (c0, _) = fundamental_column(&free, y, 1e-11).unwrap();
        let (c1, _) = fundamental_column(&one, y, 1e-11).unwrap();
        assert!(c1.values().iter().zip(c0.values()).all(|(a, b)| a.re <= b.re + 1e-8));
    }

    #[test]
    fn adjoint_columns_agree() {
        let g = Grid::cube(-1.0, 1.0, 17).unwrap();
        let v = ScalarField::from_fn(&g, |x| x[0] * x[0] + 0.5).unwrap();
        let op = assemble(&v, Some(&uniform_a(&g)), &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic).unwrap();
        let (x, y) = (g.index(5, 8, 6), g.index(11, 7, 9));
        let (cy, _) = fundamental_column(&op, y, 1e-12).unwrap();
        let (cx, _) = fundamental_column(&op, x, 1e-12).unwrap();
        // L is Hermitian, so L* = L.
        assert!((cy.get(x) - cx.get(y).conj()).norm() < 1e-8 * cy.get(x).norm());
    }

    #[test]
    fn resolvent_contracts_and_vanishes_on_zero() {
        let g = Grid::cube(-1.0, 1.0, 17).unwrap();
        let op =
            assemble(&ScalarField::constant(&g, 0.0), None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic)
                .unwrap();
        let f = point_source(&g, g.index(8, 8, 8));
        let tol = 1e-10;
        let u = resolvent_apply(&op, 1.0, &f, tol).unwrap();
        assert!(u.norm_l2() <= f.norm_l2() * (1.0 + tol));
        assert_eq!(resolvent_apply(&op, 1.0, &ComplexField::zeros(&g), tol).unwrap().norm_inf(), 0.0);
        assert!(resolvent_apply(&op, 0.0, &f, tol).is_err());
    }

    #[test]
    fn local_ratios_conventions() {
        let g = Grid::cube(-1.0, 1.0, 17).unwrap();
        let v = ScalarField::constant(&g, 1.0);
        let op = assemble(&v, None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic).unwrap();
        let zero = ComplexField::zeros(&g);
        let c = caccioppoli_check(&op, &zero, &zero, &[0.0; 3], 0.3, 0.6).unwrap();
        assert_eq!(c.ratio, 0.0);
        assert_eq!(caccioppoli_check(&op, &zero, &zero, &[0.8, 0.0, 0.0], 0.1, 0.3), Err(Error::BallOutOfBox));
        // u ≡ 1 solves L u = V away from the boundary.
        let one = ComplexField::from_real(&ScalarField::constant(&g, 1.0));
        let m = moser_check(&op, &one, &one, &[0.0; 3], 0.3).unwrap();
        assert!((m.ratio - 1.0 / (1.0 + 0.09)).abs() < 1e-12);
    }

    #[test]
    fn kato_simon_equality_and_domination() {
        let g = Grid::cube(-1.5, 1.5, 17).unwrap();
        let f = ScalarField::from_fn(&g, |x| (1.0 - (x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).max(0.0)).unwrap();
        let zero = ScalarField::constant(&g, 0.0);
        let eq = kato_simon_check(
            &zero,
            None,
            &CoefficientMatrix::Identity,
            &f,
            &[0.25, 1.0],
            Boundary::Asymptotic,
            1e-11,
            1e-8,
        )
        .unwrap();
        assert!(eq.verdict);
        assert!(eq.entries.iter().all(|e| e.max_excess.abs() < 1e-12 && e.max_gap < 1e-12));
        let a = uniform_a(&g);
        let mag = kato_simon_check(
            &zero,
            Some(&a),
            &CoefficientMatrix::Identity,
            &f,
            &[0.25],
            Boundary::Asymptotic,
            1e-11,
            1e-8,
        )
        .unwrap();
        assert!(mag.verdict && mag.entries[0].max_excess < 0.0);
    }

    #[test]
    fn perturbation_identity_constant_potential() {
        let g = Grid::cube(-1.0, 1.0, 13).unwrap();
        let f =
            ComplexField::from_real(&ScalarField::from_fn(&g, |x| (-8.0 * (x[0] * x[0] + x[1] * x[1])).exp()).unwrap());
        let rep = perturbation_identity_check(&ScalarField::constant(&g, 1.0), None, &f, Boundary::Asymptotic, 1e-10)
            .unwrap();
        assert!(rep.verdict, "{rep:?}");
        let z = perturbation_identity_check(&ScalarField::constant(&g, 0.0), None, &f, Boundary::Asymptotic, 1e-10)
            .unwrap();
        assert_eq!(z.max_abs_defect, 0.0);
    }

    #[test]
    fn gauge_covariance() {
        let g = Grid::cube(-1.0, 1.0, 17).unwrap();
        let v = ScalarField::constant(&g, 1.0);
        let rep =
            gauge_check(&v, &uniform_a(&g), &GaugeFunction::random(4), g.index(8, 8, 8), Boundary::Asymptotic, 1e-11)
                .unwrap();
        assert!(rep.verdict, "{rep:?}");
    }
}
