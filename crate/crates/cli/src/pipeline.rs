//! The work behind each subcommand: field setup, the verify suite and the
//! per-check verdicts.

use std::time::Instant;

use agmonlab::agmon::{agmon_distance, agmon_distances, metric_distance, DistanceField};
use agmonlab::io::{self, DistanceRow, RegressionRow};
use agmonlab::potential::{
    combined_weight, magnetic_field_norm, sample_potential, sample_vector_potential, shifted_weight,
};
use agmonlab::schrodinger::{
    assemble, fundamental_column, gauge_check, kato_simon_check, perturbation_identity_check, point_source,
    resolvent_apply, CoefficientMatrix, GaugeFunction, SparseOperator,
};
use agmonlab::verify::{
    default_sources, envelope_fit, fefferman_phong_check, gaffney_check, harnack_check, l2_decay_check,
    perturbation_smallball_check, random_test_functions, regression_rows, with_resolution_stability, Bump,
    TestFunction, SMALL_BALL_SHELL,
};
use agmonlab::weights::{check_weight_properties, maximal_field, MaximalField, WeightPropertyParams};
use agmonlab::{BoxRegion, ComplexField, Error, Grid, Point, ScalarField, VectorField};
use anyhow::{anyhow, Result};
use num_complex::Complex64;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{CheckKind, ConfigError, ExperimentConfig, MatrixASpec};
use crate::output::OutputDir;

/// Sampled fields for one grid.
pub struct Setup {
    pub grid: Grid,
    pub v: ScalarField,
    pub a: Option<VectorField>,
    /// `V + |B|`.
    pub w: ScalarField,
    pub coeff: CoefficientMatrix,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, grid: Grid) -> Result<Self> {
        let model = cfg.potential_model();
        let v = sample_potential(&model.electric, &grid)?;
        let (a, w) = match &model.magnetic {
            Some(mag) => {
                let a = sample_vector_potential(mag, &grid)?;
                let b = magnetic_field_norm(&model, &grid)?;
                (Some(a), combined_weight(&v, &b, None)?)
            }
            None => (None, v.clone()),
        };
        let coeff = cfg.operator.coefficient(&grid);
        Ok(Self { grid, v, a, w, coeff })
    }

    pub fn operator(&self, cfg: &ExperimentConfig) -> Result<SparseOperator> {
        Ok(assemble(&self.v, self.a.as_ref(), &self.coeff, cfg.operator.shift, cfg.operator.boundary)?)
    }
}

/// `m` for the weight, falling back to the all-clipped field when the weight
/// vanishes identically. The flag reports that fallback.
pub fn m_or_clipped(w: &ScalarField) -> Result<(MaximalField, bool)> {
    match maximal_field(w) {
        Ok(m) => Ok((m, false)),
        Err(Error::DegenerateWeight) => Ok((MaximalField::all_clipped(w.grid()), true)),
        Err(e) => Err(e.into()),
    }
}

fn snap(grid: &Grid, p: &Point, what: &str) -> Result<usize> {
    grid.nearest_index(p).ok_or_else(|| ConfigError(format!("{what} {p:?} lies outside the grid")).into())
}

pub fn resolve_sources(cfg: &ExperimentConfig, grid: &Grid, cli: &[Point]) -> Result<Vec<usize>> {
    let pts = if cli.is_empty() { &cfg.sampling.sources } else { cli };
    if pts.is_empty() {
        return Ok(default_sources(grid, cfg.sampling.n_sources));
    }
    pts.iter().map(|p| snap(grid, p, "source")).collect()
}

fn interior_range(m: &MaximalField) -> Option<(f64, f64)> {
    let vals: Vec<f64> =
        (0..m.flags.len()).filter(|&i| m.flags[i].converged && !m.flags[i].truncated).map(|i| m.m(i)).collect();
    if vals.is_empty() {
        return None;
    }
    Some((vals.iter().copied().fold(f64::INFINITY, f64::min), vals.iter().copied().fold(0.0, f64::max)))
}

pub fn compute_m(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<()> {
    let setup = Setup::new(cfg, cfg.grid()?)?;
    let t0 = Instant::now();
    let m = maximal_field(&setup.w)?;
    let wall = t0.elapsed().as_secs_f64();
    out.write_with("m.agf", "agf1", |b| io::write_scalar(b, &m.m_values))?;
    let (imin, imax) = interior_range(&m).map_or((None, None), |(a, b)| (Some(a), Some(b)));
    let summary = m.summary();
    println!(
        "m: min {} max {} (untruncated: {:?} .. {:?}); {} clipped, {} truncated",
        summary.m_min, summary.m_max, imin, imax, summary.clipped_at_box, summary.truncated
    );
    out.write_json(
        "m_summary.json",
        &json!({ "summary": summary, "untruncated_m_min": imin, "untruncated_m_max": imax, "wall_time_s": wall }),
    )
}

fn axis_targets(grid: &Grid, y: usize) -> Vec<usize> {
    let p = grid.point(y);
    let mut out = Vec::new();
    for a in 0..3 {
        for s in [1.0, -1.0] {
            let mut q = p;
            q[a] += s;
            if let Some(i) = grid.node_at(&q).or_else(|| grid.contains(&q).then(|| grid.nearest_index(&q)).flatten()) {
                out.push(i);
            }
        }
    }
    out
}

pub fn distance(
    cfg: &ExperimentConfig,
    out: &mut OutputDir,
    cli_sources: &[Point],
    cli_targets: &[Point],
) -> Result<()> {
    let setup = Setup::new(cfg, cfg.grid()?)?;
    let grid = &setup.grid;
    let sources = resolve_sources(cfg, grid, cli_sources)?;
    let m = maximal_field(&setup.w)?;
    let field = agmon_distance(&m, &sources, cfg.operator.connectivity)?;
    let tpts = if cli_targets.is_empty() { &cfg.sampling.targets } else { cli_targets };
    let targets: Vec<usize> = if tpts.is_empty() {
        axis_targets(grid, sources[0])
    } else {
        tpts.iter().map(|p| snap(grid, p, "target")).collect::<Result<_>>()?
    };
    let rows: Vec<DistanceRow> = targets
        .iter()
        .map(|&x| {
            // The nearest member of the source set is the root of the path.
            let root = field.path_to(x).last().copied().unwrap_or(x);
            DistanceRow {
                x_idx: x,
                y_idx: root,
                euclid: agmonlab::grid::dist(&grid.point(x), &grid.point(root)),
                agmon_d: field.d(x),
            }
        })
        .collect();
    for r in &rows {
        println!("d({} -> {}) = {} (euclid {})", r.y_idx, r.x_idx, r.agmon_d, r.euclid);
    }
    out.write_with("d.agf", "agf1", |b| io::write_scalar(b, &field.d_values))?;
    out.write_with("distances.csv", "csv", |b| io::write_distance_csv(b, &rows))?;
    out.write_json(
        "distance_summary.json",
        &json!({
            "sources": sources,
            "connectivity": field.connectivity,
            "boundary_tree_nodes": field.boundary_tree_nodes,
            "low_confidence_nodes": field.low_confidence_nodes,
            "d_max": field.d_values.max(),
        }),
    )
}

fn fmt_t(t: f64) -> String {
    format!("{t}")
}

pub fn solve_columns(cfg: &ExperimentConfig, out: &mut OutputDir, cli_sources: &[Point]) -> Result<()> {
    let setup = Setup::new(cfg, cfg.grid()?)?;
    let op = setup.operator(cfg)?;
    let sources = resolve_sources(cfg, &setup.grid, cli_sources)?;
    let tol = cfg.operator.tolerance;
    let mut stats = Vec::new();
    for (k, &y) in sources.iter().enumerate() {
        let (col, s) = fundamental_column(&op, y, tol)?;
        out.write_with(&format!("gamma_{k}.agf"), "agf1", |b| io::write_complex(b, &col))?;
        stats.push(json!({ "source": y, "iterations": s.iterations, "method": s.method, "relative_residual": s.relative_residual, "wall_time_s": s.wall_time }));
        for &t in &cfg.operator.t_list {
            let u = resolvent_apply(&op, t, &point_source(&setup.grid, y), tol)?;
            out.write_with(&format!("resolvent_t{}_{k}.agf", fmt_t(t)), "agf1", |b| io::write_complex(b, &u))?;
        }
        println!("source {y}: {} iterations, residual {:e}", s.iterations, s.relative_residual);
    }
    out.write_json("solve_summary.json", &json!({ "sources": sources, "solves": stats }))
}

// ---------------------------------------------------------------------------
// verify

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Serialize)]
pub struct CheckOutcome {
    pub check: &'static str,
    pub status: Status,
    pub verdict: Option<bool>,
    pub measurement: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub wall_time_s: f64,
}

impl CheckOutcome {
    fn judged(check: CheckKind, verdict: bool, measurement: Value) -> Self {
        let status = if verdict { Status::Pass } else { Status::Fail };
        Self { check: check.name(), status, verdict: Some(verdict), measurement, note: None, wall_time_s: 0.0 }
    }

    fn skipped(check: CheckKind, why: impl Into<String>) -> Self {
        Self {
            check: check.name(),
            status: Status::Skipped,
            verdict: None,
            measurement: Value::Null,
            note: Some(why.into()),
            wall_time_s: 0.0,
        }
    }

    fn failed(check: CheckKind, err: &anyhow::Error) -> Self {
        Self {
            check: check.name(),
            status: Status::Fail,
            verdict: Some(false),
            measurement: Value::Null,
            note: Some(format!("{err:#}")),
            wall_time_s: 0.0,
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

/// Lazily built state shared by the checks.
struct Suite<'c> {
    cfg: &'c ExperimentConfig,
    setup: Setup,
    op: SparseOperator,
    trust: BoxRegion,
    sources: Vec<usize>,
    m: Option<(MaximalField, bool)>,
    m_t: Vec<(f64, MaximalField)>,
    d_fields: Option<std::result::Result<Vec<DistanceField>, String>>,
    columns: Option<Vec<(usize, ComplexField)>>,
    /// Regression rows from the envelope check, written beside its report.
    pending_csv: Option<Vec<RegressionRow>>,
}

impl<'c> Suite<'c> {
    fn new(cfg: &'c ExperimentConfig) -> Result<Self> {
        let setup = Setup::new(cfg, cfg.grid()?)?;
        let op = setup.operator(cfg)?;
        let trust = cfg.tolerances.trust_region.unwrap_or_else(|| setup.grid.inner_half_box());
        let sources = resolve_sources(cfg, &setup.grid, &[])?;
        Ok(Self {
            cfg,
            setup,
            op,
            trust,
            sources,
            m: None,
            m_t: Vec::new(),
            d_fields: None,
            columns: None,
            pending_csv: None,
        })
    }

    fn seed(&self) -> u64 {
        self.cfg.sampling.seed
    }

    fn tol(&self) -> f64 {
        self.cfg.operator.tolerance
    }

    fn m(&mut self) -> Result<&(MaximalField, bool)> {
        if self.m.is_none() {
            self.m = Some(m_or_clipped(&self.setup.w)?);
        }
        Ok(self.m.as_ref().expect("set above"))
    }

    fn degenerate(&mut self) -> Result<bool> {
        Ok(self.m()?.1)
    }

    fn m_t(&mut self) -> Result<&[(f64, MaximalField)]> {
        if self.m_t.is_empty() {
            for t in self.cfg.operator.decay_t_list() {
                let w = shifted_weight(&self.setup.w, t)?;
                self.m_t.push((t, maximal_field(&w)?));
            }
        }
        Ok(&self.m_t)
    }

    /// Single-source distance fields. A box-clipped metric falls back to the
    /// raw metric distance so the no-decay branch can still be fitted.
    fn d_fields(&mut self) -> Result<&[DistanceField]> {
        if self.d_fields.is_none() {
            let conn = self.cfg.operator.connectivity;
            let sources = self.sources.clone();
            let (m, degenerate) = self.m()?;
            let res = if *degenerate {
                sources.iter().map(|&y| metric_distance(&m.m_values, &[y], conn)).collect()
            } else {
                agmon_distances(m, &sources, conn)
            };
            self.d_fields = Some(res.map_err(|e| e.to_string()));
        }
        match self.d_fields.as_ref().expect("set above") {
            Ok(d) => Ok(d),
            Err(e) => Err(anyhow!("{e}")),
        }
    }

    fn columns(&mut self) -> Result<&[(usize, ComplexField)]> {
        if self.columns.is_none() {
            let tol = self.tol();
            let cols = agmonlab::schrodinger::fundamental_columns(&self.op, &self.sources, tol)?;
            self.columns = Some(self.sources.iter().copied().zip(cols).collect());
        }
        Ok(self.columns.as_ref().expect("set above"))
    }

    fn bump(&self, radius: f64) -> TestFunction {
        let c = self.setup.grid.point(self.sources[0]);
        TestFunction { bumps: vec![Bump { centre: c, radius, amplitude: Complex64::new(1.0, 0.0) }] }
    }

    fn identity_a(&self) -> bool {
        self.cfg.operator.matrix_a == MatrixASpec::Identity
    }

    fn run(&mut self, check: CheckKind) -> Result<CheckOutcome> {
        let cfg = self.cfg;
        let tolr = &cfg.tolerances;
        let h = self.setup.grid.spacing();
        match check {
            CheckKind::Weights => {
                if self.degenerate()? {
                    return Ok(CheckOutcome::skipped(check, "weight vanishes identically"));
                }
                let params = WeightPropertyParams {
                    p: tolr.weight_p,
                    p_tilde: tolr.p_tilde,
                    sample_pairs: cfg.sampling.n_pairs,
                    seed: self.seed(),
                    slack: tolr.quadrature_slack,
                };
                let w = self.setup.w.clone();
                let (m, _) = self.m()?;
                let rep = check_weight_properties(&w, m, &params)?;
                let (lo, hi) = interior_range(m).unzip();
                Ok(CheckOutcome::judged(
                    check,
                    rep.all_pass(),
                    json!({ "summary": m.summary(), "untruncated_m_min": lo, "untruncated_m_max": hi, "properties": rep }),
                ))
            }
            CheckKind::Distance => {
                if self.degenerate()? {
                    return Ok(CheckOutcome::skipped(check, "metric is clipped at the box everywhere"));
                }
                let seed = self.seed();
                let d = self.d_fields()?.to_vec();
                let (m, _) = self.m()?;
                let rep = agmonlab::agmon::check_distance_lemmas(&d, m, seed)?;
                let hug: Vec<usize> = d.iter().map(|f| f.boundary_tree_nodes).collect();
                Ok(CheckOutcome::judged(check, rep.all_pass(), json!({ "lemmas": rep, "boundary_tree_nodes": hug })))
            }
            CheckKind::FeffermanPhong => {
                let grid = self.setup.grid.clone();
                let bbox = BoxRegion::new(grid.origin(), grid.upper());
                let side = (0..3).map(|a| bbox.hi[a] - bbox.lo[a]).fold(f64::INFINITY, f64::min);
                let tests =
                    random_test_functions(&bbox, 2.0 * h, side / 8.0, cfg.sampling.n_test_functions, self.seed())?;
                let op = self.op.clone();
                let (m, _) = self.m()?;
                let mut rep = fefferman_phong_check(m, &op, &tests)?;
                let mut verdict = rep.max_ratio.is_finite();
                if cfg.checks.fp_refine {
                    let fine = Grid::from_extent(grid.origin(), grid.upper(), 0.5 * h)?;
                    let fs = Setup::new(cfg, fine)?;
                    let (fm, _) = m_or_clipped(&fs.w)?;
                    let frep = fefferman_phong_check(&fm, &fs.operator(cfg)?, &tests)?;
                    rep = with_resolution_stability(rep, &frep);
                    let s = rep.resolution_stability.expect("just set");
                    let [lo, hi] = tolr.fp_stability_band;
                    verdict &= s >= lo && s <= hi;
                }
                Ok(CheckOutcome::judged(check, verdict, to_value(&rep)))
            }
            CheckKind::PerturbationIdentity => {
                if !self.identity_a() {
                    return Ok(CheckOutcome::skipped(check, "the identity is checked for A = I"));
                }
                let f = self.bump(4.0 * h).sample(&self.setup.grid)?;
                let rep = perturbation_identity_check(
                    &self.setup.v,
                    self.setup.a.as_ref(),
                    &f,
                    cfg.operator.boundary,
                    self.tol(),
                )?;
                Ok(CheckOutcome::judged(check, rep.verdict, to_value(&rep)))
            }
            CheckKind::KatoSimon => {
                if !self.identity_a() {
                    return Ok(CheckOutcome::skipped(check, "domination is checked for A = I"));
                }
                let f = self.bump(4.0 * h).sample(&self.setup.grid)?.abs();
                let rep = kato_simon_check(
                    &self.setup.v,
                    self.setup.a.as_ref(),
                    &self.setup.coeff,
                    &f,
                    &[0.0, 1.0],
                    cfg.operator.boundary,
                    self.tol(),
                    tolr.kato_slack,
                )?;
                Ok(CheckOutcome::judged(check, rep.verdict, to_value(&rep)))
            }
            CheckKind::Gauge => {
                if !self.identity_a() {
                    return Ok(CheckOutcome::skipped(check, "gauge covariance is checked for A = I"));
                }
                let a = self.setup.a.clone().unwrap_or_else(|| VectorField::zeros(&self.setup.grid));
                let mut reports = Vec::new();
                for k in 0..cfg.sampling.n_gauges as u64 {
                    let g = GaugeFunction::random(self.seed().wrapping_add(k));
                    reports.push(gauge_check(
                        &self.setup.v,
                        &a,
                        &g,
                        self.sources[0],
                        cfg.operator.boundary,
                        self.tol(),
                    )?);
                }
                let verdict = reports.iter().all(|r| r.verdict);
                Ok(CheckOutcome::judged(check, verdict, json!({ "gauges": reports })))
            }
            CheckKind::Envelope => {
                let trust = self.trust;
                let cols = self.columns()?.to_vec();
                let d = self.d_fields()?.to_vec();
                let op = self.op.clone();
                let (m, _) = self.m()?;
                let rep = envelope_fit(&op, &cols, &d, m, &trust)?;
                let rows = regression_rows(&cols, &d, &trust)?;
                let verdict = if rep.no_decay {
                    rep.slope_euclid.abs() <= tolr.decay_floor
                } else {
                    rep.eps_upper > tolr.decay_floor
                        && rep.r_squared >= tolr.envelope_r_squared
                        && rep.coverage == 1.0
                        && rep.eps_lower.is_none_or(|l| l >= rep.eps_upper - tolr.decay_floor)
                };
                let mut out = CheckOutcome::judged(check, verdict, to_value(&rep));
                out.measurement["regression_rows"] = json!(rows.len());
                self.pending_csv = Some(rows);
                Ok(out)
            }
            CheckKind::SmallBall => {
                let zero = ScalarField::constant(&self.setup.grid, 0.0);
                let op0 = assemble(&zero, self.setup.a.as_ref(), &self.setup.coeff, 0.0, cfg.operator.boundary)?;
                let cols = self.columns()?.to_vec();
                let tol = self.tol();
                let (m, _) = self.m()?;
                let mut reports = Vec::new();
                for (y, col) in &cols {
                    let (c0, _) = fundamental_column(&op0, *y, tol)?;
                    reports.push(perturbation_smallball_check(col, &c0, *y, m, tolr.p_tilde, SMALL_BALL_SHELL)?);
                }
                let verdict = reports.iter().all(|r| r.verdict);
                Ok(CheckOutcome::judged(check, verdict, json!({ "sources": reports })))
            }
            CheckKind::Harnack => {
                if self.setup.a.is_some() || matches!(cfg.operator.matrix_a, MatrixASpec::ComplexDiagonal { .. }) {
                    return Ok(CheckOutcome::skipped(
                        check,
                        "unsupported setting: the Harnack check needs a = 0 and real A",
                    ));
                }
                if self.degenerate()? {
                    return Ok(CheckOutcome::skipped(check, "metric is clipped at the box; balls c/m exceed the box"));
                }
                let seed = self.seed();
                let n = cfg.sampling.n_balls;
                let cols = self.columns()?.to_vec();
                let op = self.op.clone();
                let (m, _) = self.m()?;
                let main = harnack_check(&op, &cols, m, tolr.harnack_c, n, seed)?;
                let sweep: Vec<Value> = [0.25, 0.5, 1.0]
                    .iter()
                    .map(|&c| match harnack_check(&op, &cols, m, c, n, seed) {
                        Ok(r) => json!({ "c": c, "max_ratio": r.max_ratio, "scale_variation": r.scale_variation }),
                        Err(e) => json!({ "c": c, "error": e.to_string() }),
                    })
                    .collect();
                let verdict = main.max_ratio.is_finite() && main.scale_variation <= tolr.harnack_variation;
                Ok(CheckOutcome::judged(check, verdict, json!({ "report": main, "sweep": sweep })))
            }
            CheckKind::L2Decay => {
                let f = self.source_box_rhs()?;
                let d_tilde = tolr.d_tilde;
                let tol = self.tol();
                let op = self.op.clone();
                let degenerate = self.degenerate()?;
                let mut reports = Vec::new();
                let (m, _) = self.m()?;
                let base = l2_decay_check(&op, &f, m, None, d_tilde, tol)?;
                let mut verdict = base.verdict || degenerate;
                reports.push(base);
                for (t, mt) in self.m_t()?.to_vec() {
                    let r = l2_decay_check(&op, &f, &mt, Some(t), d_tilde, tol)?;
                    verdict &= r.verdict;
                    reports.push(r);
                }
                let out = CheckOutcome::judged(check, verdict, json!({ "reports": reports }));
                Ok(if degenerate { out.with_note("L^{-1} has no decay to fit: the weight vanishes") } else { out })
            }
            CheckKind::Gaffney => {
                let (fb, e) = self.gaffney_sets();
                let f = indicator(&self.setup.grid, &fb)?;
                let op = self.op.clone();
                let d_tilde = tolr.d_tilde;
                let tol = self.tol();
                let slack = tolr.gaffney_slack;
                let m_t = self.m_t()?.to_vec();
                let settings: Vec<(f64, &MaximalField)> = m_t.iter().map(|(t, m)| (*t, m)).collect();
                let rep = gaffney_check(&op, &f, &fb, &e, &settings, d_tilde, tol, slack)?;
                Ok(CheckOutcome::judged(check, rep.verdict, json!({ "f_set": fb, "e_set": e, "report": rep })))
            }
        }
    }

    /// Cube of half-side `2h` around the first source.
    fn source_box_rhs(&self) -> Result<ComplexField> {
        let grid = &self.setup.grid;
        let b = BoxRegion::cube(grid.point(self.sources[0]), 2.0 * grid.spacing());
        indicator(grid, &b)
    }

    /// `F` near the low-x face of the trust region and `E` at its centre,
    /// scaled to the trust region; the doubled position of `E` stays inside it.
    fn gaffney_sets(&self) -> (BoxRegion, BoxRegion) {
        let t = self.trust;
        let c: Point = [0, 1, 2].map(|a| 0.5 * (t.lo[a] + t.hi[a]));
        let w = 0.5 * (t.hi[0] - t.lo[0]);
        let f = BoxRegion::new(
            [c[0] - 0.875 * w, c[1] - 0.125 * w, c[2] - 0.125 * w],
            [c[0] - 0.625 * w, c[1] + 0.125 * w, c[2] + 0.125 * w],
        );
        let e = BoxRegion::new(
            [c[0] - 0.25 * w, c[1] - 0.25 * w, c[2] - 0.25 * w],
            [c[0], c[1] + 0.25 * w, c[2] + 0.25 * w],
        );
        (f, e)
    }
}

fn indicator(grid: &Grid, b: &BoxRegion) -> Result<ComplexField> {
    let s = ScalarField::from_fn(grid, |x| if b.contains(&x) { 1.0 } else { 0.0 })?;
    Ok(ComplexField::from_real(&s))
}

#[derive(Serialize)]
struct SummaryEntry {
    check: &'static str,
    status: Status,
}

/// Runs the configured checks, writes one report per check plus
/// `summary.json`, and returns whether every judged check passed.
pub fn verify(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<bool> {
    let t0 = Instant::now();
    let mut suite = Suite::new(cfg)?;
    let mut kinds = cfg.checks.run.clone();
    kinds.sort();
    kinds.dedup();
    let mut entries = Vec::new();
    for kind in kinds {
        let start = Instant::now();
        let mut outcome = match suite.run(kind) {
            Ok(o) => o,
            Err(e) => match e.downcast_ref::<Error>() {
                Some(Error::UnsupportedSetting(_)) | Some(Error::UnsupportedMatrixA(_)) => {
                    CheckOutcome::skipped(kind, e.to_string())
                }
                _ => CheckOutcome::failed(kind, &e),
            },
        };
        outcome.wall_time_s = start.elapsed().as_secs_f64();
        println!("{:<22} {:?}", kind.name(), outcome.status);
        if let Some(rows) = suite.pending_csv.take() {
            out.write_with("regression.csv", "csv", |b| io::write_regression_csv(b, &rows))?;
        }
        out.write_json(&format!("{}.json", kind.name()), &outcome)?;
        entries.push(SummaryEntry { check: kind.name(), status: outcome.status });
    }
    let pass = entries.iter().all(|e| e.status != Status::Fail);
    out.write_json(
        "summary.json",
        &json!({ "pass": pass, "checks": entries, "wall_time_s": t0.elapsed().as_secs_f64() }),
    )?;
    Ok(pass)
}

/// Plain-text digest of a verify output directory. Timing fields are left out
/// so the digest is reproducible.
pub fn report(dir: &std::path::Path) -> Result<(String, bool)> {
    let read = |name: &str| -> Result<Value> {
        let p = dir.join(name);
        let text = std::fs::read_to_string(&p).map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    };
    let summary = read("summary.json")?;
    let pass = summary["pass"].as_bool().unwrap_or(false);
    let mut text = String::new();
    text.push_str(&format!("config_hash {}\n", summary["config_hash"].as_str().unwrap_or("?")));
    text.push_str(&format!("overall {}\n\n", if pass { "PASS" } else { "FAIL" }));
    for entry in summary["checks"].as_array().into_iter().flatten() {
        let name = entry["check"].as_str().unwrap_or("?");
        let status = entry["status"].as_str().unwrap_or("?");
        text.push_str(&format!("{name:<22} {status}\n"));
        let detail = read(&format!("{name}.json"))?;
        if let Some(note) = detail["note"].as_str() {
            text.push_str(&format!("    note: {note}\n"));
        }
        for line in headline(name, &detail["measurement"]) {
            text.push_str(&format!("    {line}\n"));
        }
    }
    Ok((text, pass))
}

fn headline(name: &str, m: &Value) -> Vec<String> {
    let g = |path: &[&str]| -> String {
        let mut v = m;
        for p in path {
            v = &v[*p];
        }
        if v.is_null() {
            "-".into()
        } else {
            v.to_string()
        }
    };
    match name {
        "weights" => {
            vec![format!("m untruncated range {} .. {}", g(&["untruncated_m_min"]), g(&["untruncated_m_max"]))]
        }
        "fefferman_phong" => {
            vec![format!("max ratio {}, resolution stability {}", g(&["max_ratio"]), g(&["resolution_stability"]))]
        }
        "envelope" => vec![
            format!("eps_upper {}, eps_lower {}", g(&["eps_upper"]), g(&["eps_lower"])),
            format!(
                "slope {} (euclidean {}), R^2 {}, no_decay {}",
                g(&["slope"]),
                g(&["slope_euclid"]),
                g(&["r_squared"]),
                g(&["no_decay"])
            ),
        ],
        "harnack" => vec![format!(
            "max ratio {}, scale variation {}",
            g(&["report", "max_ratio"]),
            g(&["report", "scale_variation"])
        )],
        "perturbation_identity" => vec![format!("max defect {}", g(&["max_abs_defect"]))],
        _ => Vec::new(),
    }
}
