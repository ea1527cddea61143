//! Experiment configuration: TOML in, validated and resolved, hashed for
//! provenance.

use std::path::{Path, PathBuf};

use agmonlab::agmon::Connectivity;
use agmonlab::potential::{FourierMode, MagneticModel, PotentialKind, PotentialModel};
use agmonlab::schrodinger::{Boundary, CoefficientMatrix};
use agmonlab::{BoxRegion, Grid, Point};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub potential: PotentialSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub operator: OperatorSpec,
    #[serde(default)]
    pub checks: ChecksSpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub electric: PotentialKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnetic: Option<MagneticSpec>,
}

/// Vector potential: an optional uniform field `B` in symmetric gauge plus
/// any linear part, offset and Fourier modes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagneticSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<FourierMode>,
}

impl MagneticSpec {
    pub fn model(&self) -> MagneticModel {
        let mut m = self.uniform.map(MagneticModel::uniform).unwrap_or_default();
        if let Some(g) = self.gradient {
            for j in 0..3 {
                for k in 0..3 {
                    m.gradient[j][k] += g[j][k];
                }
            }
        }
        if let Some(o) = self.offset {
            m.offset = o;
        }
        m.modes = self.modes.clone();
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: Point,
    pub hi: Point,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixASpec {
    Identity,
    RealDiagonal { diagonal: [f64; 3] },
    ComplexDiagonal { re: [f64; 3], im: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub shift: f64,
    /// Resolvent parameters. Empty means "none" for `solve` and the default
    /// sweep `{0.5, 1, 2}` for the decay checks.
    #[serde(default)]
    pub t_list: Vec<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_matrix_a")]
    pub matrix_a: MatrixASpec,
    #[serde(default)]
    pub connectivity: Connectivity,
}

fn default_tolerance() -> f64 {
    1e-10
}

fn default_matrix_a() -> MatrixASpec {
    MatrixASpec::Identity
}

impl Default for OperatorSpec {
    fn default() -> Self {
        Self {
            boundary: Boundary::default(),
            shift: 0.0,
            t_list: Vec::new(),
            tolerance: default_tolerance(),
            matrix_a: default_matrix_a(),
            connectivity: Connectivity::default(),
        }
    }
}

pub const DEFAULT_T_LIST: [f64; 3] = [0.5, 1.0, 2.0];

impl OperatorSpec {
    pub fn decay_t_list(&self) -> Vec<f64> {
        if self.t_list.is_empty() {
            DEFAULT_T_LIST.to_vec()
        } else {
            self.t_list.clone()
        }
    }

    pub fn coefficient(&self, grid: &Grid) -> CoefficientMatrix {
        match &self.matrix_a {
            MatrixASpec::Identity => CoefficientMatrix::Identity,
            MatrixASpec::RealDiagonal { diagonal } => CoefficientMatrix::constant_diagonal(grid, *diagonal),
            MatrixASpec::ComplexDiagonal { re, im } => {
                let d = [0, 1, 2].map(|a| Complex64::new(re[a], im[a]));
                CoefficientMatrix::ComplexDiagonal(vec![d; grid.len()])
            }
        }
    }
}

/// Checks of the verify suite, in the order they run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Weights,
    Distance,
    FeffermanPhong,
    PerturbationIdentity,
    KatoSimon,
    Gauge,
    Envelope,
    SmallBall,
    Harnack,
    L2Decay,
    Gaffney,
}

impl CheckKind {
    pub const ALL: [CheckKind; 11] = [
        CheckKind::Weights,
        CheckKind::Distance,
        CheckKind::FeffermanPhong,
        CheckKind::PerturbationIdentity,
        CheckKind::KatoSimon,
        CheckKind::Gauge,
        CheckKind::Envelope,
        CheckKind::SmallBall,
        CheckKind::Harnack,
        CheckKind::L2Decay,
        CheckKind::Gaffney,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Weights => "weights",
            CheckKind::Distance => "distance",
            CheckKind::FeffermanPhong => "fefferman_phong",
            CheckKind::PerturbationIdentity => "perturbation_identity",
            CheckKind::KatoSimon => "kato_simon",
            CheckKind::Gauge => "gauge",
            CheckKind::Envelope => "envelope",
            CheckKind::SmallBall => "small_ball",
            CheckKind::Harnack => "harnack",
            CheckKind::L2Decay => "l2_decay",
            CheckKind::Gaffney => "gaffney",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksSpec {
    #[serde(default = "all_checks")]
    pub run: Vec<CheckKind>,
    /// Repeat Fefferman–Phong at `h/2` for the resolution-stability ratio.
    #[serde(default)]
    pub fp_refine: bool,
}

fn all_checks() -> Vec<CheckKind> {
    CheckKind::ALL.to_vec()
}

impl Default for ChecksSpec {
    fn default() -> Self {
        Self { run: all_checks(), fp_refine: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    #[serde(default)]
    pub seed: u64,
    /// Source points, snapped to the nearest node. Defaults to a spread of
    /// `n_sources` points in the trust region.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<Point>,
    #[serde(default = "default_n_sources")]
    pub n_sources: usize,
    /// Distance-table targets. Defaults to the six axis points at unit
    /// distance from the first source.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<Point>,
    #[serde(default = "default_n_balls")]
    pub n_balls: usize,
    #[serde(default = "default_n_test_functions")]
    pub n_test_functions: usize,
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_n_gauges")]
    pub n_gauges: usize,
}

fn default_n_sources() -> usize {
    3
}
fn default_n_balls() -> usize {
    30
}
fn default_n_test_functions() -> usize {
    50
}
fn default_n_pairs() -> usize {
    200
}
fn default_n_gauges() -> usize {
    2
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            sources: Vec::new(),
            n_sources: default_n_sources(),
            targets: Vec::new(),
            n_balls: default_n_balls(),
            n_test_functions: default_n_test_functions(),
            n_pairs: default_n_pairs(),
            n_gauges: default_n_gauges(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_d_tilde")]
    pub d_tilde: f64,
    #[serde(default = "default_harnack_c")]
    pub harnack_c: f64,
    #[serde(default = "default_harnack_variation")]
    pub harnack_variation: f64,
    #[serde(default = "default_p")]
    pub weight_p: f64,
    #[serde(default = "default_p_tilde")]
    pub p_tilde: f64,
    #[serde(default = "default_quadrature_slack")]
    pub quadrature_slack: f64,
    #[serde(default = "default_gaffney_slack")]
    pub gaffney_slack: f64,
    #[serde(default = "default_kato_slack")]
    pub kato_slack: f64,
    #[serde(default = "default_r2")]
    pub envelope_r_squared: f64,
    #[serde(default = "default_floor")]
    pub decay_floor: f64,
    #[serde(default = "default_fp_band")]
    pub fp_stability_band: [f64; 2],
    /// Pointwise comparison region; defaults to the inner half-box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust_region: Option<BoxRegion>,
}

fn default_d_tilde() -> f64 {
    0.5
}
fn default_harnack_c() -> f64 {
    0.5
}
fn default_harnack_variation() -> f64 {
    0.2
}
fn default_p() -> f64 {
    1.5
}
fn default_p_tilde() -> f64 {
    1.6
}
fn default_quadrature_slack() -> f64 {
    0.05
}
fn default_gaffney_slack() -> f64 {
    0.25
}
fn default_kato_slack() -> f64 {
    1e-8
}
fn default_r2() -> f64 {
    0.9
}
fn default_floor() -> f64 {
    0.05
}
fn default_fp_band() -> [f64; 2] {
    [0.7, 1.4]
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            d_tilde: default_d_tilde(),
            harnack_c: default_harnack_c(),
            harnack_variation: default_harnack_variation(),
            weight_p: default_p(),
            p_tilde: default_p_tilde(),
            quadrature_slack: default_quadrature_slack(),
            gaffney_slack: default_gaffney_slack(),
            kato_slack: default_kato_slack(),
            envelope_r_squared: default_r2(),
            decay_floor: default_floor(),
            fp_stability_band: default_fp_band(),
            trust_region: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("agmonlab-out")
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

/// 1-based line of the first `key = ...` assignment or `[key]` header.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            let after = t.strip_prefix(key).map(str::trim_start);
            matches!(after, Some(rest) if rest.starts_with('='))
                || t.trim_end().trim_matches(['[', ']']).ends_with(key) && t.starts_with('[')
        })
        .map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError(format!("config parse error: {e}")))?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let fail = |key: &str, msg: String| {
            let at = line_of(text, key).map(|l| format!("line {l}: ")).unwrap_or_default();
            Err(ConfigError(format!("{at}`{key}`: {msg}")))
        };
        let model = self.potential_model();
        if let Err(e) = model.validate() {
            return fail("kind", e.to_string());
        }
        if let Err(e) = self.grid() {
            return fail("h", e.to_string());
        }
        let op = &self.operator;
        if !(op.shift >= 0.0 && op.shift.is_finite()) {
            return fail("shift", format!("must be finite and non-negative, got {}", op.shift));
        }
        if let Some(t) = op.t_list.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return fail("t_list", format!("entries must be positive, got {t}"));
        }
        if !(op.tolerance > 1e-14 && op.tolerance < 1e-2) {
            return fail("tolerance", format!("must lie in (1e-14, 1e-2), got {}", op.tolerance));
        }
        if self.potential.magnetic.is_some() && op.matrix_a != MatrixASpec::Identity {
            return fail("matrix_a", "a magnetic potential requires A = identity".into());
        }
        let s = &self.sampling;
        if s.n_sources == 0 || s.n_balls == 0 || s.n_test_functions == 0 || s.n_pairs == 0 {
            return fail("sampling", "sample counts must be positive".into());
        }
        let t = &self.tolerances;
        if !(t.p_tilde > 1.5 && t.p_tilde < 3.0) {
            return fail("p_tilde", format!("must lie in (3/2, 3), got {}", t.p_tilde));
        }
        if !(t.weight_p > 1.0) {
            return fail("weight_p", format!("must exceed 1, got {}", t.weight_p));
        }
        if !(t.harnack_c > 0.0) {
            return fail("harnack_c", format!("must be positive, got {}", t.harnack_c));
        }
        if !(t.fp_stability_band[0] > 0.0 && t.fp_stability_band[0] <= t.fp_stability_band[1]) {
            return fail("fp_stability_band", "needs 0 < lower <= upper".into());
        }
        Ok(())
    }

    pub fn potential_model(&self) -> PotentialModel {
        let mut m = PotentialModel::electric(self.potential.electric.clone());
        if let Some(mag) = &self.potential.magnetic {
            m = m.with_magnetic(mag.model());
        }
        m
    }

    pub fn grid(&self) -> agmonlab::Result<Grid> {
        Grid::from_extent(self.grid.lo, self.grid.hi, self.grid.h)
    }

    /// Hash of everything that determines results. The output directory is
    /// excluded so identical experiments hash alike wherever they are written.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.output = OutputSpec { dir: PathBuf::new() };
        let bytes = serde_json::to_vec(&hashed).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[potential.electric]
kind = "constant"
value = 1.0

[grid]
lo = [-2.0, -2.0, -2.0]
hi = [2.0, 2.0, 2.0]
h = 0.25
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.operator.tolerance, 1e-10);
        assert_eq!(c.checks.run.len(), CheckKind::ALL.len());
        assert_eq!(c.tolerances.harnack_c, 0.5);
        assert_eq!(c.operator.decay_t_list(), vec![0.5, 1.0, 2.0]);
        assert_eq!(c.grid().unwrap().dims(), [17; 3]);
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let text = MINIMAL.replace("[potential.electric]", "[ptential.electric]");
        let err = ExperimentConfig::parse(&text).unwrap_err().0;
        assert!(err.contains("ptential"), "{err}");
        assert!(err.contains("line 2"), "{err}");
        let text = format!("{MINIMAL}\n[sampling]\nsed = 3\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().0;
        assert!(err.contains("sed") && err.contains("line"), "{err}");
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let text = MINIMAL.replace("h = 0.25", "h = 0.3");
        let err = ExperimentConfig::parse(&text).unwrap_err().0;
        assert!(err.starts_with("line 9: `h`"), "{err}");
        let text = format!("{MINIMAL}\n[operator]\ntolerance = 0.5\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().0;
        assert!(err.contains("line 12") && err.contains("tolerance"), "{err}");
    }

    #[test]
    fn hash_ignores_output_dir_and_round_trips() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.sampling.seed = 9;
        assert_ne!(a.hash(), b.hash());
        let again = ExperimentConfig::parse(&a.to_toml()).unwrap();
        assert_eq!(again, a);
        assert_eq!(a.hash().len(), 64);
    }
}
