use thiserror::Error;

/// Errors raised by grid construction, sampling, solvers and checks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("field has {got} values, grid has {expected} points")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("radial power {0} is not locally integrable in three dimensions (needs alpha > -2)")]
    NonIntegrableSingularity(f64),
    #[error("potential undefined at ({0}, {1}, {2})")]
    OutOfDomain(f64, f64, f64),
    #[error("invalid potential model: {0}")]
    InvalidModel(String),
    #[error("no magnetic component available")]
    NoMagneticComponent,
    #[error("radius must be positive, got {0}")]
    NonpositiveRadius(f64),
    #[error("ball does not meet the computational box")]
    EmptyIntersection,
    #[error("weight vanishes identically")]
    DegenerateWeight,
    #[error("no crossing of Phi = 1 below the box half-diameter")]
    NoCrossing,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("smallest sampled ball covers {0:.1} cells (needs at least 8)")]
    InsufficientResolution(f64),
    #[error("empty source set")]
    EmptySource,
    #[error("{unconverged} of {total} maximal-function values are unconverged")]
    UnconvergedMetric { unconverged: usize, total: usize },
    #[error("potential is negative ({0:e}) somewhere")]
    NegativePotential(f64),
    #[error("coefficient matrix is not elliptic at node {0}")]
    EllipticityViolation(usize),
    #[error("unsupported coefficient matrix: {0}")]
    UnsupportedMatrixA(String),
    #[error("operator is not positive definite (curvature {0:e})")]
    NotPositiveDefinite(f64),
    #[error("solver stopped after {iterations} iterations at relative residual {residual:e}")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("source lies within 4h of the boundary")]
    BoundarySource,
    #[error("ball leaves the computational box")]
    BallOutOfBox,
    #[error("sets overlap")]
    SetsOverlap,
    #[error("source support leaves the trust region")]
    SupportTooLarge,
    #[error("test function is numerically zero")]
    DegenerateTest,
    #[error("solution is not positive at node {0}")]
    NonpositiveSolution(usize),
    #[error("only {0} admissible pairs (need at least 50)")]
    InsufficientPairs(usize),
    #[error("no admissible small-ball pairs")]
    NoSmallBallPairs,
    #[error("unsupported setting: {0}")]
    UnsupportedSetting(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
