//! Closed-form electric and magnetic potentials, their sampling onto grids,
//! and the magnetic field `B = curl a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dist, Grid, Point, ScalarField, VectorField};
use crate::par;

/// `coefficient * x^px * y^py * z^pz`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coefficient: f64,
    pub powers: [u32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    Box { lo: Point, hi: Point },
    Ball { center: Point, radius: f64 },
}

impl Region {
    pub fn contains(&self, x: &Point) -> bool {
        match self {
            Region::Box { lo, hi } => (0..3).all(|a| x[a] >= lo[a] && x[a] <= hi[a]),
            Region::Ball { center, radius } => dist(center, x) <= *radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piece {
    pub region: Region,
    pub model: PotentialKind,
}

/// Electric potential families. All of them are non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialKind {
    Constant {
        value: f64,
    },
    /// `coefficient * |x - center|^alpha`.
    RadialPower {
        alpha: f64,
        #[serde(default = "one")]
        coefficient: f64,
        #[serde(default)]
        center: Point,
    },
    /// `|P(x)|^exponent` for the polynomial `P = sum of terms`.
    Polynomial {
        terms: Vec<Monomial>,
        #[serde(default = "one")]
        exponent: f64,
    },
    /// First matching region wins; points outside every region use `default`.
    Piecewise {
        pieces: Vec<Piece>,
        #[serde(default)]
        default: Option<Box<PotentialKind>>,
    },
}

fn one() -> f64 {
    1.0
}

impl PotentialKind {
    pub fn constant(value: f64) -> Self {
        PotentialKind::Constant { value }
    }

    pub fn radial_power(alpha: f64) -> Self {
        PotentialKind::RadialPower { alpha, coefficient: 1.0, center: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PotentialKind::Constant { value } => {
                if !(value.is_finite() && *value >= 0.0) {
                    return Err(Error::InvalidModel(format!("constant must be >= 0, got {value}")));
                }
            }
            PotentialKind::RadialPower { alpha, coefficient, center } => {
                if !alpha.is_finite() || *alpha <= -2.0 {
                    return Err(Error::NonIntegrableSingularity(*alpha));
                }
                if !(coefficient.is_finite() && *coefficient >= 0.0) {
                    return Err(Error::InvalidModel("radial coefficient must be >= 0".into()));
                }
                if center.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidModel("radial center must be finite".into()));
                }
            }
            PotentialKind::Polynomial { terms, exponent } => {
                if !(exponent.is_finite() && *exponent > 0.0) {
                    return Err(Error::InvalidModel(format!("polynomial exponent must be > 0, got {exponent}")));
                }
                if terms.iter().any(|t| !t.coefficient.is_finite()) {
                    return Err(Error::InvalidModel("non-finite polynomial coefficient".into()));
                }
            }
            PotentialKind::Piecewise { pieces, default } => {
                for p in pieces {
                    p.model.validate()?;
                }
                if let Some(d) = default {
                    d.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Value at `x`; `None` where the model is undefined (outside every piece
    /// without a default). Singular centres return `+inf`.
    pub fn eval(&self, x: &Point) -> Option<f64> {
        match self {
            PotentialKind::Constant { value } => Some(*value),
            PotentialKind::RadialPower { alpha, coefficient, center } => {
                let r = dist(x, center);
                if r == 0.0 {
                    return Some(match *alpha {
                        a if a > 0.0 => 0.0,
                        0.0 => *coefficient,
                        _ => f64::INFINITY,
                    });
                }
                Some(coefficient * r.powf(*alpha))
            }
            PotentialKind::Polynomial { terms, exponent } => {
                let p: f64 = terms
                    .iter()
                    .map(|t| {
                        t.coefficient
                            * x[0].powi(t.powers[0] as i32)
                            * x[1].powi(t.powers[1] as i32)
                            * x[2].powi(t.powers[2] as i32)
                    })
                    .sum();
                Some(p.abs().powf(*exponent))
            }
            PotentialKind::Piecewise { pieces, default } => match pieces.iter().find(|p| p.region.contains(x)) {
                Some(p) => p.model.eval(x),
                None => default.as_ref().and_then(|d| d.eval(x)),
            },
        }
    }

    /// Points where the model is infinite (radial powers with negative exponent).
    pub fn singular_points(&self) -> Vec<Point> {
        match self {
            PotentialKind::RadialPower { alpha, center, .. } if *alpha < 0.0 => vec![*center],
            PotentialKind::Piecewise { pieces, default } => {
                let mut out: Vec<Point> = pieces.iter().flat_map(|p| p.model.singular_points()).collect();
                if let Some(d) = default {
                    out.extend(d.singular_points());
                }
                out
            }
            _ => Vec::new(),
        }
    }

    /// Exact `int_{B(x, r)} V` where a closed form exists.
    pub fn exact_ball_integral(&self, x: &Point, r: f64) -> Option<f64> {
        use std::f64::consts::PI;
        match self {
            PotentialKind::Constant { value } => Some(value * 4.0 * PI / 3.0 * r.powi(3)),
            PotentialKind::RadialPower { alpha, coefficient, center } => {
                let s = dist(x, center);
                if s == 0.0 {
                    Some(coefficient * 4.0 * PI * r.powf(alpha + 3.0) / (alpha + 3.0))
                } else if *alpha == 2.0 {
                    Some(coefficient * (4.0 * PI / 3.0 * r.powi(3) * s * s + 4.0 * PI / 5.0 * r.powi(5)))
                } else if *alpha == 0.0 {
                    Some(coefficient * 4.0 * PI / 3.0 * r.powi(3))
                } else {
                    None
                }
            }
            _ => None,
        }
    }
}

/// One Fourier mode `amplitude * sin(wavevector . x + phase)` of a vector potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierMode {
    pub amplitude: [f64; 3],
    pub wavevector: [f64; 3],
    #[serde(default)]
    pub phase: f64,
}

/// Vector potential `a(x) = gradient . x + offset + sum of modes`, whose
/// Jacobian (hence curl) is known in closed form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagneticModel {
    #[serde(default)]
    pub gradient: [[f64; 3]; 3],
    #[serde(default)]
    pub offset: [f64; 3],
    #[serde(default)]
    pub modes: Vec<FourierMode>,
}

impl MagneticModel {
    /// Symmetric gauge `a = (b x x) / 2` of the uniform field `b`.
    pub fn uniform(b: [f64; 3]) -> Self {
        let g = [[0.0, -0.5 * b[2], 0.5 * b[1]], [0.5 * b[2], 0.0, -0.5 * b[0]], [-0.5 * b[1], 0.5 * b[0], 0.0]];
        Self { gradient: g, offset: [0.0; 3], modes: Vec::new() }
    }

    pub fn eval(&self, x: &Point) -> [f64; 3] {
        let mut a = self.offset;
        for j in 0..3 {
            for k in 0..3 {
                a[j] += self.gradient[j][k] * x[k];
            }
        }
        for m in &self.modes {
            let s = (m.wavevector[0] * x[0] + m.wavevector[1] * x[1] + m.wavevector[2] * x[2] + m.phase).sin();
            for j in 0..3 {
                a[j] += m.amplitude[j] * s;
            }
        }
        a
    }

    /// `jac[j][k] = d a_j / d x_k`.
    pub fn jacobian(&self, x: &Point) -> [[f64; 3]; 3] {
        let mut jac = self.gradient;
        for m in &self.modes {
            let c = (m.wavevector[0] * x[0] + m.wavevector[1] * x[1] + m.wavevector[2] * x[2] + m.phase).cos();
            for j in 0..3 {
                for k in 0..3 {
                    jac[j][k] += m.amplitude[j] * m.wavevector[k] * c;
                }
            }
        }
        jac
    }

    /// Frobenius norm of `b_jk = d a_j/d x_k - d a_k/d x_j`.
    pub fn field_norm(&self, x: &Point) -> f64 {
        curl_frobenius(&self.jacobian(x))
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.gradient.iter().flatten().chain(&self.offset).all(|v| v.is_finite())
            && self
                .modes
                .iter()
                .all(|m| m.amplitude.iter().chain(&m.wavevector).all(|v| v.is_finite()) && m.phase.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::InvalidModel("non-finite magnetic parameter".into()))
        }
    }
}

pub(crate) fn curl_frobenius(jac: &[[f64; 3]; 3]) -> f64 {
    let mut s = 0.0;
    for j in 0..3 {
        for k in 0..3 {
            let b = jac[j][k] - jac[k][j];
            s += b * b;
        }
    }
    s.sqrt()
}

/// An electric potential together with an optional magnetic vector potential.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialModel {
    pub electric: PotentialKind,
    #[serde(default)]
    pub magnetic: Option<MagneticModel>,
}

impl PotentialModel {
    pub fn electric(kind: PotentialKind) -> Self {
        Self { electric: kind, magnetic: None }
    }

    pub fn with_magnetic(mut self, magnetic: MagneticModel) -> Self {
        self.magnetic = Some(magnetic);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.electric.validate()?;
        if let Some(m) = &self.magnetic {
            m.validate()?;
        }
        Ok(())
    }
}

/// Subcells per axis in the cell-average quadrature.
const CELL_SUBDIV: usize = 5;
/// Recursion depth for the subcell that contains a singular point.
const SINGULAR_DEPTH: usize = 4;

/// Average of `model` over the cube of side `h` centred at `center`, by
/// 5x5x5 subcell midpoints. A subcell whose midpoint is singular is refined
/// recursively; at the deepest level it is replaced by the average over the
/// ball of equal volume.
pub fn cell_average(model: &PotentialKind, center: &Point, h: f64) -> Result<f64> {
    model.validate()?;
    cell_average_rec(model, &model.singular_points(), center, h, SINGULAR_DEPTH)
}

fn cell_average_rec(model: &PotentialKind, singular: &[Point], center: &Point, h: f64, depth: usize) -> Result<f64> {
    let sub = h / CELL_SUBDIV as f64;
    let mut acc = 0.0;
    for k in 0..CELL_SUBDIV {
        for j in 0..CELL_SUBDIV {
            for i in 0..CELL_SUBDIV {
                let p = [
                    center[0] + (i as f64 + 0.5) * sub - 0.5 * h,
                    center[1] + (j as f64 + 0.5) * sub - 0.5 * h,
                    center[2] + (k as f64 + 0.5) * sub - 0.5 * h,
                ];
                // Midpoints carry rounding error, so singular hits are found by
                // distance rather than by an infinite value.
                let hit = singular.iter().find(|s| dist(s, &p) <= 1e-6 * sub);
                acc += match hit {
                    Some(s) if depth > 0 => cell_average_rec(model, singular, s, sub, depth - 1)?,
                    Some(s) => singular_cell_value(model, s, sub)?,
                    None => model.eval(&p).ok_or(Error::OutOfDomain(p[0], p[1], p[2]))?,
                };
            }
        }
    }
    Ok(acc / (CELL_SUBDIV * CELL_SUBDIV * CELL_SUBDIV) as f64)
}

fn singular_cell_value(model: &PotentialKind, p: &Point, side: f64) -> Result<f64> {
    let radius = side * (3.0 / (4.0 * std::f64::consts::PI)).powf(1.0 / 3.0);
    let vol = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
    match model {
        PotentialKind::RadialPower { .. } => {
            model.exact_ball_integral(p, radius).map(|v| v / vol).ok_or(Error::OutOfDomain(p[0], p[1], p[2]))
        }
        PotentialKind::Piecewise { pieces, default } => {
            let sub = pieces
                .iter()
                .find(|pc| pc.region.contains(p))
                .map(|pc| &pc.model)
                .or(default.as_deref())
                .ok_or(Error::OutOfDomain(p[0], p[1], p[2]))?;
            singular_cell_value(sub, p, side)
        }
        _ => Err(Error::OutOfDomain(p[0], p[1], p[2])),
    }
}

/// Samples the electric potential at every node. Nodes that coincide with a
/// singular point receive the cell average instead.
pub fn sample_potential(model: &PotentialKind, grid: &Grid) -> Result<ScalarField> {
    model.validate()?;
    let singular = model.singular_points();
    let h = grid.spacing();
    let values: Vec<Result<f64>> = par::map_range(grid.len(), |idx| {
        let x = grid.point(idx);
        if singular.iter().any(|s| dist(s, &x) <= 1e-9 * h) {
            return cell_average_rec(model, &singular, &x, h, SINGULAR_DEPTH);
        }
        match model.eval(&x) {
            Some(v) if v.is_finite() => Ok(v),
            _ => Err(Error::OutOfDomain(x[0], x[1], x[2])),
        }
    });
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    ScalarField::new(grid.clone(), values)
}

pub fn sample_vector_potential(model: &MagneticModel, grid: &Grid) -> Result<VectorField> {
    model.validate()?;
    VectorField::from_fn(grid, |x| model.eval(&x))
}

/// `|B|` from the closed-form Jacobian of the model's magnetic part.
pub fn magnetic_field_norm(model: &PotentialModel, grid: &Grid) -> Result<ScalarField> {
    let mag = model.magnetic.as_ref().ok_or(Error::NoMagneticComponent)?;
    mag.validate()?;
    ScalarField::from_fn(grid, |x| mag.field_norm(&x))
}

/// `|B|` of a sampled vector potential by finite differences.
#[derive(Clone, Debug)]
pub struct SampledCurl {
    pub norm: ScalarField,
    /// Nodes where at least one derivative used a one-sided stencil.
    pub one_sided: Vec<bool>,
}

impl SampledCurl {
    pub fn one_sided_count(&self) -> usize {
        self.one_sided.iter().filter(|&&b| b).count()
    }
}

/// Centred second-order differences in the interior, first-order one-sided
/// differences on box faces.
pub fn magnetic_field_norm_sampled(a: &VectorField) -> Result<SampledCurl> {
    let grid = a.grid();
    let dims = grid.dims();
    let h = grid.spacing();
    let results: Vec<(f64, bool)> = par::map_range(grid.len(), |idx| {
        let c = grid.coords(idx);
        let mut jac = [[0.0; 3]; 3];
        let mut one_sided = false;
        for k in 0..3 {
            let mut lo = c;
            let mut hi = c;
            if c[k] > 0 {
                lo[k] -= 1;
            }
            if c[k] + 1 < dims[k] {
                hi[k] += 1;
            }
            let span = (hi[k] - lo[k]) as f64 * h;
            if hi[k] - lo[k] < 2 {
                one_sided = true;
            }
            let il = grid.index(lo[0], lo[1], lo[2]);
            let ih = grid.index(hi[0], hi[1], hi[2]);
            for j in 0..3 {
                let comp = a.component(j);
                jac[j][k] = (comp[ih] - comp[il]) / span;
            }
        }
        (curl_frobenius(&jac), one_sided)
    });
    let (values, one_sided): (Vec<f64>, Vec<bool>) = results.into_iter().unzip();
    Ok(SampledCurl { norm: ScalarField::new(grid.clone(), values)?, one_sided })
}

/// `w = V + |B|`, plus `1/t^2` when a resolvent parameter `t` is given.
pub fn combined_weight(v: &ScalarField, b_norm: &ScalarField, t: Option<f64>) -> Result<ScalarField> {
    v.grid().check_same(b_norm.grid())?;
    let shift = match t {
        Some(t) if t > 0.0 && t.is_finite() => 1.0 / (t * t),
        Some(t) => return Err(Error::InvalidParameter(format!("t must be positive, got {t}"))),
        None => 0.0,
    };
    let values = v.values().iter().zip(b_norm.values()).map(|(a, b)| a + b + shift).collect();
    ScalarField::new(v.grid().clone(), values)
}

/// Adds `1/t^2` to every value.
pub fn shifted_weight(w: &ScalarField, t: f64) -> Result<ScalarField> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("t must be positive, got {t}")));
    }
    w.map(|v| v + 1.0 / (t * t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::cube(-1.0, 1.0, 21).unwrap()
    }

    #[test]
    fn constant_samples_exactly() {
        let f = sample_potential(&PotentialKind::constant(1.0), &grid()).unwrap();
        assert!(f.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn radial_square_at_unit_point() {
        let v = PotentialKind::radial_power(2.0).eval(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn origin_cell_average_matches_midpoint_oracle() {
        // Independent 125-point midpoint rule for |x|^2 on [-0.05, 0.05]^3.
        let h = 0.1;
        let mut acc = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    let p = [i, j, k].map(|t| -0.05 + (t as f64 + 0.5) * h / 5.0);
                    acc += p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
                }
            }
        }
        let oracle = acc / 125.0;
        let got = cell_average(&PotentialKind::radial_power(2.0), &[0.0; 3], h).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.0024).abs() < 1e-15);
        // Analytic cell mean is a^2 with a = h/2; the midpoint rule misses it by
        // exactly 3 * (h/5)^2 / 12.
        let analytic = 0.05f64 * 0.05;
        assert!((analytic - got - 3.0 * (h / 5.0) * (h / 5.0) / 12.0).abs() < 1e-15);
    }

    #[test]
    fn singular_origin_is_cell_averaged() {
        let g = Grid::cube(-1.0, 1.0, 11).unwrap();
        let f = sample_potential(&PotentialKind::radial_power(-1.0), &g).unwrap();
        let origin = g.node_at(&[0.0; 3]).unwrap();
        let v = f.get(origin);
        // Mean of 1/|x| over a cube of side h is about 2.38/h.
        assert!(v.is_finite() && (v * 0.2 - 2.38).abs() < 0.05, "{v}");
    }

    #[test]
    fn rejects_non_integrable_power() {
        let err = sample_potential(&PotentialKind::radial_power(-2.0), &grid()).unwrap_err();
        assert_eq!(err, Error::NonIntegrableSingularity(-2.0));
    }

    #[test]
    fn piecewise_without_default_is_out_of_domain() {
        let kind = PotentialKind::Piecewise {
            pieces: vec![Piece {
                region: Region::Ball { center: [0.0; 3], radius: 0.5 },
                model: PotentialKind::constant(3.0),
            }],
            default: None,
        };
        assert!(matches!(sample_potential(&kind, &grid()), Err(Error::OutOfDomain(..))));
        let kind = PotentialKind::Piecewise {
            pieces: vec![Piece {
                region: Region::Ball { center: [0.0; 3], radius: 0.5 },
                model: PotentialKind::constant(3.0),
            }],
            default: Some(Box::new(PotentialKind::constant(1.0))),
        };
        let f = sample_potential(&kind, &grid()).unwrap();
        assert_eq!(f.max(), 3.0);
        assert_eq!(f.min(), 1.0);
    }

    #[test]
    fn zero_vector_potential_has_no_field() {
        let model = PotentialModel::electric(PotentialKind::constant(0.0)).with_magnetic(MagneticModel::default());
        let b = magnetic_field_norm(&model, &grid()).unwrap();
        assert!(b.values().iter().all(|&v| v == 0.0));
        let no_mag = PotentialModel::electric(PotentialKind::constant(0.0));
        assert_eq!(magnetic_field_norm(&no_mag, &grid()).unwrap_err(), Error::NoMagneticComponent);
    }

    #[test]
    fn uniform_field_curl_by_hand() {
        let m = MagneticModel::uniform([0.0, 0.0, 1.0]);
        let x = [0.3, -0.7, 0.2];
        let a = m.eval(&x);
        assert!((a[0] + x[1] / 2.0).abs() < 1e-15 && (a[1] - x[0] / 2.0).abs() < 1e-15);
        let jac = m.jacobian(&x);
        assert_eq!(jac[0][1] - jac[1][0], -1.0);
        assert!((m.field_norm(&x) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_curl_is_exact_for_linear_potentials() {
        let g = Grid::cube(-1.0, 1.0, 21).unwrap();
        let m = MagneticModel {
            gradient: [[0.1, -0.5, 0.3], [0.5, 0.2, -0.4], [0.7, 0.4, -0.3]],
            offset: [0.2, 0.0, -1.0],
            modes: vec![],
        };
        let a = sample_vector_potential(&m, &g).unwrap();
        let curl = magnetic_field_norm_sampled(&a).unwrap();
        let exact = m.field_norm(&[0.0; 3]);
        for idx in 0..g.len() {
            assert!((curl.norm.get(idx) - exact).abs() < 1e-10);
        }
        assert_eq!(curl.one_sided_count(), g.len() - 19 * 19 * 19);
    }

    #[test]
    fn uniform_field_sampled_curl() {
        let g = Grid::cube(-1.0, 1.0, 21).unwrap();
        let a = sample_vector_potential(&MagneticModel::uniform([0.0, 0.0, 1.0]), &g).unwrap();
        let curl = magnetic_field_norm_sampled(&a).unwrap();
        for idx in 0..g.len() {
            if !curl.one_sided[idx] {
                assert!((curl.norm.get(idx) - 2f64.sqrt()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn combined_weight_examples() {
        let g = grid();
        let one = ScalarField::constant(&g, 1.0);
        let zero = ScalarField::constant(&g, 0.0);
        let root2 = ScalarField::constant(&g, 2f64.sqrt());
        let w = combined_weight(&one, &zero, None).unwrap();
        assert_eq!(w, one);
        let w = combined_weight(&one, &root2, None).unwrap();
        assert!(w.values().iter().all(|&v| v == 1.0 + 2f64.sqrt()));
        let w = combined_weight(&zero, &zero, Some(2.0)).unwrap();
        assert!(w.values().iter().all(|&v| v == 0.25));
        let other = ScalarField::constant(&Grid::cube(-1.0, 1.0, 5).unwrap(), 0.0);
        assert_eq!(combined_weight(&one, &other, None), Err(Error::GridMismatch));
    }

    #[test]
    fn sampling_is_bitwise_deterministic() {
        let kind = PotentialKind::Polynomial {
            terms: vec![
                Monomial { coefficient: 1.0, powers: [2, 0, 0] },
                Monomial { coefficient: -0.5, powers: [0, 1, 1] },
            ],
            exponent: 0.75,
        };
        let a = sample_potential(&kind, &grid()).unwrap();
        let b = sample_potential(&kind, &grid()).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
