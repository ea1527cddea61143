//! Compensated summation, least-squares lines, supporting envelope lines and
//! Gauss–Legendre nodes.

use serde::{Deserialize, Serialize};

/// Neumaier (improved Kahan) summation.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in iter {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Ordinary least-squares line `y = intercept + slope * x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n: usize,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = neumaier_sum(xs.iter().copied()) / nf;
    let my = neumaier_sum(ys.iter().copied()) / nf;
    let sxx = neumaier_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let sxy = neumaier_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let syy = neumaier_sum(ys.iter().map(|y| (y - my) * (y - my)));
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Some(LinearFit { slope, intercept, r_squared, n })
}

/// A line `y = intercept + slope * x` bounding a point cloud from one side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub slope: f64,
    pub intercept: f64,
}

impl Envelope {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Tightest line lying on or above every point, in the sense of minimal
/// summed vertical gap: the supporting line of the upper convex hull at the
/// mean abscissa.
pub fn upper_envelope(xs: &[f64], ys: &[f64]) -> Option<Envelope> {
    support_line(xs, ys, true)
}

/// Tightest line lying on or below every point (lower hull at the mean abscissa).
pub fn lower_envelope(xs: &[f64], ys: &[f64]) -> Option<Envelope> {
    support_line(xs, ys, false)
}

fn support_line(xs: &[f64], ys: &[f64], upper: bool) -> Option<Envelope> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let sign = if upper { 1.0 } else { -1.0 };
    let mut pts: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(&x, &y)| (x, sign * y)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|b, a| a.0 == b.0);
    if pts.len() < 2 {
        return None;
    }
    // Upper hull by the monotone chain.
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let mean = neumaier_sum(xs.iter().copied()) / xs.len() as f64;
    let seg = hull.windows(2).find(|w| mean <= w[1].0).unwrap_or(&hull[hull.len() - 2..]);
    let slope = (seg[1].1 - seg[0].1) / (seg[1].0 - seg[0].0);
    let intercept = seg[0].1 - slope * seg[0].0;
    // Snap the intercept so that every point is on the correct side despite rounding.
    let lift = xs.iter().zip(ys).map(|(&x, &y)| sign * y - (intercept + slope * x)).fold(0.0, f64::max);
    Some(Envelope { slope: sign * slope, intercept: sign * (intercept + lift) })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let dp = legendre(n, x).1;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(neumaier_sum(v), 2.0);
    }

    #[test]
    fn exact_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 0.5 * x).collect();
        let fit = fit_line(&xs, &ys).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-14);
        assert!((fit.intercept - 3.0).abs() < 1e-13);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let up = upper_envelope(&xs, &ys).unwrap();
        assert!((up.slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in [1, 2, 5, 16, 33] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            for deg in 0..(2 * n) {
                let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((got - exact).abs() < 1e-12, "n={n} deg={deg}");
            }
        }
    }

    proptest! {
        #[test]
        fn envelopes_bound_every_point(pts in prop::collection::vec((0.0f64..10.0, -5.0f64..5.0), 3..60)) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let (Some(u), Some(l)) = (upper_envelope(&xs, &ys), lower_envelope(&xs, &ys)) {
                for (&x, &y) in xs.iter().zip(&ys) {
                    prop_assert!(u.eval(x) >= y - 1e-9);
                    prop_assert!(l.eval(x) <= y + 1e-9);
                }
            }
        }
    }
}
