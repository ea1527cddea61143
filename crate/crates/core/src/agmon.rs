//! Agmon distance `d(x, y, w)`: shortest paths on the grid graph in the
//! metric `m(·, w)|dx|`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dist, Grid, ScalarField};
use crate::io::DistanceRow;
use crate::par;
use crate::stats::fit_line;
use crate::weights::{MaximalField, PropertyCheck, PropertyReport};

/// Share of unconverged maximal-function values above which distances are refused.
pub const MAX_UNCONVERGED_FRACTION: f64 = 0.10;

/// Worst ratio of 26-neighbour path length to Euclidean length in a flat
/// metric, attained near the lattice direction (22, 9, 7). In the plane the
/// same stencil stays within 8.3%; in space it does not.
pub const METRICATION_LIMIT_26: f64 = 1.128_082_505;

const NO_PRED: u32 = u32::MAX;

/// Grid-graph neighbourhood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(format!("connectivity must be 6, 18 or 26, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Integer offsets of the neighbourhood, in a fixed order.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let max_norm1 = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let n1 = dx.abs() + dy.abs() + dz.abs();
                    if n1 > 0 && n1 <= max_norm1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Distances from a source node or node set.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub d_values: ScalarField,
    pub sources: Vec<usize>,
    pub connectivity: Connectivity,
    /// Predecessor on the shortest-path tree (`None` at sources).
    predecessor: Vec<u32>,
    /// Boundary nodes on a shortest path between a source and an interior node.
    pub boundary_tree_nodes: usize,
    /// Nodes whose `m` value was box-clipped.
    pub low_confidence_nodes: usize,
}

impl DistanceField {
    pub fn grid(&self) -> &Grid {
        self.d_values.grid()
    }

    pub fn d(&self, idx: usize) -> f64 {
        self.d_values.get(idx)
    }

    pub fn predecessor(&self, idx: usize) -> Option<usize> {
        let p = self.predecessor[idx];
        (p != NO_PRED).then_some(p as usize)
    }

    /// Node chain from `idx` back to its source.
    pub fn path_to(&self, idx: usize) -> Vec<usize> {
        let mut path = vec![idx];
        let mut cur = idx;
        while let Some(p) = self.predecessor(cur) {
            path.push(p);
            cur = p;
        }
        path
    }

    /// True when some geodesic runs along the box boundary, so the value
    /// may be larger than the whole-space distance.
    pub fn hugs_boundary(&self) -> bool {
        self.boundary_tree_nodes > 0
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    d: f64,
    idx: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Reversed so the max-heap pops the smallest distance; ties by index.
    fn cmp(&self, other: &Self) -> Ordering {
        other.d.total_cmp(&self.d).then(other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source Dijkstra with edge weight `(m(p) + m(q))/2 · |p − q|`.
/// `m` may be any positive metric density on the grid.
pub fn metric_distance(m: &ScalarField, sources: &[usize], connectivity: Connectivity) -> Result<DistanceField> {
    let grid = m.grid();
    if sources.is_empty() {
        return Err(Error::EmptySource);
    }
    if let Some(&s) = sources.iter().find(|&&s| s >= grid.len()) {
        return Err(Error::InvalidParameter(format!("source index {s} outside the grid")));
    }
    if m.values().iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidParameter("metric density must be positive".into()));
    }
    let h = grid.spacing();
    let nbrs: Vec<([i64; 3], f64)> = connectivity
        .offsets()
        .into_iter()
        .map(|o| (o, h * ((o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) as f64).sqrt()))
        .collect();
    let n = grid.len();
    let mut d = vec![f64::INFINITY; n];
    let mut pred = vec![NO_PRED; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        d[s] = 0.0;
        heap.push(Entry { d: 0.0, idx: s });
    }
    while let Some(Entry { d: du, idx: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        let cu = grid.coords(u);
        let mu = m.get(u);
        for &(o, len) in &nbrs {
            let Some(v) = grid.offset(cu, o) else { continue };
            if done[v] {
                continue;
            }
            let cand = du + 0.5 * (mu + m.get(v)) * len;
            if cand < d[v] {
                d[v] = cand;
                pred[v] = u as u32;
                heap.push(Entry { d: cand, idx: v });
            }
        }
    }
    // Boundary nodes through which some geodesic re-enters the interior.
    let mut hug = vec![false; n];
    for (v, &p) in pred.iter().enumerate() {
        if p != NO_PRED && grid.is_boundary(p as usize) && !grid.is_boundary(v) && pred[p as usize] != NO_PRED {
            hug[p as usize] = true;
        }
    }
    let boundary_tree_nodes = hug.iter().filter(|&&b| b).count();
    Ok(DistanceField {
        d_values: ScalarField::new(grid.clone(), d)?,
        sources: sources.to_vec(),
        connectivity,
        predecessor: pred,
        boundary_tree_nodes,
        low_confidence_nodes: 0,
    })
}

/// Agmon distance to a node or node set, refusing metrics with more than
/// 10% unconverged maximal-function values.
pub fn agmon_distance(m_field: &MaximalField, sources: &[usize], connectivity: Connectivity) -> Result<DistanceField> {
    let unconverged = m_field.unconverged_count();
    let total = m_field.flags.len();
    if unconverged as f64 > MAX_UNCONVERGED_FRACTION * total as f64 {
        return Err(Error::UnconvergedMetric { unconverged, total });
    }
    let mut out = metric_distance(&m_field.m_values, sources, connectivity)?;
    out.low_confidence_nodes = unconverged;
    Ok(out)
}

/// One single-source field per entry of `sources`, computed concurrently.
pub fn agmon_distances(
    m_field: &MaximalField,
    sources: &[usize],
    connectivity: Connectivity,
) -> Result<Vec<DistanceField>> {
    par::map_slice(sources, |&s| agmon_distance(m_field, &[s], connectivity)).into_iter().collect()
}

/// Pairwise table rows; one Dijkstra run per distinct source.
pub fn distance_table(
    m_field: &MaximalField,
    pairs: &[(usize, usize)],
    connectivity: Connectivity,
) -> Result<Vec<DistanceRow>> {
    let mut sources: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    sources.sort_unstable();
    sources.dedup();
    let fields = agmon_distances(m_field, &sources, connectivity)?;
    let grid = m_field.grid();
    Ok(pairs
        .iter()
        .map(|&(x, y)| {
            let f = &fields[sources.binary_search(&x).expect("source listed")];
            DistanceRow { x_idx: x, y_idx: y, euclid: dist(&grid.point(x), &grid.point(y)), agmon_d: f.d(y) }
        })
        .collect())
}

/// Checks on single-source distance fields: `d` bounded on `m`-scale
/// neighbourhoods, lower growth of `d` in `1 + |x − y| m(x)`, and the
/// separation constant for `x ∉ B(y, 2/m(y))`.
pub fn check_distance_lemmas(fields: &[DistanceField], m_field: &MaximalField, seed: u64) -> Result<PropertyReport> {
    let grid = m_field.grid();
    for f in fields {
        grid.check_same(f.grid())?;
        if f.sources.len() != 1 {
            return Err(Error::InvalidParameter("distance lemmas need single-source fields".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_field = 400;
    let (mut near_sup, mut near_n) = (0.0f64, 0usize);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let (mut sep_const, mut sep_n) = (0.0f64, 0usize);
    for f in fields {
        let x = f.sources[0];
        let px = grid.point(x);
        let mx = m_field.m(x);
        for _ in 0..per_field {
            let y = rng.gen_range(0..grid.len());
            if y == x {
                continue;
            }
            let r = dist(&px, &grid.point(y));
            let s = r * mx;
            let d = f.d(y);
            if s <= 1.0 {
                near_sup = near_sup.max(d);
                near_n += 1;
            } else if s >= 2.0 {
                xs.push((1.0 + s).ln());
                ys.push(d.ln());
            }
            // Smallest constant C with |x − y| ≥ C/m(x) ⇒ x ∉ B(y, 2/m(y)).
            if r < 2.0 / m_field.m(y) {
                sep_const = sep_const.max(s);
                sep_n += 1;
            }
        }
    }
    let fit = fit_line(&xs, &ys);
    let exponent = fit.map_or(f64::NAN, |f| f.slope);
    let theta = exponent.min(1.0);
    let growth_const = xs.iter().zip(&ys).map(|(&lx, &ly)| (ly - theta * lx).exp()).fold(f64::INFINITY, f64::min);
    Ok(PropertyReport {
        checks: vec![
            PropertyCheck {
                name: "d_bounded_near".into(),
                measured: near_sup,
                bound: None,
                samples: near_n,
                verdict: near_sup.is_finite(),
            },
            PropertyCheck {
                name: "d_growth_exponent".into(),
                measured: exponent,
                bound: None,
                samples: xs.len(),
                verdict: exponent.is_finite() && exponent > 0.0,
            },
            PropertyCheck {
                name: "d_growth_constant".into(),
                measured: growth_const,
                bound: None,
                samples: xs.len(),
                verdict: growth_const.is_finite() && growth_const > 0.0,
            },
            PropertyCheck {
                name: "separation_constant".into(),
                measured: sep_const,
                bound: None,
                samples: sep_n,
                verdict: sep_const.is_finite(),
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;

    fn constant_metric(n: usize, m: f64) -> ScalarField {
        ScalarField::constant(&Grid::cube(-1.0, 1.0, n).unwrap(), m)
    }

    #[test]
    fn neighbourhood_sizes() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn axis_and_diagonal_targets_are_exact_for_constant_metric() {
        let m = constant_metric(21, 2.0);
        let g = m.grid();
        let s = g.index(10, 10, 10);
        let f = metric_distance(&m, &[s], Connectivity::TwentySix).unwrap();
        assert_eq!(f.d(s), 0.0);
        for t in [g.index(20, 10, 10), g.index(15, 15, 10), g.index(14, 14, 14)] {
            let e = 2.0 * dist(&g.point(s), &g.point(t));
            assert!((f.d(t) - e).abs() < 1e-12 * e, "{} vs {e}", f.d(t));
        }
        // Knight move (2, 1, 0): best 26-path is one diagonal plus one axis step.
        let t = g.index(12, 11, 10);
        let ratio = f.d(t) / (2.0 * dist(&g.point(s), &g.point(t)));
        assert!((ratio - (1.0 + 2f64.sqrt()) / 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn six_neighbour_distance_is_manhattan() {
        let m = constant_metric(9, 1.0);
        let g = m.grid();
        let f = metric_distance(&m, &[0], Connectivity::Six).unwrap();
        let t = g.index(3, 2, 1);
        assert!((f.d(t) - 6.0 * g.spacing()).abs() < 1e-12);
        assert_eq!(f.path_to(t).len(), 7);
    }

    #[test]
    fn empty_source_is_rejected() {
        assert_eq!(metric_distance(&constant_metric(5, 1.0), &[], Connectivity::TwentySix), Err(Error::EmptySource));
    }

    #[test]
    fn set_distance_is_minimum_over_members() {
        let g = Grid::cube(0.0, 1.0, 8).unwrap();
        let m = ScalarField::from_fn(&g, |x| 1.0 + x[0] * x[0] + (3.0 * x[1]).sin().abs()).unwrap();
        let set = [g.index(1, 1, 1), g.index(6, 2, 5), g.index(3, 7, 0)];
        let joint = metric_distance(&m, &set, Connectivity::TwentySix).unwrap();
        let single: Vec<_> = set.iter().map(|&s| metric_distance(&m, &[s], Connectivity::TwentySix).unwrap()).collect();
        for i in 0..g.len() {
            let brute = single.iter().map(|f| f.d(i)).fold(f64::INFINITY, f64::min);
            assert_eq!(joint.d(i), brute);
        }
    }

    #[test]
    fn boundary_geodesics_are_reported() {
        // A cheap corridor along the face y = 0 pulls paths onto the boundary.
        let g = Grid::cube(0.0, 1.0, 9).unwrap();
        let m = ScalarField::from_fn(&g, |x| if x[1] == 0.0 { 0.1 } else { 10.0 }).unwrap();
        let f = metric_distance(&m, &[g.index(0, 1, 4)], Connectivity::TwentySix).unwrap();
        assert!(f.hugs_boundary());
        let flat = metric_distance(&constant_metric(9, 1.0), &[g.index(4, 4, 4)], Connectivity::TwentySix).unwrap();
        assert!(!flat.hugs_boundary());
    }

    #[test]
    fn constant_metric_lemmas() {
        let g = Grid::cube(-1.0, 1.0, 17).unwrap();
        let w = ScalarField::constant(&g, 1.0);
        let mf = crate::weights::maximal_field(&w).unwrap();
        let sources = [g.index(8, 8, 8), g.index(4, 9, 8)];
        let fields = agmon_distances(&mf, &sources, Connectivity::TwentySix).unwrap();
        let rep = check_distance_lemmas(&fields, &mf, 3).unwrap();
        assert!(rep.all_pass());
        // d ≤ METRICATION_LIMIT_26 · m|x − y| on m-scale neighbourhoods.
        assert!(rep.get("d_bounded_near").unwrap().measured <= METRICATION_LIMIT_26);
        // Exact law d = s ≥ (1 + s)/2 when s ≥ 2.
        let f = &fields[0];
        let mx = mf.m(sources[0]);
        for i in 0..g.len() {
            let s = dist(&g.point(i), &g.point(sources[0])) * mx;
            if s >= 2.0 {
                assert!(f.d(i) >= (1.0 + s) / 2.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn symmetric_and_triangle(vals in proptest::collection::vec(0.2f64..5.0, 216), a in 0usize..216, b in 0usize..216, c in 0usize..216) {
            let g = Grid::cube(0.0, 1.0, 6).unwrap();
            let m = ScalarField::new(g, vals).unwrap();
            let da = metric_distance(&m, &[a], Connectivity::TwentySix).unwrap();
            let db = metric_distance(&m, &[b], Connectivity::TwentySix).unwrap();
            prop_assert!((da.d(b) - db.d(a)).abs() <= 1e-12 * (1.0 + da.d(b)));
            prop_assert!(da.d(c) <= da.d(b) + db.d(c) + 1e-12);
        }

        #[test]
        fn monotone_in_metric(vals in proptest::collection::vec(0.2f64..5.0, 216), bump in proptest::collection::vec(0.0f64..2.0, 216), s in 0usize..216) {
            let g = Grid::cube(0.0, 1.0, 6).unwrap();
            let m1 = ScalarField::new(g.clone(), vals.clone()).unwrap();
            let m2 = ScalarField::new(g, vals.iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
            let d1 = metric_distance(&m1, &[s], Connectivity::TwentySix).unwrap();
            let d2 = metric_distance(&m2, &[s], Connectivity::TwentySix).unwrap();
            for i in 0..216 {
                prop_assert!(d1.d(i) <= d2.d(i));
            }
        }

        #[test]
        fn flat_metric_within_lattice_limit(m in 0.5f64..3.0, a in 0usize..1331, b in 0usize..1331) {
            prop_assume!(a != b);
            let f = metric_distance(&constant_metric(11, m), &[a], Connectivity::TwentySix).unwrap();
            let exact = m * dist(&f.grid().point(a), &f.grid().point(b));
            let ratio = f.d(b) / exact;
            prop_assert!((1.0 - 1e-12..=METRICATION_LIMIT_26 + 1e-9).contains(&ratio), "ratio {ratio}");
        }
    }
}
