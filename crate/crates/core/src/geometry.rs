//! The compact convex state set and the two primitives the solvers use on
//! it: a linear maximization oracle and Euclidean projection.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Boxes up to this dimension have their 2^n vertices enumerated.
pub const MAX_ENUMERATED_BOX_DIM: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: set has dimension {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid feasible set: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FeasibleSet {
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// `{x : x_i >= floor, sum x_i = total}`.
    Simplex {
        dim: usize,
        #[serde(default)]
        floor: f64,
        #[serde(default = "one")]
        total: f64,
    },
    /// Convex hull of the listed vertices.
    Polytope { vertices: Vec<Vec<f64>> },
}

fn one() -> f64 {
    1.0
}

/// Vertex list, or for large boxes the per-coordinate bounds that certify
/// the extreme values of any affine map.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtremePoints {
    Vertices(Vec<Vec<f64>>),
    BoxBounds { lower: Vec<f64>, upper: Vec<f64> },
}

impl FeasibleSet {
    pub fn dim(&self) -> usize {
        match self {
            FeasibleSet::Box { lower, .. } => lower.len(),
            FeasibleSet::Simplex { dim, .. } => *dim,
            FeasibleSet::Polytope { vertices } => vertices.first().map_or(0, Vec::len),
        }
    }

    pub fn check(&self) -> Result<()> {
        let invalid = |m: String| Err(GeometryError::Invalid(m));
        match self {
            FeasibleSet::Box { lower, upper } => {
                if lower.is_empty() {
                    return invalid("box has dimension 0".into());
                }
                if lower.len() != upper.len() {
                    return invalid(format!("box lower has {} entries, upper {}", lower.len(), upper.len()));
                }
                for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
                    if !(l.is_finite() && u.is_finite() && l < u) {
                        return invalid(format!("box coordinate {i}: need finite lower < upper, got [{l}, {u}]"));
                    }
                }
            }
            FeasibleSet::Simplex { dim, floor, total } => {
                if *dim == 0 {
                    return invalid("simplex has dimension 0".into());
                }
                if !(floor.is_finite() && *floor >= 0.0 && total.is_finite() && *total > 0.0) {
                    return invalid(format!("simplex needs floor >= 0 and total > 0, got {floor}, {total}"));
                }
                if *dim as f64 * floor >= *total {
                    return invalid(format!("simplex needs dim * floor < total, got {dim} * {floor} >= {total}"));
                }
            }
            FeasibleSet::Polytope { vertices } => {
                let Some(first) = vertices.first() else {
                    return invalid("polytope has no vertices".into());
                };
                if first.is_empty() {
                    return invalid("polytope vertices have dimension 0".into());
                }
                for (j, v) in vertices.iter().enumerate() {
                    if v.len() != first.len() {
                        return invalid(format!("polytope vertex {j} has dimension {}, expected {}", v.len(), first.len()));
                    }
                    if v.iter().any(|c| !c.is_finite()) {
                        return invalid(format!("polytope vertex {j} has a non-finite coordinate"));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() == self.dim() {
            Ok(())
        } else {
            Err(GeometryError::Dimension { expected: self.dim(), found: v.len() })
        }
    }

    /// An extreme point maximizing `direction . v`. Ties go to the lower
    /// bound per coordinate (box), the lowest coordinate index (simplex), or
    /// the lowest vertex index (polytope).
    pub fn lmo(&self, direction: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(direction)?;
        Ok(match self {
            FeasibleSet::Box { lower, upper } => direction
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(d, (l, u))| if *d > 0.0 { *u } else { *l })
                .collect(),
            FeasibleSet::Simplex { dim, floor, total } => {
                let best = argmax_first(direction.iter().copied());
                simplex_vertex(*dim, *floor, *total, best)
            }
            FeasibleSet::Polytope { vertices } => {
                let best = argmax_first(vertices.iter().map(|v| dot(direction, v)));
                vertices[best].clone()
            }
        })
    }

    /// Euclidean projection.
    pub fn project(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(point)?;
        Ok(match self {
            FeasibleSet::Box { lower, upper } => point
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(p, (l, u))| p.clamp(*l, *u))
                .collect(),
            FeasibleSet::Simplex { dim, floor, total } => {
                let shifted: Vec<f64> = point.iter().map(|p| p - floor).collect();
                project_onto_simplex(&shifted, total - *dim as f64 * floor)
                    .into_iter()
                    .map(|w| w + floor)
                    .collect()
            }
            FeasibleSet::Polytope { vertices } => {
                let shifted: Vec<Vec<f64>> = vertices
                    .iter()
                    .map(|v| v.iter().zip(point).map(|(a, b)| a - b).collect())
                    .collect();
                let nearest = min_norm_point(&shifted);
                point.iter().zip(&nearest).map(|(p, d)| p + d).collect()
            }
        })
    }

    pub fn extreme_points(&self) -> ExtremePoints {
        match self {
            FeasibleSet::Box { lower, upper } => {
                let n = lower.len();
                if n > MAX_ENUMERATED_BOX_DIM {
                    return ExtremePoints::BoxBounds { lower: lower.clone(), upper: upper.clone() };
                }
                let verts = (0u64..1 << n)
                    .map(|mask| {
                        (0..n)
                            .map(|i| if mask >> i & 1 == 1 { upper[i] } else { lower[i] })
                            .collect()
                    })
                    .collect();
                ExtremePoints::Vertices(verts)
            }
            FeasibleSet::Simplex { dim, floor, total } => {
                ExtremePoints::Vertices((0..*dim).map(|j| simplex_vertex(*dim, *floor, *total, j)).collect())
            }
            FeasibleSet::Polytope { vertices } => ExtremePoints::Vertices(vertices.clone()),
        }
    }

    /// Box centre, or centroid of the vertices.
    pub fn interior_point(&self) -> Vec<f64> {
        match self {
            FeasibleSet::Box { lower, upper } => lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect(),
            FeasibleSet::Simplex { dim, total, .. } => vec![total / *dim as f64; *dim],
            FeasibleSet::Polytope { vertices } => {
                let k = vertices.len() as f64;
                let mut c = vec![0.0; self.dim()];
                for v in vertices {
                    for (ci, vi) in c.iter_mut().zip(v) {
                        *ci += vi;
                    }
                }
                c.iter().map(|ci| ci / k).collect()
            }
        }
    }

    /// Membership up to an absolute tolerance.
    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        if point.len() != self.dim() || point.iter().any(|p| !p.is_finite()) {
            return false;
        }
        match self {
            FeasibleSet::Box { lower, upper } => point
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(p, (l, u))| *p >= l - tol && *p <= u + tol),
            FeasibleSet::Simplex { floor, total, .. } => {
                point.iter().all(|p| *p >= floor - tol) && (point.iter().sum::<f64>() - total).abs() <= tol
            }
            FeasibleSet::Polytope { .. } => match self.project(point) {
                Ok(q) => dist(point, &q) <= tol,
                Err(_) => false,
            },
        }
    }

    /// A random feasible point: uniform on boxes, Dirichlet(1) weights on
    /// simplex and polytope vertices.
    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            FeasibleSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| l + (u - l) * rng.random::<f64>())
                .collect(),
            FeasibleSet::Simplex { dim, floor, total } => {
                let w = dirichlet_weights(*dim, rng);
                let free = total - *dim as f64 * floor;
                w.iter().map(|wi| floor + free * wi).collect()
            }
            FeasibleSet::Polytope { vertices } => {
                let w = dirichlet_weights(vertices.len(), rng);
                let mut x = vec![0.0; self.dim()];
                for (v, wi) in vertices.iter().zip(&w) {
                    for (xi, vi) in x.iter_mut().zip(v) {
                        *xi += wi * vi;
                    }
                }
                x
            }
        }
    }
}

fn dirichlet_weights<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn simplex_vertex(dim: usize, floor: f64, total: f64, j: usize) -> Vec<f64> {
    let mut v = vec![floor; dim];
    v[j] = total - (dim - 1) as f64 * floor;
    v
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Projection onto `{w >= 0, sum w = radius}` by sorting.
pub fn project_onto_simplex(point: &[f64], radius: f64) -> Vec<f64> {
    let mut sorted = point.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - radius) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    point.iter().map(|p| (p - theta).max(0.0)).collect()
}

/// Minimum-norm point of the convex hull of `points` (Wolfe's algorithm).
fn min_norm_point(points: &[Vec<f64>]) -> Vec<f64> {
    let scale = points.iter().map(|p| dot(p, p)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-14 * scale;

    let start = argmax_first(points.iter().map(|p| -dot(p, p)));
    let mut active: Vec<usize> = vec![start];
    let mut weights: Vec<f64> = vec![1.0];
    let combine = |active: &[usize], w: &[f64]| -> Vec<f64> {
        let mut x = vec![0.0; points[0].len()];
        for (&j, wj) in active.iter().zip(w) {
            for (xi, pi) in x.iter_mut().zip(&points[j]) {
                *xi += wj * pi;
            }
        }
        x
    };
    let mut x = points[start].clone();

    for _ in 0..(10 * points.len() + 100) {
        // major cycle
        let xx = dot(&x, &x);
        let j = argmax_first(points.iter().map(|p| -dot(&x, p)));
        if xx - dot(&x, &points[j]) <= tol || active.contains(&j) {
            break;
        }
        active.push(j);
        weights.push(0.0);

        // minor cycles
        loop {
            let Some(affine) = affine_min_norm_weights(points, &active) else {
                break;
            };
            if affine.iter().all(|&a| a > 1e-15) {
                weights = affine;
                break;
            }
            let mut theta = 1.0f64;
            for (w, a) in weights.iter().zip(&affine) {
                if *a <= 1e-15 && w - a > 0.0 {
                    theta = theta.min(w / (w - a));
                }
            }
            for (w, a) in weights.iter_mut().zip(&affine) {
                *w = theta * a + (1.0 - theta) * *w;
            }
            let mut k = 0;
            while k < active.len() {
                if weights[k] <= 1e-15 {
                    active.remove(k);
                    weights.remove(k);
                } else {
                    k += 1;
                }
            }
            let s: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= s);
            if active.len() <= 1 {
                break;
            }
        }
        x = combine(&active, &weights);
    }
    x
}

/// Weights of the minimum-norm point of the affine hull of the active
/// points, from the bordered normal equations.
fn affine_min_norm_weights(points: &[Vec<f64>], active: &[usize]) -> Option<Vec<f64>> {
    let k = active.len();
    let mut m = DMatrix::<f64>::zeros(k + 1, k + 1);
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            m[(a, b)] = dot(&points[i], &points[j]);
        }
        m[(a, k)] = 1.0;
        m[(k, a)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(k + 1);
    rhs[k] = 1.0;
    let sol = m.lu().solve(&rhs)?;
    let w: Vec<f64> = sol.iter().take(k).copied().collect();
    w.iter().all(|v| v.is_finite()).then_some(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_box(n: usize) -> FeasibleSet {
        FeasibleSet::Box { lower: vec![0.0; n], upper: vec![1.0; n] }
    }

    #[test]
    fn lmo_examples() {
        assert_eq!(unit_box(2).lmo(&[1.0, -1.0]).unwrap(), vec![1.0, 0.0]);
        let s = FeasibleSet::Simplex { dim: 3, floor: 0.0, total: 1.0 };
        assert_eq!(s.lmo(&[0.2, 0.9, 0.9]).unwrap(), vec![0.0, 1.0, 0.0]);
        let p = FeasibleSet::Polytope { vertices: vec![vec![0.0, 0.0], vec![2.0, 1.0]] };
        assert_eq!(p.lmo(&[1.0, 1.0]).unwrap(), vec![2.0, 1.0]);
        assert!(matches!(p.lmo(&[1.0]), Err(GeometryError::Dimension { expected: 2, found: 1 })));
    }

    #[test]
    fn project_examples() {
        assert_eq!(unit_box(2).project(&[2.0, 0.5]).unwrap(), vec![1.0, 0.5]);
        let s2 = FeasibleSet::Simplex { dim: 2, floor: 0.0, total: 1.0 };
        assert_eq!(s2.project(&[0.8, 0.8]).unwrap(), vec![0.5, 0.5]);

        let s3 = FeasibleSet::Simplex { dim: 3, floor: 0.0, total: 1.0 };
        let p = [1.1, 0.2, 0.1];
        let q = s3.project(&p).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let ExtremePoints::Vertices(vs) = s3.extreme_points() else { unreachable!() };
        for v in vs {
            let ip: f64 = (0..3).map(|i| (p[i] - q[i]) * (v[i] - q[i])).sum();
            assert!(ip <= 1e-12, "variational inequality violated: {ip}");
        }
    }

    #[test]
    fn polytope_projection_matches_segment_formula() {
        let p = FeasibleSet::Polytope { vertices: vec![vec![0.2, 0.8], vec![0.8, 0.2]] };
        // closest point on the segment to (1, 1) is its midpoint
        let q = p.project(&[1.0, 1.0]).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12, "{q:?}");
        // beyond an endpoint
        let q = p.project(&[2.0, -1.0]).unwrap();
        assert!((q[0] - 0.8).abs() < 1e-12 && (q[1] - 0.2).abs() < 1e-12, "{q:?}");
        // already inside
        let q = p.project(&[0.4, 0.6]).unwrap();
        assert!((q[0] - 0.4).abs() < 1e-12 && (q[1] - 0.6).abs() < 1e-12, "{q:?}");
    }

    #[test]
    fn extreme_points_examples() {
        let s = FeasibleSet::Simplex { dim: 3, floor: 0.1, total: 1.0 };
        let ExtremePoints::Vertices(vs) = s.extreme_points() else { unreachable!() };
        assert_eq!(vs.len(), 3);
        assert!((vs[0][0] - 0.8).abs() < 1e-15 && vs[0][1] == 0.1 && vs[0][2] == 0.1);
        assert_eq!(unit_box(1).extreme_points(), ExtremePoints::Vertices(vec![vec![0.0], vec![1.0]]));
        let verts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let p = FeasibleSet::Polytope { vertices: verts.clone() };
        assert_eq!(p.extreme_points(), ExtremePoints::Vertices(verts));
        assert!(matches!(unit_box(21).extreme_points(), ExtremePoints::BoxBounds { .. }));
    }

    #[test]
    fn interior_point_examples() {
        let b = FeasibleSet::Box { lower: vec![0.0, 0.0], upper: vec![2.0, 4.0] };
        assert_eq!(b.interior_point(), vec![1.0, 2.0]);
        let s = FeasibleSet::Simplex { dim: 2, floor: 0.0, total: 1.0 };
        assert_eq!(s.interior_point(), vec![0.5, 0.5]);
        let p = FeasibleSet::Polytope { vertices: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]] };
        let c = p.interior_point();
        assert!((c[0] - 1.0 / 3.0).abs() < 1e-15 && (c[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn check_rejects_malformed_sets() {
        assert!(FeasibleSet::Box { lower: vec![1.0], upper: vec![1.0] }.check().is_err());
        assert!(FeasibleSet::Simplex { dim: 3, floor: 0.4, total: 1.0 }.check().is_err());
        assert!(FeasibleSet::Polytope { vertices: vec![] }.check().is_err());
        assert!(FeasibleSet::Polytope { vertices: vec![vec![0.0], vec![0.0, 1.0]] }.check().is_err());
    }

    #[test]
    fn json_fragments() {
        let s: FeasibleSet = serde_json::from_str(r#"{"kind":"simplex","dim":3}"#).unwrap();
        assert_eq!(s, FeasibleSet::Simplex { dim: 3, floor: 0.0, total: 1.0 });
        let b: FeasibleSet = serde_json::from_str(r#"{"kind":"box","lower":[0],"upper":[1]}"#).unwrap();
        assert_eq!(b, unit_box(1));
        assert!(serde_json::from_str::<FeasibleSet>(r#"{"kind":"ball","radius":1}"#).is_err());
    }

    fn arb_set() -> impl Strategy<Value = FeasibleSet> {
        prop_oneof![
            (1usize..5).prop_flat_map(|n| {
                (prop::collection::vec(-3.0f64..3.0, n), prop::collection::vec(0.1f64..3.0, n)).prop_map(|(lo, w)| {
                    let up = lo.iter().zip(&w).map(|(l, w)| l + w).collect();
                    FeasibleSet::Box { lower: lo, upper: up }
                })
            }),
            (1usize..6, 0.0f64..0.1, 0.5f64..3.0).prop_map(|(dim, floor, total)| FeasibleSet::Simplex {
                dim,
                floor: floor * total / dim as f64,
                total
            }),
            (1usize..4).prop_flat_map(|n| {
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, n), 1..7)
                    .prop_map(|vertices| FeasibleSet::Polytope { vertices })
            }),
        ]
    }

    fn arb_set_and_point() -> impl Strategy<Value = (FeasibleSet, Vec<f64>)> {
        arb_set().prop_flat_map(|s| {
            let n = s.dim();
            (Just(s), prop::collection::vec(-5.0f64..5.0, n))
        })
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_variational((set, p) in arb_set_and_point()) {
            let q = set.project(&p).unwrap();
            prop_assert!(set.contains(&q, 1e-9));
            let qq = set.project(&q).unwrap();
            for (a, b) in q.iter().zip(&qq) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{:?} vs {:?}", q, qq);
            }
            let scale = 1.0 + p.iter().map(|v| v * v).sum::<f64>();
            if let ExtremePoints::Vertices(vs) = set.extreme_points() {
                for v in vs {
                    let ip: f64 = (0..p.len()).map(|i| (p[i] - q[i]) * (v[i] - q[i])).sum();
                    prop_assert!(ip <= 1e-10 * scale, "vi residual {}", ip);
                }
            }
        }

        #[test]
        fn lmo_returns_a_best_vertex((set, d) in arb_set_and_point()) {
            let s = set.lmo(&d).unwrap();
            let ExtremePoints::Vertices(vs) = set.extreme_points() else { unreachable!() };
            prop_assert!(vs.contains(&s));
            for v in vs {
                prop_assert!(dot(&d, &s) >= dot(&d, &v) - 1e-12);
            }
        }
    }
}
