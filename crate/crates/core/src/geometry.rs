//! Convex polytopes in halfspace form, labeled output regions, and backward
//! reachable sets.

use serde::{Deserialize, Serialize};

use crate::linalg::{Mat, Vect};
use crate::speclang::Letter;

/// Absolute tolerance on normalized halfspaces.
pub const TOL_GEO: f64 = 1e-9;

/// Cap on the number of constraint subsets visited by exact vertex enumeration
/// and projection.
const MAX_SUBSETS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty result: {0}")]
    EmptyResult(String),
    #[error("unsupported polytope operation: {0}")]
    Unsupported(String),
    #[error("invalid polytope: {0}")]
    Invalid(String),
}

/// `{x : H x ≤ h}` with unit-norm rows of `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    dim: usize,
    normals: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    /// Set when the polytope is an axis-aligned box.
    bounds: Option<(Vec<f64>, Vec<f64>)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn for_each_subset(m: usize, k: usize, f: &mut dyn FnMut(&[usize]) -> bool) {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize]) -> bool) -> bool {
        if cur.len() == k {
            return f(cur);
        }
        for i in start..m {
            cur.push(i);
            if !rec(i + 1, m, k, cur, f) {
                return false;
            }
            cur.pop();
        }
        true
    }
    rec(0, m, k, &mut Vec::with_capacity(k), f);
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut r: usize = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

impl Polytope {
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self, GeometryError> {
        if lower.len() != upper.len() {
            return Err(GeometryError::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.iter().zip(upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(GeometryError::Invalid(format!("box bounds {lower:?} / {upper:?}")));
        }
        let n = lower.len();
        let mut normals = Vec::with_capacity(2 * n);
        let mut offsets = Vec::with_capacity(2 * n);
        for d in 0..n {
            let mut e = vec![0.0; n];
            e[d] = 1.0;
            normals.push(e.clone());
            offsets.push(upper[d]);
            e[d] = -1.0;
            normals.push(e);
            offsets.push(-lower[d]);
        }
        Ok(Self { dim: n, normals, offsets, bounds: Some((lower.to_vec(), upper.to_vec())) })
    }

    /// Builds from `H x ≤ h`, normalizing rows. Zero rows with a nonnegative
    /// right-hand side are dropped; a violated zero row yields `EmptyResult`.
    pub fn from_halfspaces(h_rows: &[Vec<f64>], h: &[f64]) -> Result<Self, GeometryError> {
        if h_rows.len() != h.len() {
            return Err(GeometryError::DimensionMismatch { expected: h_rows.len(), got: h.len() });
        }
        let dim = h_rows.first().map(Vec::len).ok_or_else(|| GeometryError::Invalid("no halfspaces".into()))?;
        let mut normals = Vec::new();
        let mut offsets = Vec::new();
        for (row, &rhs) in h_rows.iter().zip(h) {
            if row.len() != dim {
                return Err(GeometryError::DimensionMismatch { expected: dim, got: row.len() });
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                if rhs < -TOL_GEO {
                    return Err(GeometryError::EmptyResult("infeasible constant constraint".into()));
                }
                continue;
            }
            normals.push(row.iter().map(|v| v / norm).collect());
            offsets.push(rhs / norm);
        }
        let mut p = Self { dim, normals, offsets, bounds: None };
        p.detect_box();
        Ok(p)
    }

    /// Convex hull of a vertex list (dimension 1 or 2).
    pub fn from_vertices(points: &[Vec<f64>]) -> Result<Self, GeometryError> {
        let dim = points.first().map(Vec::len).ok_or_else(|| GeometryError::Invalid("no vertices".into()))?;
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(GeometryError::DimensionMismatch { expected: dim, got: p.len() });
        }
        match dim {
            1 => {
                let lo = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
                let hi = points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
                Self::from_box(&[lo], &[hi])
            }
            2 => {
                let hull = convex_hull_2d(points);
                if hull.len() < 3 {
                    return Err(GeometryError::Invalid("vertices do not span a 2-D region".into()));
                }
                let mut rows = Vec::new();
                let mut rhs = Vec::new();
                for i in 0..hull.len() {
                    let a = &hull[i];
                    let b = &hull[(i + 1) % hull.len()];
                    // Counter-clockwise hull: outward normal is (dy, -dx).
                    let nrm = vec![b[1] - a[1], a[0] - b[0]];
                    rhs.push(dot(&nrm, a));
                    rows.push(nrm);
                }
                Self::from_halfspaces(&rows, &rhs)
            }
            _ => Err(GeometryError::Unsupported(format!("vertex input in dimension {dim}"))),
        }
    }

    fn detect_box(&mut self) {
        let n = self.dim;
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for (row, &b) in self.normals.iter().zip(&self.offsets) {
            let nz: Vec<usize> = (0..n).filter(|&d| row[d].abs() > 1e-14).collect();
            if nz.len() != 1 {
                return;
            }
            let d = nz[0];
            if row[d] > 0.0 {
                hi[d] = hi[d].min(b / row[d]);
            } else {
                lo[d] = lo[d].max(b / row[d]);
            }
        }
        if lo.iter().chain(&hi).all(|v| v.is_finite()) {
            self.bounds = Some((lo, hi));
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normals(&self) -> &[Vec<f64>] {
        &self.normals
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn box_bounds(&self) -> Option<(&[f64], &[f64])> {
        self.bounds.as_ref().map(|(l, u)| (l.as_slice(), u.as_slice()))
    }

    pub fn is_box(&self) -> bool {
        self.bounds.is_some()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), GeometryError> {
        if x.len() != self.dim {
            return Err(GeometryError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    /// Largest constraint violation `max_i (H_i x − h_i)`; equals minus the
    /// depth for interior points.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(r, &b)| dot(r, x) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool, GeometryError> {
        self.check_dim(x)?;
        Ok(self.max_violation(x) <= TOL_GEO)
    }

    /// Euclidean distance to the polytope for outside points, minus the depth
    /// (distance to the boundary) for inside points.
    pub fn signed_distance(&self, y: &[f64]) -> Result<f64, GeometryError> {
        self.check_dim(y)?;
        let viol = self.max_violation(y);
        if viol <= 0.0 {
            return Ok(viol);
        }
        if let Some((lo, hi)) = &self.bounds {
            let d2: f64 = (0..self.dim)
                .map(|d| {
                    let c = y[d].clamp(lo[d], hi[d]);
                    (y[d] - c).powi(2)
                })
                .sum();
            return Ok(d2.sqrt());
        }
        let z = self.project(y)?;
        Ok(z.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    }

    /// Euclidean projection of an outside point onto the polytope.
    pub fn project(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        self.check_dim(y)?;
        if let Some((lo, hi)) = &self.bounds {
            return Ok((0..self.dim).map(|d| y[d].clamp(lo[d], hi[d])).collect());
        }
        if self.max_violation(y) <= 0.0 {
            return Ok(y.to_vec());
        }
        let m = self.normals.len();
        let total: usize = (1..=self.dim.min(m)).map(|k| binomial(m, k)).sum();
        if total > MAX_SUBSETS {
            return Ok(self.project_dykstra(y));
        }
        let yv = Vect::from_column_slice(y);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 1..=self.dim.min(m) {
            for_each_subset(m, k, &mut |s| {
                let hs = Mat::from_fn(k, self.dim, |i, j| self.normals[s[i]][j]);
                let bs = Vect::from_iterator(k, s.iter().map(|&i| self.offsets[i]));
                let gram = &hs * hs.transpose();
                if let Some(inv) = gram.try_inverse() {
                    let lam = inv * (&hs * &yv - bs);
                    let z = &yv - hs.transpose() * lam;
                    let zs: Vec<f64> = z.iter().copied().collect();
                    if self.max_violation(&zs) <= TOL_GEO {
                        let d = (&z - &yv).norm();
                        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                            best = Some((d, zs));
                        }
                    }
                }
                true
            });
        }
        best.map(|(_, z)| z).ok_or_else(|| GeometryError::EmptyResult("projection onto empty polytope".into()))
    }

    fn project_dykstra(&self, y: &[f64]) -> Vec<f64> {
        let m = self.normals.len();
        let mut x = y.to_vec();
        let mut incr = vec![vec![0.0; self.dim]; m];
        for _ in 0..10_000 {
            let prev = x.clone();
            for i in 0..m {
                let z: Vec<f64> = x.iter().zip(&incr[i]).map(|(a, b)| a + b).collect();
                let v = dot(&self.normals[i], &z) - self.offsets[i];
                let proj: Vec<f64> = if v > 0.0 {
                    z.iter().zip(&self.normals[i]).map(|(a, n)| a - v * n).collect()
                } else {
                    z.clone()
                };
                incr[i] = z.iter().zip(&proj).map(|(a, b)| a - b).collect();
                x = proj;
            }
            if x.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-13 {
                break;
            }
        }
        x
    }

    /// Vertex list. Boxes are enumerated directly; other polytopes only up to
    /// dimension 3.
    pub fn vertices(&self) -> Result<Vec<Vec<f64>>, GeometryError> {
        if let Some((lo, hi)) = &self.bounds {
            if self.dim > 16 {
                return Err(GeometryError::Unsupported(format!("box corners in dimension {}", self.dim)));
            }
            return Ok((0..1usize << self.dim)
                .map(|mask| (0..self.dim).map(|d| if mask & (1 << d) != 0 { hi[d] } else { lo[d] }).collect())
                .collect());
        }
        if self.dim > 3 {
            return Err(GeometryError::Unsupported(format!("vertex enumeration in dimension {}", self.dim)));
        }
        let m = self.normals.len();
        if binomial(m, self.dim) > MAX_SUBSETS {
            return Err(GeometryError::Unsupported(format!("{m} halfspaces")));
        }
        let mut out: Vec<Vec<f64>> = Vec::new();
        for_each_subset(m, self.dim, &mut |s| {
            let hs = Mat::from_fn(self.dim, self.dim, |i, j| self.normals[s[i]][j]);
            let bs = Vect::from_iterator(self.dim, s.iter().map(|&i| self.offsets[i]));
            if hs.determinant().abs() > 1e-12 {
                if let Some(x) = hs.lu().solve(&bs) {
                    let xs: Vec<f64> = x.iter().copied().collect();
                    if self.max_violation(&xs) <= 1e-7
                        && !out.iter().any(|v| v.iter().zip(&xs).all(|(a, b)| (a - b).abs() < 1e-8))
                    {
                        out.push(xs);
                    }
                }
            }
            true
        });
        Ok(out)
    }

    /// `max_{x ∈ P} dᵀx`.
    pub fn support(&self, d: &[f64]) -> Result<f64, GeometryError> {
        self.check_dim(d)?;
        if let Some((lo, hi)) = &self.bounds {
            return Ok((0..self.dim).map(|k| if d[k] >= 0.0 { d[k] * hi[k] } else { d[k] * lo[k] }).sum());
        }
        let verts = self.vertices()?;
        if verts.is_empty() {
            return Err(GeometryError::EmptyResult("support of empty polytope".into()));
        }
        Ok(verts.iter().map(|v| dot(v, d)).fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn bounding_box(&self) -> Result<(Vec<f64>, Vec<f64>), GeometryError> {
        if let Some((lo, hi)) = &self.bounds {
            return Ok((lo.clone(), hi.clone()));
        }
        let verts = self.vertices()?;
        if verts.is_empty() {
            return Err(GeometryError::EmptyResult("bounding box of empty polytope".into()));
        }
        let lo = (0..self.dim).map(|d| verts.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min)).collect();
        let hi = (0..self.dim).map(|d| verts.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max)).collect();
        Ok((lo, hi))
    }

    pub fn center(&self) -> Result<Vec<f64>, GeometryError> {
        if let Some((lo, hi)) = &self.bounds {
            return Ok(lo.iter().zip(hi).map(|(l, u)| 0.5 * (l + u)).collect());
        }
        let verts = self.vertices()?;
        if verts.is_empty() {
            return Err(GeometryError::EmptyResult("center of empty polytope".into()));
        }
        let k = verts.len() as f64;
        Ok((0..self.dim).map(|d| verts.iter().map(|v| v[d]).sum::<f64>() / k).collect())
    }

    /// True when the polytope contains a ball of radius larger than `TOL_GEO`.
    pub fn has_interior(&self) -> Result<bool, GeometryError> {
        if let Some((lo, hi)) = &self.bounds {
            return Ok(lo.iter().zip(hi).all(|(l, u)| u - l > TOL_GEO));
        }
        let verts = self.vertices()?;
        if verts.len() <= self.dim {
            return Ok(false);
        }
        let c = self.center()?;
        Ok(-self.max_violation(&c) > TOL_GEO)
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope, GeometryError> {
        if other.dim != self.dim {
            return Err(GeometryError::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        if let (Some((l1, u1)), Some((l2, u2))) = (&self.bounds, &other.bounds) {
            let lo: Vec<f64> = l1.iter().zip(l2).map(|(a, b)| a.max(*b)).collect();
            let hi: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| a.min(*b)).collect();
            if lo.iter().zip(&hi).any(|(l, u)| l > u) {
                return Err(GeometryError::EmptyResult("disjoint boxes".into()));
            }
            return Polytope::from_box(&lo, &hi);
        }
        let mut rows = self.normals.clone();
        rows.extend(other.normals.iter().cloned());
        let mut rhs = self.offsets.clone();
        rhs.extend(other.offsets.iter().copied());
        let mut p = Polytope::from_halfspaces(&rows, &rhs)?;
        p.drop_redundant();
        Ok(p)
    }

    /// Removes rows not tight at any vertex (low-dimensional general case only).
    fn drop_redundant(&mut self) {
        if self.bounds.is_some() || self.dim > 3 {
            return;
        }
        let Ok(verts) = self.vertices() else { return };
        if verts.len() <= self.dim {
            return;
        }
        let keep: Vec<usize> = (0..self.normals.len())
            .filter(|&i| {
                let tight = verts.iter().filter(|v| (dot(&self.normals[i], v) - self.offsets[i]).abs() < 1e-7).count();
                tight >= self.dim
            })
            .collect();
        let mut seen: Vec<usize> = Vec::new();
        for i in keep {
            let dup = seen.iter().any(|&j| {
                self.normals[i].iter().zip(&self.normals[j]).all(|(a, b)| (a - b).abs() < 1e-12)
                    && (self.offsets[i] - self.offsets[j]).abs() < 1e-12
            });
            if !dup {
                seen.push(i);
            }
        }
        self.normals = seen.iter().map(|&i| self.normals[i].clone()).collect();
        self.offsets = seen.iter().map(|&i| self.offsets[i]).collect();
    }

    /// `{x + v : x ∈ P}`.
    pub fn translate(&self, v: &[f64]) -> Result<Polytope, GeometryError> {
        self.check_dim(v)?;
        let offsets = self.normals.iter().zip(&self.offsets).map(|(r, &b)| b + dot(r, v)).collect();
        let bounds = self.bounds.as_ref().map(|(lo, hi)| {
            (lo.iter().zip(v).map(|(a, b)| a + b).collect(), hi.iter().zip(v).map(|(a, b)| a + b).collect())
        });
        Ok(Polytope { dim: self.dim, normals: self.normals.clone(), offsets, bounds })
    }

    /// `P ⊆ Q` checked on the vertices of `P`.
    pub fn is_subset_of(&self, other: &Polytope) -> Result<bool, GeometryError> {
        Ok(self.vertices()?.iter().all(|v| other.max_violation(v) <= 1e-7))
    }
}

fn convex_hull_2d(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    if pts.len() < 3 {
        return pts.into_iter().map(|(x, y)| vec![x, y]).collect();
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 1e-12 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 1e-12 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower.into_iter().map(|(x, y)| vec![x, y]).collect()
}

/// Output regions tagged with AP indices. An output's letter has bit `ap` set
/// iff it lies in some region tagged `ap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPartition {
    pub regions: Vec<(Polytope, usize)>,
    pub universe: Polytope,
    pub num_aps: usize,
}

impl LabeledPartition {
    pub fn new(regions: Vec<(Polytope, usize)>, universe: Polytope, num_aps: usize) -> Result<Self, GeometryError> {
        for (r, ap) in &regions {
            if r.dim() != universe.dim() {
                return Err(GeometryError::DimensionMismatch { expected: universe.dim(), got: r.dim() });
            }
            if *ap >= num_aps {
                return Err(GeometryError::Invalid(format!("region tagged with AP {ap} of {num_aps}")));
            }
        }
        Ok(Self { regions, universe, num_aps })
    }

    pub fn dim(&self) -> usize {
        self.universe.dim()
    }

    pub fn label(&self, y: &[f64]) -> Letter {
        let mut letter = 0;
        for (r, ap) in &self.regions {
            if r.max_violation(y) <= TOL_GEO {
                letter |= 1 << ap;
            }
        }
        letter
    }
}

/// Outer approximation of `{x ∈ X : ∃u ∈ U, A x + B u + a ∈ P}`, one
/// halfspace per facet of `P` via the support function of `B U`.
pub fn pre_set(
    p: &Polytope,
    a: &Mat,
    b: &Mat,
    offset: &[f64],
    u: &Polytope,
    x: Option<&Polytope>,
) -> Result<Polytope, GeometryError> {
    let n = a.ncols();
    if a.nrows() != p.dim() {
        return Err(GeometryError::DimensionMismatch { expected: p.dim(), got: a.nrows() });
    }
    if b.ncols() != u.dim() {
        return Err(GeometryError::DimensionMismatch { expected: u.dim(), got: b.ncols() });
    }
    if !p.has_interior()? {
        return Err(GeometryError::EmptyResult("target set has empty interior".into()));
    }
    let mut rows = Vec::with_capacity(p.normals.len());
    let mut rhs = Vec::with_capacity(p.normals.len());
    for (hrow, &hb) in p.normals.iter().zip(&p.offsets) {
        let hv = Vect::from_column_slice(hrow);
        let ha: Vec<f64> = (a.transpose() * &hv).iter().copied().collect();
        let hb_dir: Vec<f64> = (b.transpose() * &hv).iter().map(|v| -v).collect();
        // min_u H_i B u = -support_U(-(H_i B)ᵀ)
        let min_bu = -u.support(&hb_dir)?;
        rows.push(ha);
        rhs.push(hb - dot(hrow, offset) - min_bu);
    }
    let mut pre = Polytope::from_halfspaces(&rows, &rhs)?;
    if pre.normals.is_empty() {
        // Every row was constant and satisfied: the whole space maps into P.
        return match x {
            Some(xs) => Ok(xs.clone()),
            None => Err(GeometryError::Unsupported("unbounded pre-image without state space".into())),
        };
    }
    if let Some(xs) = x {
        if xs.dim() != n {
            return Err(GeometryError::DimensionMismatch { expected: n, got: xs.dim() });
        }
        pre = pre.intersect(xs)?;
    }
    if !pre.has_interior()? {
        return Err(GeometryError::EmptyResult("pre-image has empty interior".into()));
    }
    Ok(pre)
}
