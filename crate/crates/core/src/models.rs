//! System classes: linear/affine, piecewise affine, and nonlinear models with
//! Gaussian additive noise.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, LabeledPartition, Polytope};
use crate::linalg::{pinv, sqrtm_psd, Mat, Vect};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("covariance is not positive semidefinite")]
    NotPsd,
    #[error("steady state unreachable: {0}")]
    Unreachable(String),
    #[error("unknown dynamics '{0}'")]
    UnknownDynamics(String),
    #[error("missing parameter '{param}' for dynamics '{name}'")]
    MissingParameter { name: String, param: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::Dimension { what, expected, got });
    }
    Ok(())
}

/// `x⁺ = A x + B u + a + B_w w`, `y = C x`, `w ~ N(mu, Sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub offset: Vect,
    pub bw: Mat,
    pub mu: Vect,
    pub sigma: Mat,
    pub x_space: Polytope,
    pub u_space: Polytope,
    pub labeling: LabeledPartition,
    pub ap_names: Vec<String>,
}

impl LinearModel {
    /// Builds a model with standard normal noise and zero offset.
    pub fn new(
        a: Mat,
        b: Mat,
        c: Mat,
        bw: Mat,
        x_space: Polytope,
        u_space: Polytope,
        labeling: LabeledPartition,
        ap_names: Vec<String>,
    ) -> Result<Self, ModelError> {
        let n = a.nrows();
        let q = bw.ncols();
        let m = Self {
            offset: Vect::zeros(n),
            mu: Vect::zeros(q),
            sigma: Mat::identity(q, q),
            a,
            b,
            c,
            bw,
            x_space,
            u_space,
            labeling,
            ap_names,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.a.nrows();
        check("A columns", n, self.a.ncols())?;
        check("B rows", n, self.b.nrows())?;
        check("C columns", n, self.c.ncols())?;
        check("offset", n, self.offset.len())?;
        check("B_w rows", n, self.bw.nrows())?;
        check("mu", self.bw.ncols(), self.mu.len())?;
        check("Sigma rows", self.bw.ncols(), self.sigma.nrows())?;
        check("Sigma columns", self.bw.ncols(), self.sigma.ncols())?;
        check("state space", n, self.x_space.dim())?;
        check("input space", self.b.ncols(), self.u_space.dim())?;
        check("output regions", self.c.nrows(), self.labeling.dim())?;
        check("AP names", self.labeling.num_aps, self.ap_names.len())?;
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_normalized(&self) -> bool {
        self.mu.iter().all(|&v| v == 0.0) && self.sigma == Mat::identity(self.sigma.nrows(), self.sigma.ncols())
    }

    /// Deterministic part `A x + B u + a`.
    pub fn mean_next(&self, x: &Vect, u: &Vect) -> Vect {
        &self.a * x + &self.b * u + &self.offset
    }
}

/// Rewrites the noise as `B_w Σ^{1/2} w′ + B_w μ` with `w′ ~ N(0, I)`.
/// Returns the new model and its affine offset.
pub fn normalize_disturbance(m: &LinearModel) -> Result<(LinearModel, Vect), ModelError> {
    let root = sqrtm_psd(&m.sigma, 1e-10).ok_or(ModelError::NotPsd)?;
    let mut out = m.clone();
    out.bw = &m.bw * root;
    out.offset = &m.offset + &m.bw * &m.mu;
    out.mu = Vect::zeros(m.mu.len());
    out.sigma = Mat::identity(m.mu.len(), m.mu.len());
    let a = out.offset.clone();
    Ok((out, a))
}

/// Equilibrium used to move an affine model to deviation coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub x_ss: Vect,
    pub u_ss: Vect,
    pub y_ss: Vect,
}

/// Solves `x_ss = A x_ss + B u_ss + a`, `C x_ss = y_ss` and returns the model
/// in deviation coordinates (`a = 0`, spaces and regions translated).
pub fn steady_state_shift(m: &LinearModel, y_ss: &[f64]) -> Result<(LinearModel, ShiftRecord), ModelError> {
    let n = m.state_dim();
    let k = m.input_dim();
    let p = m.output_dim();
    check("steady-state output", p, y_ss.len())?;
    let mut lhs = Mat::zeros(n + p, n + k);
    lhs.view_mut((0, 0), (n, n)).copy_from(&(Mat::identity(n, n) - &m.a));
    lhs.view_mut((0, n), (n, k)).copy_from(&(-&m.b));
    lhs.view_mut((n, 0), (p, n)).copy_from(&m.c);
    let mut rhs = Vect::zeros(n + p);
    rhs.rows_mut(0, n).copy_from(&m.offset);
    rhs.rows_mut(n, p).copy_from(&Vect::from_column_slice(y_ss));
    let sol = pinv(&lhs) * &rhs;
    let residual = (&lhs * &sol - &rhs).norm();
    if residual > 1e-9 * (1.0 + rhs.norm()) {
        return Err(ModelError::Unreachable(format!("steady-state equations inconsistent (residual {residual:.3e})")));
    }
    let x_ss = sol.rows(0, n).into_owned();
    let u_ss = sol.rows(n, k).into_owned();
    let u_vec: Vec<f64> = u_ss.iter().copied().collect();
    if !m.u_space.contains(&u_vec)? {
        return Err(ModelError::Unreachable(format!("steady-state input {u_vec:?} outside U")));
    }
    let neg = |v: &Vect| v.iter().map(|x| -x).collect::<Vec<f64>>();
    let mut out = m.clone();
    out.offset = Vect::zeros(n);
    out.x_space = m.x_space.translate(&neg(&x_ss))?;
    out.u_space = m.u_space.translate(&neg(&u_ss))?;
    let y_neg: Vec<f64> = y_ss.iter().map(|v| -v).collect();
    let regions = m
        .labeling
        .regions
        .iter()
        .map(|(r, ap)| Ok((r.translate(&y_neg)?, *ap)))
        .collect::<Result<Vec<_>, GeometryError>>()?;
    out.labeling = LabeledPartition::new(regions, m.labeling.universe.translate(&y_neg)?, m.labeling.num_aps)?;
    Ok((out, ShiftRecord { x_ss, u_ss, y_ss: Vect::from_column_slice(y_ss) }))
}

/// Deterministic map `(x, u) ↦ f(x, u)` with analytic Jacobians.
pub trait Dynamics: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn jacobian_x(&self, x: &[f64], u: &[f64]) -> Mat;
    fn jacobian_u(&self, x: &[f64], u: &[f64]) -> Mat;
    /// Per-coordinate bound on the spectral norm of the Hessian of `f_k` in
    /// `(x, u)` over the box `[lo, hi] × U`.
    fn hessian_bound(&self, _lo: &[f64], _hi: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// `x1⁺ = x1 + τ x2`, `x2⁺ = x2 + τ(−x1 + (1 − x1²) x2) + u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VanDerPol {
    pub tau: f64,
}

impl Dynamics for VanDerPol {
    fn name(&self) -> &str {
        "vanderpol"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let t = self.tau;
        vec![x[0] + x[1] * t, x[1] + (-x[0] + (1.0 - x[0] * x[0]) * x[1]) * t + u[0]]
    }

    fn jacobian_x(&self, x: &[f64], _u: &[f64]) -> Mat {
        let t = self.tau;
        Mat::from_row_slice(2, 2, &[1.0, t, (-1.0 - 2.0 * x[0] * x[1]) * t, 1.0 + (1.0 - x[0] * x[0]) * t])
    }

    fn jacobian_u(&self, _x: &[f64], _u: &[f64]) -> Mat {
        Mat::from_row_slice(2, 1, &[0.0, 1.0])
    }

    /// `f1` is linear; the Hessian of `f2` has Frobenius norm
    /// `2τ sqrt(x2² + 2 x1²)`.
    fn hessian_bound(&self, lo: &[f64], hi: &[f64]) -> Option<Vec<f64>> {
        let m0 = lo[0].abs().max(hi[0].abs());
        let m1 = lo[1].abs().max(hi[1].abs());
        Some(vec![0.0, 2.0 * self.tau * (m1 * m1 + 2.0 * m0 * m0).sqrt()])
    }
}

/// Looks up a built-in dynamics by name.
pub fn builtin_dynamics(name: &str, params: &[(String, f64)]) -> Result<Arc<dyn Dynamics>, ModelError> {
    let get = |p: &str| {
        params.iter().find(|(k, _)| k == p).map(|(_, v)| *v).ok_or_else(|| ModelError::MissingParameter {
            name: name.to_string(),
            param: p.to_string(),
        })
    };
    match name {
        "vanderpol" | "van_der_pol" => Ok(Arc::new(VanDerPol { tau: get("tau")? })),
        other => Err(ModelError::UnknownDynamics(other.to_string())),
    }
}

/// `x⁺ = f(x, u) + B_w w`, `y = C x`.
#[derive(Clone)]
pub struct NonlinearModel {
    pub dynamics: Arc<dyn Dynamics>,
    pub c: Mat,
    pub bw: Mat,
    pub mu: Vect,
    pub sigma: Mat,
    pub x_space: Polytope,
    pub u_space: Polytope,
    pub labeling: LabeledPartition,
    pub ap_names: Vec<String>,
}

impl fmt::Debug for NonlinearModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearModel")
            .field("dynamics", &self.dynamics.name())
            .field("c", &self.c)
            .field("bw", &self.bw)
            .field("x_space", &self.x_space)
            .field("u_space", &self.u_space)
            .finish_non_exhaustive()
    }
}

impl NonlinearModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.dynamics.state_dim();
        check("C columns", n, self.c.ncols())?;
        check("B_w rows", n, self.bw.nrows())?;
        check("mu", self.bw.ncols(), self.mu.len())?;
        check("Sigma rows", self.bw.ncols(), self.sigma.nrows())?;
        check("state space", n, self.x_space.dim())?;
        check("input space", self.dynamics.input_dim(), self.u_space.dim())?;
        check("output regions", self.c.nrows(), self.labeling.dim())?;
        check("AP names", self.labeling.num_aps, self.ap_names.len())?;
        Ok(())
    }

    /// Moves the noise to `N(0, I)`: `B_w ← B_w Σ^{1/2}`. A nonzero mean is
    /// rejected since `f` carries no affine slot.
    pub fn normalized(&self) -> Result<NonlinearModel, ModelError> {
        if self.mu.iter().any(|&v| v != 0.0) {
            return Err(ModelError::Unreachable("nonzero noise mean on nonlinear model".into()));
        }
        let root = sqrtm_psd(&self.sigma, 1e-10).ok_or(ModelError::NotPsd)?;
        let mut out = self.clone();
        out.bw = &self.bw * root;
        let q = self.mu.len();
        out.sigma = Mat::identity(q, q);
        Ok(out)
    }
}

/// One affine piece on the box `region`. `kappa` bounds `f − (A x + B u + a)`
/// over `region × U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwaMode {
    pub region: Polytope,
    pub a: Mat,
    pub b: Mat,
    pub offset: Vect,
    pub bw: Mat,
    pub kappa: Polytope,
}

/// Uniform box partition of `X` into affine modes, stored in row-major cell
/// order (axis 0 fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwaModel {
    pub modes: Vec<PwaMode>,
    pub partitions: Vec<usize>,
    pub c: Mat,
    pub x_space: Polytope,
    pub u_space: Polytope,
    pub labeling: LabeledPartition,
    pub ap_names: Vec<String>,
    /// False when some error set came from the sampling fallback.
    pub rigorous: bool,
}

impl PwaModel {
    /// Mode whose cell contains `x` (clamped to `X`).
    pub fn mode_of(&self, x: &[f64]) -> usize {
        let (lo, hi) = self.x_space.box_bounds().expect("PWA state space is a box");
        let mut idx = 0;
        let mut stride = 1;
        for d in 0..self.partitions.len() {
            let np = self.partitions[d];
            let w = (hi[d] - lo[d]) / np as f64;
            let k = (((x[d] - lo[d]) / w).floor().max(0.0) as usize).min(np - 1);
            idx += k * stride;
            stride *= np;
        }
        idx
    }

    pub fn state_dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.u_space.dim()
    }
}

/// Affine system view shared by the abstraction and similarity steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlantModel {
    Linear(LinearModel),
    Pwa(PwaModel),
}

/// Borrowed affine dynamics of one mode.
#[derive(Debug, Clone, Copy)]
pub struct ModeRef<'a> {
    pub a: &'a Mat,
    pub b: &'a Mat,
    pub offset: &'a Vect,
    pub bw: &'a Mat,
    pub kappa: Option<&'a Polytope>,
}

impl PlantModel {
    pub fn num_modes(&self) -> usize {
        match self {
            PlantModel::Linear(_) => 1,
            PlantModel::Pwa(p) => p.modes.len(),
        }
    }

    pub fn mode(&self, i: usize) -> ModeRef<'_> {
        match self {
            PlantModel::Linear(m) => ModeRef { a: &m.a, b: &m.b, offset: &m.offset, bw: &m.bw, kappa: None },
            PlantModel::Pwa(p) => {
                let md = &p.modes[i];
                ModeRef { a: &md.a, b: &md.b, offset: &md.offset, bw: &md.bw, kappa: Some(&md.kappa) }
            }
        }
    }

    pub fn mode_of(&self, x: &[f64]) -> usize {
        match self {
            PlantModel::Linear(_) => 0,
            PlantModel::Pwa(p) => p.mode_of(x),
        }
    }

    pub fn c(&self) -> &Mat {
        match self {
            PlantModel::Linear(m) => &m.c,
            PlantModel::Pwa(p) => &p.c,
        }
    }

    pub fn x_space(&self) -> &Polytope {
        match self {
            PlantModel::Linear(m) => &m.x_space,
            PlantModel::Pwa(p) => &p.x_space,
        }
    }

    pub fn u_space(&self) -> &Polytope {
        match self {
            PlantModel::Linear(m) => &m.u_space,
            PlantModel::Pwa(p) => &p.u_space,
        }
    }

    pub fn labeling(&self) -> &LabeledPartition {
        match self {
            PlantModel::Linear(m) => &m.labeling,
            PlantModel::Pwa(p) => &p.labeling,
        }
    }

    pub fn ap_names(&self) -> &[String] {
        match self {
            PlantModel::Linear(m) => &m.ap_names,
            PlantModel::Pwa(p) => &p.ap_names,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.c().ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.u_space().dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar_model(a: f64, b: f64, bw: f64) -> LinearModel {
        let x = Polytope::from_box(&[-10.0], &[10.0]).unwrap();
        let u = Polytope::from_box(&[-2.0], &[2.0]).unwrap();
        let lab = LabeledPartition::new(vec![(Polytope::from_box(&[0.0], &[1.0]).unwrap(), 0)], x.clone(), 1).unwrap();
        LinearModel::new(
            Mat::from_element(1, 1, a),
            Mat::from_element(1, 1, b),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, bw),
            x,
            u,
            lab,
            vec!["p1".into()],
        )
        .unwrap()
    }

    #[test]
    fn normalization_keeps_standard_noise() {
        let m = scalar_model(0.5, 1.0, 1.0);
        let (n, a) = normalize_disturbance(&m).unwrap();
        assert_eq!(n, m);
        assert_eq!(a[0], 0.0);
    }

    #[test]
    fn normalization_matches_moments() {
        let mut m = scalar_model(0.5, 1.0, 1.0);
        m.mu[0] = 2.0;
        m.sigma[(0, 0)] = 4.0;
        let (n, a) = normalize_disturbance(&m).unwrap();
        assert_relative_eq!(n.bw[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(a[0], 2.0, epsilon = 1e-12);
        assert!(n.is_normalized());
    }

    #[test]
    fn normalization_rejects_indefinite() {
        let mut m = scalar_model(0.5, 1.0, 1.0);
        m.sigma[(0, 0)] = -0.1;
        assert_eq!(normalize_disturbance(&m), Err(ModelError::NotPsd));
    }

    #[test]
    fn normalization_is_distributionally_equivalent() {
        let x = Polytope::from_box(&[-10.0, -10.0], &[10.0, 10.0]).unwrap();
        let lab = LabeledPartition::new(vec![], x.clone(), 0).unwrap();
        let mut m = LinearModel::new(
            Mat::identity(2, 2) * 0.5,
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            x.clone(),
            x,
            lab,
            vec![],
        )
        .unwrap();
        m.mu = Vect::from_vec(vec![0.3, -0.2]);
        m.sigma = Mat::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let (n, _) = normalize_disturbance(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 100_000;
        let x0 = Vect::from_vec(vec![1.0, -1.0]);
        let u0 = Vect::from_vec(vec![0.2, 0.1]);
        let sqrt_sigma = sqrtm_psd(&m.sigma, 0.0).unwrap();
        let mut s1 = [Vect::zeros(2), Vect::zeros(2)];
        let mut s2 = [Mat::zeros(2, 2), Mat::zeros(2, 2)];
        for _ in 0..draws {
            let z1 = Vect::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let z2 = Vect::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let orig = m.mean_next(&x0, &u0) + &m.bw * (&m.mu + &sqrt_sigma * z1);
            let norm = n.mean_next(&x0, &u0) + &n.bw * z2;
            for (k, v) in [orig, norm].into_iter().enumerate() {
                s2[k] += &v * v.transpose();
                s1[k] += v;
            }
        }
        let nf = draws as f64;
        let mean = [&s1[0] / nf, &s1[1] / nf];
        let cov = [&s2[0] / nf - &mean[0] * mean[0].transpose(), &s2[1] / nf - &mean[1] * mean[1].transpose()];
        for d in 0..2 {
            let se = (cov[0][(d, d)] / nf).sqrt();
            assert!((mean[0][d] - mean[1][d]).abs() <= 3.0 * se * 2f64.sqrt());
            for e in 0..2 {
                let var_se = ((cov[0][(d, d)] * cov[0][(e, e)] + cov[0][(d, e)].powi(2)) / nf).sqrt();
                assert!((cov[0][(d, e)] - cov[1][(d, e)]).abs() <= 3.0 * var_se * 2f64.sqrt());
            }
        }
    }

    #[test]
    fn steady_state_at_origin() {
        let m = scalar_model(0.5, 1.0, 1.0);
        let (s, rec) = steady_state_shift(&m, &[0.0]).unwrap();
        assert_eq!(rec.x_ss[0], 0.0);
        assert_eq!(rec.u_ss[0], 0.0);
        assert_eq!(s.x_space, m.x_space);
    }

    #[test]
    fn steady_state_scalar() {
        let mut m = scalar_model(0.5, 1.0, 1.0);
        m.offset[0] = 1.0;
        let (s, rec) = steady_state_shift(&m, &[4.0]).unwrap();
        assert_relative_eq!(rec.x_ss[0], 4.0, epsilon = 1e-12);
        assert_relative_eq!(rec.u_ss[0], 1.0, epsilon = 1e-12);
        let res = &rec.x_ss - (&m.a * &rec.x_ss + &m.b * &rec.u_ss + &m.offset);
        assert!(res.norm() <= 1e-9);
        assert_eq!(s.offset[0], 0.0);
        let (lo, hi) = s.u_space.box_bounds().unwrap();
        assert_relative_eq!(lo[0], -3.0, epsilon = 1e-12);
        assert_relative_eq!(hi[0], 1.0, epsilon = 1e-12);
        let (plo, _) = s.labeling.regions[0].0.box_bounds().unwrap();
        assert_relative_eq!(plo[0], -4.0, epsilon = 1e-12);
    }

    #[test]
    fn steady_state_outside_input_budget() {
        let mut m = scalar_model(0.5, 1.0, 1.0);
        m.offset[0] = 1.0;
        assert!(matches!(steady_state_shift(&m, &[9.0]), Err(ModelError::Unreachable(_))));
    }

    #[test]
    fn van_der_pol_jacobian_matches_differences() {
        let v = VanDerPol { tau: 0.1 };
        let x = [0.7, -1.3];
        let u = [0.2];
        let j = v.jacobian_x(&x, &u);
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let fp = v.eval(&xp, &u);
            let fm = v.eval(&xm, &u);
            for r in 0..2 {
                assert_relative_eq!(j[(r, k)], (fp[r] - fm[r]) / (2.0 * h), epsilon = 1e-7);
            }
        }
        assert_relative_eq!(j[(1, 0)], (-1.0 - 2.0 * x[0] * x[1]) * 0.1, epsilon = 1e-15);
    }

    #[test]
    fn registry_lookup() {
        assert!(builtin_dynamics("vanderpol", &[("tau".into(), 0.1)]).is_ok());
        assert!(matches!(builtin_dynamics("vanderpol", &[]), Err(ModelError::MissingParameter { .. })));
        assert!(matches!(builtin_dynamics("lorenz", &[]), Err(ModelError::UnknownDynamics(_))));
    }
}
