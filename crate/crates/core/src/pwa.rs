//! Piecewise-affine approximation of nonlinear dynamics by first-order Taylor
//! expansion on a uniform box partition.

use rayon::prelude::*;

use crate::geometry::{GeometryError, Polytope};
use crate::linalg::Vect;
use crate::models::{Dynamics, NonlinearModel, PwaMode, PwaModel};

/// Sobol samples per cell for the fallback bound.
pub const FALLBACK_SAMPLES: u32 = 1000;
/// Inflation applied to sampled residuals.
pub const FALLBACK_INFLATION: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PwaError {
    #[error("jacobian unavailable or non-finite at {0:?}")]
    JacobianUnavailable(Vec<f64>),
    #[error("partition counts {got:?} do not match state dimension {dim}")]
    BadPartition { dim: usize, got: Vec<usize> },
    #[error("state and input spaces must be boxes")]
    NotABox,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Remainder half-widths of the error box for one cell, and whether the
/// bound is analytic.
pub fn bound_taylor_error(
    f: &dyn Dynamics,
    lo: &[f64],
    hi: &[f64],
    u_lo: &[f64],
    u_hi: &[f64],
    input_affine: bool,
) -> (Vec<f64>, bool) {
    let center: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let u0: Vec<f64> = u_lo.iter().zip(u_hi).map(|(a, b)| 0.5 * (a + b)).collect();
    if let Some(hmax) = f.hessian_bound(lo, hi) {
        let mut r2: f64 = lo.iter().zip(hi).map(|(a, b)| (0.5 * (b - a)).powi(2)).sum();
        if !input_affine {
            r2 += u_lo.iter().zip(u_hi).map(|(a, b)| (0.5 * (b - a)).powi(2)).sum::<f64>();
        }
        return (hmax.iter().map(|h| 0.5 * h * r2).collect(), true);
    }
    let a = f.jacobian_x(&center, &u0);
    let b = f.jacobian_u(&center, &u0);
    let fc = f.eval(&center, &u0);
    let n = lo.len();
    let m = u_lo.len();
    let mut worst = vec![0.0f64; n];
    for i in 0..FALLBACK_SAMPLES {
        let x: Vec<f64> = (0..n)
            .map(|d| lo[d] + (hi[d] - lo[d]) * f64::from(sobol_burley::sample(i, d as u32, 0x5eed)))
            .collect();
        let u: Vec<f64> = (0..m)
            .map(|d| u_lo[d] + (u_hi[d] - u_lo[d]) * f64::from(sobol_burley::sample(i, (n + d) as u32, 0x5eed)))
            .collect();
        let fx = f.eval(&x, &u);
        for k in 0..n {
            let mut lin = fc[k];
            for j in 0..n {
                lin += a[(k, j)] * (x[j] - center[j]);
            }
            for j in 0..m {
                lin += b[(k, j)] * (u[j] - u0[j]);
            }
            worst[k] = worst[k].max((fx[k] - lin).abs());
        }
    }
    (worst.into_iter().map(|w| w * FALLBACK_INFLATION).collect(), false)
}

/// Uniform partition of `X` into `∏ np` boxes (axis 0 fastest) with a
/// Taylor expansion at each cell center and input center.
pub fn pwa_approximation(m: &NonlinearModel, np: &[usize], input_affine: bool) -> Result<PwaModel, PwaError> {
    let n = m.dynamics.state_dim();
    if np.len() != n || np.contains(&0) {
        return Err(PwaError::BadPartition { dim: n, got: np.to_vec() });
    }
    let (xl, xu) = m.x_space.box_bounds().ok_or(PwaError::NotABox)?;
    let (ul, uu) = m.u_space.box_bounds().ok_or(PwaError::NotABox)?;
    let u0: Vec<f64> = ul.iter().zip(uu).map(|(a, b)| 0.5 * (a + b)).collect();
    let u0v = Vect::from_column_slice(&u0);
    let total: usize = np.iter().product();
    let f = m.dynamics.as_ref();
    let results: Vec<Result<(PwaMode, bool), PwaError>> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let mut rem = idx;
            let mut lo = vec![0.0; n];
            let mut hi = vec![0.0; n];
            for d in 0..n {
                let k = rem % np[d];
                rem /= np[d];
                let w = (xu[d] - xl[d]) / np[d] as f64;
                lo[d] = xl[d] + k as f64 * w;
                hi[d] = if k + 1 == np[d] { xu[d] } else { xl[d] + (k + 1) as f64 * w };
            }
            let c: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
            let a = f.jacobian_x(&c, &u0);
            let b = f.jacobian_u(&c, &u0);
            if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(PwaError::JacobianUnavailable(c));
            }
            let fc = Vect::from_vec(f.eval(&c, &u0));
            let cv = Vect::from_column_slice(&c);
            let offset = fc - &a * &cv - &b * &u0v;
            let (half, rigorous) = bound_taylor_error(f, &lo, &hi, ul, uu, input_affine);
            let neg: Vec<f64> = half.iter().map(|h| -h).collect();
            Ok((
                PwaMode {
                    region: Polytope::from_box(&lo, &hi)?,
                    a,
                    b,
                    offset,
                    bw: m.bw.clone(),
                    kappa: Polytope::from_box(&neg, &half)?,
                },
                rigorous,
            ))
        })
        .collect();
    let mut modes = Vec::with_capacity(total);
    let mut rigorous = true;
    for r in results {
        let (mode, rig) = r?;
        rigorous &= rig;
        modes.push(mode);
    }
    Ok(PwaModel {
        modes,
        partitions: np.to_vec(),
        c: m.c.clone(),
        x_space: m.x_space.clone(),
        u_space: m.u_space.clone(),
        labeling: m.labeling.clone(),
        ap_names: m.ap_names.clone(),
        rigorous,
    })
}

/// Half-widths of a mode's error box.
pub fn kappa_half_widths(mode: &PwaMode) -> Vec<f64> {
    let (_, hi) = mode.kappa.box_bounds().expect("error set is a box");
    hi.to_vec()
}

#[doc(hidden)]
pub fn linear_residual(f: &dyn Dynamics, mode: &PwaMode, x: &[f64], u: &[f64]) -> Vec<f64> {
    let lin = &mode.a * Vect::from_column_slice(x) + &mode.b * Vect::from_column_slice(u) + &mode.offset;
    f.eval(x, u).iter().zip(lin.iter()).map(|(a, b)| a - b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LabeledPartition;
    use crate::linalg::Mat;
    use crate::models::VanDerPol;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    struct Square;
    impl Dynamics for Square {
        fn name(&self) -> &str {
            "square"
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64], _u: &[f64]) -> Vec<f64> {
            vec![x[0] * x[0]]
        }
        fn jacobian_x(&self, x: &[f64], _u: &[f64]) -> Mat {
            Mat::from_element(1, 1, 2.0 * x[0])
        }
        fn jacobian_u(&self, _x: &[f64], _u: &[f64]) -> Mat {
            Mat::zeros(1, 1)
        }
        fn hessian_bound(&self, _lo: &[f64], _hi: &[f64]) -> Option<Vec<f64>> {
            Some(vec![2.0])
        }
    }

    struct NoHessian<D: Dynamics>(D);
    impl<D: Dynamics> Dynamics for NoHessian<D> {
        fn name(&self) -> &str {
            "sampled"
        }
        fn state_dim(&self) -> usize {
            self.0.state_dim()
        }
        fn input_dim(&self) -> usize {
            self.0.input_dim()
        }
        fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
            self.0.eval(x, u)
        }
        fn jacobian_x(&self, x: &[f64], u: &[f64]) -> Mat {
            self.0.jacobian_x(x, u)
        }
        fn jacobian_u(&self, x: &[f64], u: &[f64]) -> Mat {
            self.0.jacobian_u(x, u)
        }
    }

    struct Linear2;
    impl Dynamics for Linear2 {
        fn name(&self) -> &str {
            "linear"
        }
        fn state_dim(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
            vec![0.9 * x[0] + 0.1 * x[1], -0.2 * x[0] + 0.8 * x[1] + u[0] + 0.3]
        }
        fn jacobian_x(&self, _x: &[f64], _u: &[f64]) -> Mat {
            Mat::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8])
        }
        fn jacobian_u(&self, _x: &[f64], _u: &[f64]) -> Mat {
            Mat::from_row_slice(2, 1, &[0.0, 1.0])
        }
        fn hessian_bound(&self, _lo: &[f64], _hi: &[f64]) -> Option<Vec<f64>> {
            Some(vec![0.0, 0.0])
        }
    }

    fn model(f: Arc<dyn Dynamics>, lo: &[f64], hi: &[f64]) -> NonlinearModel {
        let n = lo.len();
        let x = Polytope::from_box(lo, hi).unwrap();
        NonlinearModel {
            c: Mat::identity(n, n),
            bw: Mat::identity(n, n),
            mu: Vect::zeros(n),
            sigma: Mat::identity(n, n),
            labeling: LabeledPartition::new(vec![], x.clone(), 0).unwrap(),
            x_space: x,
            u_space: Polytope::from_box(&vec![-1.0; f.input_dim()], &vec![1.0; f.input_dim()]).unwrap(),
            ap_names: vec![],
            dynamics: f,
        }
    }

    #[test]
    fn linear_dynamics_have_zero_error() {
        let m = model(Arc::new(Linear2), &[-2.0, -2.0], &[2.0, 2.0]);
        let p = pwa_approximation(&m, &[3, 4], true).unwrap();
        assert_eq!(p.modes.len(), 12);
        for md in &p.modes {
            assert!(kappa_half_widths(md).iter().all(|&h| h.abs() <= 1e-12));
            assert!((md.offset[1] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn square_remainder_bound() {
        let (half, rig) = bound_taylor_error(&Square, &[0.0], &[1.0], &[-1.0], &[1.0], true);
        assert!(rig);
        assert!((half[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn van_der_pol_mode_count_and_jacobian() {
        let m = model(Arc::new(VanDerPol { tau: 0.1 }), &[-4.0, -4.0], &[4.0, 4.0]);
        let p = pwa_approximation(&m, &[41, 41], true).unwrap();
        assert_eq!(p.modes.len(), 1681);
        let md = &p.modes[100];
        let c = md.region.center().unwrap();
        assert!((md.a[(1, 0)] - (-1.0 - 2.0 * c[0] * c[1]) * 0.1).abs() < 1e-14);
        assert!((md.a[(1, 1)] - (1.0 - c[0] * c[0]) * 0.1 - 1.0).abs() < 1e-14);
        assert_eq!(p.mode_of(&c), 100);
    }

    #[test]
    fn van_der_pol_error_sets_are_sound() {
        let f = Arc::new(VanDerPol { tau: 0.1 });
        let m = model(f.clone(), &[-4.0, -4.0], &[4.0, 4.0]);
        let p = pwa_approximation(&m, &[41, 41], true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let i = rng.random_range(0..p.modes.len());
            let md = &p.modes[i];
            let (lo, hi) = md.region.box_bounds().unwrap();
            let half = kappa_half_widths(md);
            for _ in 0..2000 {
                let x = [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])];
                let u = [rng.random_range(-1.0..=1.0)];
                let r = linear_residual(f.as_ref(), md, &x, &u);
                for k in 0..2 {
                    assert!(r[k].abs() <= half[k] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sampled_fallback_dominates_samples() {
        let f = NoHessian(VanDerPol { tau: 0.1 });
        let lo = [1.0, 2.0];
        let hi = [1.5, 2.5];
        let (half, rig) = bound_taylor_error(&f, &lo, &hi, &[-1.0], &[1.0], true);
        assert!(!rig);
        let m = model(Arc::new(VanDerPol { tau: 0.1 }), &lo, &hi);
        let p = pwa_approximation(&m, &[1, 1], true).unwrap();
        let md = &p.modes[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = [0.0f64; 2];
        for _ in 0..1000 {
            let x = [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])];
            let u = [rng.random_range(-1.0..=1.0)];
            let r = linear_residual(&f, md, &x, &u);
            for k in 0..2 {
                worst[k] = worst[k].max(r[k].abs());
            }
        }
        for k in 0..2 {
            assert!(half[k] >= worst[k]);
        }
    }

    #[test]
    fn refinement_shrinks_error() {
        let m = model(Arc::new(VanDerPol { tau: 0.1 }), &[-4.0, -4.0], &[4.0, 4.0]);
        let coarse = pwa_approximation(&m, &[10, 10], true).unwrap();
        let fine = pwa_approximation(&m, &[20, 20], true).unwrap();
        let worst = |p: &PwaModel| p.modes.iter().map(|md| kappa_half_widths(md)[1]).fold(0.0, f64::max);
        assert!(worst(&fine) <= 0.5 * worst(&coarse));
    }
}
