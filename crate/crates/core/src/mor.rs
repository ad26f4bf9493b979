//! Model-order reduction by balanced truncation of a DARE-stabilized closed
//! loop, lift/shift matrices for the reduced-order interface, and backward
//! state-space shrinking for invariance specifications.

use serde::{Deserialize, Serialize};

use crate::geometry::{pre_set, GeometryError, Polytope};
use crate::linalg::{dlyap, pinv, spectral_radius, sqrtm_psd, symmetrize, Mat, Vect};
use crate::models::LinearModel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MorError {
    #[error("pair (A, B) is not stabilizable")]
    NotStabilizable,
    #[error("only {available} nonzero Hankel singular values for order {requested}")]
    RankDeficient { requested: usize, available: usize },
    #[error("lift matrix is ill-conditioned (smallest singular value {0:.3e})")]
    IllConditioned(f64),
    #[error("invalid reduction order {dimr} for state dimension {n}")]
    BadOrder { dimr: usize, n: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Solves `X = AᵀXA − AᵀXB(R + BᵀXB)⁻¹BᵀXA + Q` by structure-preserving
/// doubling and returns `(X, F)` with `F = −(R + BᵀXB)⁻¹BᵀXA`.
pub fn solve_dare(a: &Mat, b: &Mat, qc: &Mat, rc: &Mat) -> Result<(Mat, Mat), MorError> {
    let n = a.nrows();
    let rinv = rc.clone().try_inverse().ok_or(MorError::NotStabilizable)?;
    let mut ak = a.clone();
    let mut gk = b * &rinv * b.transpose();
    let mut hk = symmetrize(qc);
    let eye = Mat::identity(n, n);
    let mut converged = false;
    for _ in 0..100 {
        let w = &eye + &gk * &hk;
        let winv = w.try_inverse().ok_or(MorError::NotStabilizable)?;
        let a_next = &ak * &winv * &ak;
        let g_next = symmetrize(&(&gk + &ak * &winv * &gk * ak.transpose()));
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &winv * &ak));
        if !h_next.iter().all(|v| v.is_finite()) || h_next.norm() > 1e14 {
            return Err(MorError::NotStabilizable);
        }
        let diff = (&h_next - &hk).norm();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if diff <= 1e-14 * hk.norm().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MorError::NotStabilizable);
    }
    let x = hk;
    let f = feedback_from(a, b, rc, &x)?;
    if spectral_radius(&(a + b * &f)) >= 1.0 || dare_residual(a, b, qc, rc, &x) > 1e-9 * x.norm().max(1.0) {
        return Err(MorError::NotStabilizable);
    }
    Ok((x, f))
}

fn feedback_from(a: &Mat, b: &Mat, rc: &Mat, x: &Mat) -> Result<Mat, MorError> {
    let s = rc + b.transpose() * x * b;
    let sinv = s.try_inverse().ok_or(MorError::NotStabilizable)?;
    Ok(-(sinv * b.transpose() * x * a))
}

/// Frobenius norm of the DARE residual.
pub fn dare_residual(a: &Mat, b: &Mat, qc: &Mat, rc: &Mat, x: &Mat) -> f64 {
    let s = rc + b.transpose() * x * b;
    let Some(sinv) = s.try_inverse() else { return f64::INFINITY };
    let rhs = a.transpose() * x * a - a.transpose() * x * b * sinv * b.transpose() * x * a + qc;
    (rhs - x).norm()
}

/// Full model, reduced model and the matrices linking them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedPair {
    pub full: LinearModel,
    pub reduced: LinearModel,
    /// DARE feedback used to stabilize the loop before balancing.
    pub f: Mat,
    /// Lift `n × r`.
    pub p: Mat,
    /// Input shift `m × r`.
    pub q: Mat,
    /// Left projection `r × n` with `Π P = I`.
    pub pi: Mat,
    pub hankel: Vec<f64>,
}

/// Balancing transform of `(A, B, C)`: returns `(T, T⁻¹, σ)` where `T Wc Tᵀ`
/// and `T⁻ᵀ Wo T⁻¹` both equal `diag(σ)` on the nonzero part.
pub fn balance(acl: &Mat, bext: &Mat, c: &Mat) -> Result<(Mat, Mat, Vec<f64>), MorError> {
    let wc = dlyap(acl, &(bext * bext.transpose())).ok_or(MorError::NotStabilizable)?;
    let wo = dlyap(&acl.transpose(), &(c.transpose() * c)).ok_or(MorError::NotStabilizable)?;
    let lc = sqrtm_psd(&wc, 1e-9 * wc.norm().max(1.0)).ok_or(MorError::NotStabilizable)?;
    let lo = sqrtm_psd(&wo, 1e-9 * wo.norm().max(1.0)).ok_or(MorError::NotStabilizable)?;
    let svd = (lo.transpose() * &lc).svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sig: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v").transpose();
    let n = acl.nrows();
    let smax = sig.first().copied().unwrap_or(0.0);
    let cutoff = 1e-12 * smax.max(f64::MIN_POSITIVE);
    let mut t = Mat::zeros(n, n);
    let mut tinv = Mat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        if sig[k] <= cutoff {
            continue;
        }
        let s = sig[k].sqrt();
        t.row_mut(k).copy_from(&((lo.clone() * u.column(i)).transpose() / s));
        tinv.column_mut(k).copy_from(&(&lc * v.column(i) / s));
    }
    Ok((t, tinv, sig))
}

/// Balanced truncation of the closed loop `(A + B F, [B B_w], C)` with `F`
/// the DARE feedback for `Qc = CᵀC`, `Rc = f I`.
pub fn model_reduction(m: &LinearModel, dimr: usize, f: f64) -> Result<ReducedPair, MorError> {
    let n = m.state_dim();
    if dimr == 0 || dimr > n {
        return Err(MorError::BadOrder { dimr, n });
    }
    let k = m.input_dim();
    let qc = m.c.transpose() * &m.c;
    let rc = Mat::identity(k, k) * f;
    let (_, fb) = solve_dare(&m.a, &m.b, &qc, &rc)?;
    let acl = &m.a + &m.b * &fb;
    let mut bext = Mat::zeros(n, k + m.bw.ncols());
    bext.view_mut((0, 0), (n, k)).copy_from(&m.b);
    bext.view_mut((0, k), (n, m.bw.ncols())).copy_from(&m.bw);
    let (t, tinv, sig) = balance(&acl, &bext, &m.c)?;
    let available = sig.iter().filter(|&&s| s > 1e-12 * sig[0].max(f64::MIN_POSITIVE)).count();
    if available < dimr {
        return Err(MorError::RankDeficient { requested: dimr, available });
    }
    let pi = t.rows(0, dimr).into_owned();
    let p = tinv.columns(0, dimr).into_owned();
    let ar = &pi * &acl * &p;
    let br = &pi * &m.b;
    let brw = &pi * &m.bw;
    let cr = &m.c * &p;
    let x_r = reduced_box(&m.x_space, &pi)?;
    let reduced = LinearModel {
        a: ar,
        b: br,
        c: cr,
        offset: Vect::zeros(dimr),
        bw: brw,
        mu: Vect::zeros(m.bw.ncols()),
        sigma: Mat::identity(m.bw.ncols(), m.bw.ncols()),
        x_space: x_r,
        u_space: m.u_space.clone(),
        labeling: m.labeling.clone(),
        ap_names: m.ap_names.clone(),
    };
    let pair = ReducedPair { full: m.clone(), reduced, f: fb, p, q: Mat::zeros(k, dimr), pi, hankel: sig };
    compute_projection(pair)
}

/// Bounding box of `Π X` from the corners of the full state box.
fn reduced_box(x: &Polytope, pi: &Mat) -> Result<Polytope, MorError> {
    let (lo, hi) = x.bounding_box()?;
    let r = pi.nrows();
    let mut rlo = vec![f64::INFINITY; r];
    let mut rhi = vec![f64::NEG_INFINITY; r];
    // max over the box of π_i·x is attained coordinatewise.
    for i in 0..r {
        let (mut mn, mut mx) = (0.0, 0.0);
        for d in 0..lo.len() {
            let c = pi[(i, d)];
            mn += (c * lo[d]).min(c * hi[d]);
            mx += (c * lo[d]).max(c * hi[d]);
        }
        rlo[i] = mn;
        rhi[i] = mx;
    }
    Ok(Polytope::from_box(&rlo, &rhi)?)
}

/// Fills `Q` as the least-squares solution of `B Q ≈ P A_r − A P` and checks
/// that `P` has full column rank.
pub fn compute_projection(mut pair: ReducedPair) -> Result<ReducedPair, MorError> {
    let sv = pair.p.clone().svd(false, false).singular_values;
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin.is_nan() || smin < 1e-12 {
        return Err(MorError::IllConditioned(if smin.is_finite() { smin } else { 0.0 }));
    }
    let target = &pair.p * &pair.reduced.a - &pair.full.a * &pair.p;
    pair.q = pinv(&pair.full.b) * target;
    Ok(pair)
}

/// Rotates reduced coordinates so that `B_rw B_rwᵀ` is diagonal. The reduced
/// state box becomes the bounding box of the rotated box.
pub fn diagonalize_noise(mut pair: ReducedPair) -> Result<ReducedPair, MorError> {
    let cov = symmetrize(&(&pair.reduced.bw * pair.reduced.bw.transpose()));
    let v = cov.symmetric_eigen().eigenvectors;
    let vt = v.transpose();
    let r = &mut pair.reduced;
    r.a = &vt * &r.a * &v;
    r.b = &vt * &r.b;
    r.bw = &vt * &r.bw;
    r.c = &r.c * &v;
    r.offset = &vt * &r.offset;
    r.x_space = reduced_box(&r.x_space, &vt)?;
    pair.p = &pair.p * &v;
    pair.q = &pair.q * &v;
    pair.pi = &vt * &pair.pi;
    Ok(pair)
}

/// `x_r = (PᵀDP)⁻¹PᵀD x`: the reduced state nearest to `x` in the `D`-norm.
pub fn project_initial(p: &Mat, d: &Mat, x: &Vect) -> Option<Vect> {
    let g = p.transpose() * d * p;
    g.try_inverse().map(|gi| gi * p.transpose() * d * x)
}

/// Shrinks `X` to the bounding box of `S_k` with `S_0 = P1 ∩ X` and
/// `S_{j+1} = P1 ∩ Pre(S_j)` under the nominal dynamics and inputs `U_act`.
pub fn reduce_x(m: &LinearModel, u_act: &Polytope, p1: &Polytope, k: usize) -> Result<LinearModel, MorError> {
    let mut s = p1.intersect(&m.x_space)?;
    for _ in 0..k {
        let pre = pre_set(&s, &m.a, &m.b, m.offset.as_slice(), u_act, Some(&m.x_space))?;
        s = p1.intersect(&pre)?;
        if !s.has_interior()? {
            return Err(MorError::Geometry(GeometryError::EmptyResult("no invariant candidate".into())));
        }
    }
    let (lo, hi) = s.bounding_box()?;
    let mut out = m.clone();
    out.x_space = Polytope::from_box(&lo, &hi)?;
    Ok(out)
}
