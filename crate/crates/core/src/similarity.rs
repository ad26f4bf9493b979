//! (ε, δ) simulation relations between a model and its abstraction or
//! reduced-order model.
//!
//! The error `e = x − x̂` follows `e⁺ = A_e e + β` with `β` in a box. When the
//! box margin does not close, part of `A_e e` is moved into the noise channel
//! `G` by shifting the abstract noise `ŵ = w + s G⁺ A_e e`; a maximal coupling
//! realizes the shift except with probability `2Φ(‖γ‖/2) − 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::abstraction::{std_normal_cdf, AbstractModel, InterfaceKind};
use crate::linalg::{
    dlyap, inv_sqrtm_pd, max_eigenvalue_sym, min_eigenvalue_sym, pinv, spectral_norm, spectral_radius, sqrtm_psd,
    symmetrize, Mat, Vect,
};
use crate::mor::{solve_dare, MorError, ReducedPair};
use crate::models::PlantModel;

/// Number of shift values tried before bisection.
const SHIFT_SCAN: usize = 200;
/// Number of Lyapunov levels tried when searching for `D`.
const LEVELS: usize = 24;
const BISECT_TOL: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimilarityError {
    #[error("no coupling certifies ε = {epsilon}; smallest certifiable ε ≈ {minimal_epsilon}")]
    Infeasible { epsilon: f64, minimal_epsilon: f64 },
    #[error("no common weighting matrix for the modes; refine the partition")]
    NoCommonD,
    #[error("weighting matrices are incompatible (norm-equivalence constant unbounded)")]
    IncompatibleWeighting,
    #[error("feedback gain: {0}")]
    Gain(#[from] MorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationKind {
    FiniteState,
    Mor,
    Combined,
}

/// Interface refinement `u = û + K_i (x − x̂)`; empty gains for the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interface {
    pub kind: InterfaceKind,
    pub gains: Vec<Mat>,
    /// Factor applied to the DARE gains to respect the feedback budget.
    pub scale: f64,
}

impl Interface {
    pub fn default_for(m: &PlantModel) -> Self {
        let _ = m;
        Self { kind: InterfaceKind::Default, gains: Vec::new(), scale: 0.0 }
    }

    pub fn gain(&self, mode: usize) -> Option<&Mat> {
        match self.kind {
            InterfaceKind::Default => None,
            InterfaceKind::Feedback => self.gains.get(mode).or_else(|| self.gains.first()),
        }
    }

    fn closed_loop(&self, m: &PlantModel, mode: usize) -> Mat {
        let md = m.mode(mode);
        match self.gain(mode) {
            Some(k) => md.a + md.b * k,
            None => md.a.clone(),
        }
    }
}

/// Link between the full model and a reduced-order model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorLink {
    pub d: Mat,
    pub epsilon: f64,
    pub output_radius: f64,
    pub delta: f64,
    pub lambda: f64,
    pub shift: f64,
    pub k_mor: Mat,
    pub p: Mat,
    pub q: Mat,
    /// Coupling kernel: `w_r = w + F (x − P x_r)`.
    pub kernel: Mat,
    /// Radius of the untracked noise part and its tail probability.
    pub noise_radius: f64,
    pub noise_tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRelation {
    pub kind: RelationKind,
    /// Weighting of `x − x̂` (or `x − P x_r` for a pure reduction link).
    pub d: Mat,
    pub epsilon: f64,
    /// Bound on `‖y − ŷ‖₂` implied by membership.
    pub output_radius: f64,
    /// Per-step probability deviation, one entry per mode.
    pub delta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub shift: Vec<f64>,
    pub beta: Vec<f64>,
    pub interface: Interface,
    /// Noise shift gains `ŵ = w + Γ_i e`.
    pub coupling: Vec<Mat>,
    pub mor: Option<MorLink>,
}

impl SimulationRelation {
    /// `‖x − x̂‖_D ≤ ε`.
    pub fn contains(&self, x_hat: &[f64], x: &[f64]) -> bool {
        let e: Vec<f64> = x.iter().zip(x_hat).map(|(a, b)| a - b).collect();
        crate::linalg::weighted_norm(&e, &self.d) <= self.epsilon * (1.0 + 1e-12)
    }

    pub fn delta_of_mode(&self, mode: usize) -> f64 {
        self.delta.get(mode).or_else(|| self.delta.first()).copied().unwrap_or(0.0)
    }

    pub fn max_delta(&self) -> f64 {
        self.delta.iter().copied().fold(0.0, f64::max)
    }

    /// δ at every abstract state.
    pub fn state_deltas(&self, modes: &[u32]) -> Vec<f64> {
        modes.iter().map(|&m| self.delta_of_mode(m as usize)).collect()
    }

    pub fn coupling_gain(&self, mode: usize) -> Option<&Mat> {
        self.coupling.get(mode).or_else(|| self.coupling.first())
    }
}

/// `2Φ(r/2) − 1`: total variation between `N(0, I)` and `N(γ, I)` with `‖γ‖ = r`.
pub fn decoupling_probability(r: f64) -> f64 {
    (2.0 * std_normal_cdf(0.5 * r) - 1.0).clamp(0.0, 1.0)
}

/// Largest `‖v‖_D` over the box `[−h, h]`.
pub fn box_radius(h: &[f64], d: &Mat) -> f64 {
    let n = h.len();
    let mut best: f64 = 0.0;
    for mask in 0..(1usize << n) {
        let v: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { h[i] } else { -h[i] }).collect();
        best = best.max(crate::linalg::weighted_norm(&v, d));
    }
    best
}

/// Outcome of certifying one error recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub lambda: f64,
    pub shift: f64,
    pub delta: f64,
}

struct Weights {
    sqrt: Mat,
    inv_sqrt: Mat,
}

impl Weights {
    fn new(d: &Mat) -> Option<Self> {
        Some(Self { sqrt: sqrtm_psd(d, 1e-12)?, inv_sqrt: inv_sqrtm_pd(d)? })
    }

    fn norm(&self, m: &Mat) -> f64 {
        spectral_norm(&(&self.sqrt * m * &self.inv_sqrt))
    }
}

/// Smallest shift `s ∈ [0, 1]` with `‖(I − s G G⁺) A_e‖_D ε + β ≤ ε`, and the
/// resulting decoupling probability.
fn certify(a_e: &Mat, g: &Mat, w: &Weights, eps: f64, beta: f64) -> Option<Certificate> {
    let lambda = w.norm(a_e);
    if lambda * eps + beta <= eps {
        return Some(Certificate { lambda, shift: 0.0, delta: 0.0 });
    }
    if g.iter().all(|&v| v == 0.0) {
        return None;
    }
    let gp = pinv(g);
    let proj = g * &gp;
    let n = a_e.nrows();
    let shifted = |s: f64| (Mat::identity(n, n) - &proj * s) * a_e;
    let margin = |s: f64| w.norm(&shifted(s)) * eps + beta - eps;
    let mut lo = 0.0;
    let mut hi = None;
    for k in 1..=SHIFT_SCAN {
        let s = k as f64 / SHIFT_SCAN as f64;
        if margin(s) <= 0.0 {
            hi = Some(s);
            break;
        }
        lo = s;
    }
    let mut hi = hi?;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if margin(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let gain = spectral_norm(&(&gp * a_e * &w.inv_sqrt));
    Some(Certificate { lambda: w.norm(&shifted(hi)), shift: hi, delta: decoupling_probability(hi * eps * gain) })
}

/// Smallest ε that `certify` accepts, by doubling then bisection.
fn minimal_epsilon(a_e: &Mat, g: &Mat, w: &Weights, beta: impl Fn(f64) -> f64, eps: f64) -> f64 {
    let ok = |e: f64| certify(a_e, g, w, e, beta(e)).is_some();
    let mut hi = eps.max(1e-12);
    let mut steps = 0;
    while !ok(hi) {
        hi *= 2.0;
        steps += 1;
        if steps > 60 {
            return f64::INFINITY;
        }
    }
    let mut lo = if hi > eps { hi / 2.0 } else { 0.0 };
    while hi - lo > BISECT_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn mode_beta_half_widths(m: &PlantModel, abs: &AbstractModel, mode: usize) -> Vec<f64> {
    let mut h = abs.quantization_half_widths();
    if let Some(kappa) = m.mode(mode).kappa {
        if let Ok((lo, hi)) = kappa.bounding_box() {
            for (d, hd) in h.iter_mut().enumerate() {
                *hd += lo[d].abs().max(hi[d].abs());
            }
        }
    }
    h
}

/// Unscaled DARE gains (`Q = I`, `R = I`) for every mode.
pub fn feedback_gains(m: &PlantModel, kind: InterfaceKind) -> Result<Interface, SimilarityError> {
    if kind == InterfaceKind::Default {
        return Ok(Interface::default_for(m));
    }
    let gains = (0..m.num_modes())
        .into_par_iter()
        .map(|i| {
            let md = m.mode(i);
            let n = md.a.nrows();
            let k = md.b.ncols();
            solve_dare(md.a, md.b, &Mat::identity(n, n), &Mat::identity(k, k)).map(|(_, f)| f)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Interface { kind, gains, scale: 1.0 })
}

/// Default probes: five interior points spread over the box plus its center.
pub fn default_probes(m: &PlantModel) -> Vec<Vec<f64>> {
    let (lo, hi) = m.x_space().bounding_box().expect("state space is bounded");
    let n = lo.len();
    let fr = [[0.125, 0.8], [0.857, 0.65], [0.577, 0.22], [0.125, 0.43], [0.5, 0.5]];
    let mut out: Vec<Vec<f64>> = fr
        .iter()
        .map(|f| (0..n).map(|d| lo[d] + f[d % 2] * (hi[d] - lo[d])).collect())
        .collect();
    out.push((0..n).map(|d| 0.5 * (lo[d] + hi[d])).collect());
    out
}

/// Common weighting `D ≻ 0` with `CᵀC ⪯ D`, tight in the top direction, so
/// that `ε` bounds the output deviation.
///
/// For each trial level `λ` above the largest probe spectral radius, every
/// probe mode yields `D_p` solving `(A_e/λ)ᵀ D_p (A_e/λ) − D_p = −I`; the
/// normalized average is scored by the mean certified δ over all modes.
pub fn compute_weighting(
    m: &PlantModel,
    abs: &AbstractModel,
    eps: f64,
    interface: &Interface,
    probes: &[Vec<f64>],
) -> Result<Mat, SimilarityError> {
    let n = m.state_dim();
    let mut probe_modes: Vec<usize> = probes.iter().map(|p| m.mode_of(p)).collect();
    probe_modes.sort_unstable();
    probe_modes.dedup();
    if probe_modes.is_empty() {
        probe_modes.push(0);
    }
    let probe_a: Vec<Mat> = probe_modes.iter().map(|&i| interface.closed_loop(m, i)).collect();
    let rho = probe_a.iter().map(spectral_radius).fold(0.0, f64::max).max(1e-3);
    let all_a: Vec<Mat> = (0..m.num_modes()).map(|i| interface.closed_loop(m, i)).collect();
    let betas: Vec<Vec<f64>> = (0..m.num_modes()).map(|i| mode_beta_half_widths(m, abs, i)).collect();
    let ctc = m.c().transpose() * m.c();
    let mut best: Option<((f64, f64), Mat)> = None;
    for k in 0..LEVELS {
        let level = rho * (1.0 + 1e-3 * 1000f64.powf(k as f64 / (LEVELS - 1) as f64));
        let mut acc = Mat::zeros(n, n);
        let mut ok = true;
        for a in &probe_a {
            match dlyap(&(a / level).transpose(), &Mat::identity(n, n)) {
                Some(dp) if dp.iter().all(|v| v.is_finite()) => acc += &dp / max_eigenvalue_sym(&dp),
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let d = symmetrize(&(&acc / max_eigenvalue_sym(&acc)));
        let lmin = min_eigenvalue_sym(&d);
        if lmin <= 0.0 || 1.0 / lmin > MAX_CONDITION {
            continue;
        }
        let Some(d) = output_normalized(d, &ctc) else { continue };
        let Some(w) = Weights::new(&d) else { continue };
        let scores: Vec<(f64, f64)> = (0..m.num_modes())
            .into_par_iter()
            .map(|i| {
                let beta = box_radius(&betas[i], &d);
                let g = m.mode(i).bw;
                let margin = (w.norm(&all_a[i]) * eps + beta) / eps;
                match certify(&all_a[i], g, &w, eps, beta) {
                    Some(c) => (c.delta, margin),
                    None => (1.0, margin),
                }
            })
            .collect();
        let mean_delta = scores.iter().map(|s| s.0).sum::<f64>() / scores.len() as f64;
        let worst_margin = scores.iter().map(|s| s.1).fold(0.0, f64::max);
        let key = (mean_delta, worst_margin);
        if best.as_ref().is_none_or(|(b, _)| key.0 < b.0 - 1e-12 || (key.0 <= b.0 + 1e-12 && key.1 < b.1 - 1e-12)) {
            best = Some((key, d));
        }
    }
    best.map(|(_, d)| d).ok_or(SimilarityError::NoCommonD)
}

/// Scales `d` so that `λ_max(d^{-1/2} CᵀC d^{-1/2}) = 1`.
fn output_normalized(d: Mat, ctc: &Mat) -> Option<Mat> {
    let dis = inv_sqrtm_pd(&d)?;
    let c2 = max_eigenvalue_sym(&(&dis * ctc * &dis));
    if !(c2 > 0.0 && c2.is_finite()) {
        return Some(d);
    }
    Some(symmetrize(&(d * c2)))
}

/// Certifies the finite-state relation for a fixed `D`; δ per mode.
pub fn quantify_sim(
    m: &PlantModel,
    abs: &AbstractModel,
    eps: f64,
    interface: &Interface,
    d: &Mat,
) -> Result<SimulationRelation, SimilarityError> {
    let w = Weights::new(d).ok_or(SimilarityError::NoCommonD)?;
    let results: Vec<Result<(Certificate, f64, Mat), SimilarityError>> = (0..m.num_modes())
        .into_par_iter()
        .map(|i| {
            let a_e = interface.closed_loop(m, i);
            let h = mode_beta_half_widths(m, abs, i);
            let beta = box_radius(&h, d);
            let g = m.mode(i).bw;
            match certify(&a_e, g, &w, eps, beta) {
                Some(c) => Ok((c, beta, pinv(g) * &a_e * c.shift)),
                None => Err(SimilarityError::Infeasible {
                    epsilon: eps,
                    minimal_epsilon: minimal_epsilon(&a_e, g, &w, |_| beta, eps),
                }),
            }
        })
        .collect();
    let mut delta = Vec::with_capacity(results.len());
    let mut lambda = Vec::with_capacity(results.len());
    let mut shift = Vec::with_capacity(results.len());
    let mut beta = Vec::with_capacity(results.len());
    let mut coupling = Vec::with_capacity(results.len());
    let mut worst: Option<SimilarityError> = None;
    for r in results {
        match r {
            Ok((c, b, gam)) => {
                delta.push(c.delta);
                lambda.push(c.lambda);
                shift.push(c.shift);
                beta.push(b);
                coupling.push(gam);
            }
            Err(SimilarityError::Infeasible { epsilon, minimal_epsilon }) => {
                let prev = match &worst {
                    Some(SimilarityError::Infeasible { minimal_epsilon: p, .. }) => *p,
                    _ => 0.0,
                };
                worst = Some(SimilarityError::Infeasible { epsilon, minimal_epsilon: minimal_epsilon.max(prev) });
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(e) = worst {
        return Err(e);
    }
    let c = m.c();
    let out_gain = spectral_norm(&(c * &w.inv_sqrt));
    Ok(SimulationRelation {
        kind: RelationKind::FiniteState,
        d: d.clone(),
        epsilon: eps,
        output_radius: eps * out_gain,
        delta,
        lambda,
        shift,
        beta,
        interface: interface.clone(),
        coupling,
        mor: None,
    })
}

/// Largest factor `α ≤ 1` with `ε ‖α K_{i,j} D^{-1/2}‖ ≤ budget_j` for all modes.
pub fn budget_scale(gains: &[Mat], d: &Mat, eps: f64, budget: &[f64]) -> f64 {
    let dis = inv_sqrtm_pd(d).expect("weighting is positive definite");
    let mut alpha: f64 = 1.0;
    for k in gains {
        let kd = k * &dis;
        for j in 0..kd.nrows() {
            let r = kd.row(j).norm() * eps;
            if r > 0.0 {
                alpha = alpha.min(budget[j] / r);
            }
        }
    }
    alpha.max(0.0)
}

/// Gains, weighting and δ for the finite-state relation: alternates between
/// `compute_weighting` and budget scaling of the DARE gains.
pub fn finite_relation(
    m: &PlantModel,
    abs: &AbstractModel,
    eps: f64,
    kind: InterfaceKind,
    probes: &[Vec<f64>],
) -> Result<SimulationRelation, SimilarityError> {
    let base = feedback_gains(m, kind)?;
    if kind == InterfaceKind::Default {
        let d = compute_weighting(m, abs, eps, &base, probes)?;
        return quantify_sim(m, abs, eps, &base, &d);
    }
    let budget = &abs.inputs.feedback_half_width;
    let mut alpha = 1.0;
    let mut iface = base.clone();
    let mut d = compute_weighting(m, abs, eps, &iface, probes)?;
    for _ in 0..30 {
        let need = budget_scale(&iface.gains, &d, eps, budget) * alpha;
        if need >= alpha * (1.0 - 1e-9) {
            break;
        }
        alpha = need;
        iface = scaled(&base, alpha);
        d = compute_weighting(m, abs, eps, &iface, probes)?;
    }
    let need = budget_scale(&iface.gains, &d, eps, budget) * alpha;
    if need < alpha * (1.0 - 1e-9) {
        alpha = need;
        iface = scaled(&base, alpha);
    }
    log::info!("feedback gains scaled by {alpha:.4}");
    quantify_sim(m, abs, eps, &iface, &d)
}

fn scaled(base: &Interface, alpha: f64) -> Interface {
    Interface { kind: base.kind, gains: base.gains.iter().map(|k| k * alpha).collect(), scale: alpha }
}

/// Lyapunov weighting of the reduction error with `D_r ⪰ CᵀC`, normalized so
/// that `λ_max(D_r^{-1/2} CᵀC D_r^{-1/2}) = 1`.
pub fn mor_weighting(pair: &ReducedPair, level: f64, eta: f64) -> Option<Mat> {
    let full = &pair.full;
    let n = full.state_dim();
    let a_e = &full.a + &full.b * &pair.f;
    let ctc = full.c.transpose() * &full.c;
    let x = dlyap(&(&a_e / level).transpose(), &(&ctc + Mat::identity(n, n) * eta))?;
    let xi = inv_sqrtm_pd(&x)?;
    let c = max_eigenvalue_sym(&(&xi * &ctc * &xi));
    if !(c > 0.0) {
        return Some(x);
    }
    Some(symmetrize(&(x * c)))
}

struct MorParts {
    a_e: Mat,
    g: Mat,
    beta_det: f64,
    noise_gain: f64,
    noise_dim: usize,
}

fn mor_parts(pair: &ReducedPair, d: &Mat) -> MorParts {
    let full = &pair.full;
    let red = &pair.reduced;
    let a_e = &full.a + &full.b * &pair.f;
    let g = &pair.p * &red.bw;
    let rx = &full.a * &pair.p + &full.b * &pair.q - &pair.p * &red.a;
    let ru = &full.b - &pair.p * &red.b;
    let drift = &full.offset - &pair.p * &red.offset;
    let (xlo, xhi) = red.x_space.bounding_box().expect("reduced state space is bounded");
    let (ulo, uhi) = full.u_space.bounding_box().expect("input space is bounded");
    let r = xlo.len();
    let k = ulo.len();
    let mut beta_det: f64 = 0.0;
    for mask in 0..(1usize << (r + k)) {
        let xr = Vect::from_fn(r, |i, _| if mask >> i & 1 == 1 { xhi[i] } else { xlo[i] });
        let ur = Vect::from_fn(k, |i, _| if mask >> (r + i) & 1 == 1 { uhi[i] } else { ulo[i] });
        let v = &rx * xr + &ru * ur + &drift;
        beta_det = beta_det.max(crate::linalg::weighted_norm(v.as_slice(), d));
    }
    let mw = &full.bw - &g;
    let dsqrt = sqrtm_psd(d, 1e-12).expect("weighting is PSD");
    let noise_gain = spectral_norm(&(dsqrt * &mw));
    MorParts { a_e, g, beta_det, noise_gain, noise_dim: full.bw.ncols() }
}

/// Certifies `‖x − P x_r‖_{D_r} ≤ ε_r` under `u = u_r + Q x_r + K_MOR e` and
/// `w_r = w + F e`. The untracked noise `(B_w − P B_rw) w` is bounded by a
/// chi-square radius whose tail adds to δ_r.
pub fn quantify_sim_mor(pair: &ReducedPair, eps_r: f64, d_r: &Mat) -> Result<SimulationRelation, SimilarityError> {
    let w = Weights::new(d_r).ok_or(SimilarityError::IncompatibleWeighting)?;
    let parts = mor_parts(pair, d_r);
    log::debug!("reduction residual {:.4e}, untracked noise gain {:.4e}", parts.beta_det, parts.noise_gain);
    let chi = ChiSquared::new(parts.noise_dim as f64).expect("positive dof");
    let mut best: Option<(Certificate, f64, f64)> = None;
    let tails: Vec<f64> = if parts.noise_gain <= 1e-12 {
        vec![0.0]
    } else {
        (0..=160).map(|i| 10f64.powf(-12.0 + 12.0 * i as f64 / 160.0) * 0.5).collect()
    };
    for &tail in &tails {
        let radius = if tail == 0.0 { 0.0 } else { parts.noise_gain * chi.inverse_cdf(1.0 - tail).sqrt() };
        if let Some(c) = certify(&parts.a_e, &parts.g, &w, eps_r, parts.beta_det + radius) {
            let total = c.delta + tail;
            if best.as_ref().is_none_or(|b| total < b.0.delta + b.2) {
                best = Some((c, radius, tail));
            }
        }
    }
    let Some((cert, radius, tail)) = best else {
        let noise_floor = if parts.noise_gain <= 1e-12 {
            0.0
        } else {
            parts.noise_gain * chi.inverse_cdf(1.0 - 0.5).sqrt()
        };
        return Err(SimilarityError::Infeasible {
            epsilon: eps_r,
            minimal_epsilon: minimal_epsilon(&parts.a_e, &parts.g, &w, |_| parts.beta_det + noise_floor, eps_r),
        });
    };
    let kernel = pinv(&parts.g) * &parts.a_e * cert.shift;
    let out_gain = spectral_norm(&(&pair.full.c * &w.inv_sqrt));
    let delta = (cert.delta + tail).min(1.0);
    let link = MorLink {
        d: d_r.clone(),
        epsilon: eps_r,
        output_radius: eps_r * out_gain,
        delta,
        lambda: cert.lambda,
        shift: cert.shift,
        k_mor: pair.f.clone(),
        p: pair.p.clone(),
        q: pair.q.clone(),
        kernel: kernel.clone(),
        noise_radius: radius,
        noise_tail: tail,
    };
    Ok(SimulationRelation {
        kind: RelationKind::Mor,
        d: d_r.clone(),
        epsilon: eps_r,
        output_radius: link.output_radius,
        delta: vec![delta],
        lambda: vec![cert.lambda],
        shift: vec![cert.shift],
        beta: vec![parts.beta_det + radius],
        interface: Interface { kind: InterfaceKind::Default, gains: Vec::new(), scale: 0.0 },
        coupling: vec![kernel],
        mor: Some(link),
    })
}

/// Searches Lyapunov levels for the `D_r` giving the smallest δ_r.
pub fn mor_relation(pair: &ReducedPair, eps_r: f64, eta: f64) -> Result<SimulationRelation, SimilarityError> {
    let a_e = &pair.full.a + &pair.full.b * &pair.f;
    let rho = spectral_radius(&a_e).max(1e-3);
    let mut best: Option<SimulationRelation> = None;
    let mut last_err = None;
    for k in 0..LEVELS {
        let level = (rho * (1.0 + 1e-3 * 1000f64.powf(k as f64 / (LEVELS - 1) as f64))).max(1e-6);
        let Some(d) = mor_weighting(pair, level, eta) else { continue };
        match quantify_sim_mor(pair, eps_r, &d) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.delta[0] < b.delta[0] - 1e-15) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(SimilarityError::IncompatibleWeighting))
}

/// `c` with `‖C_r v‖ ≤ c ‖v‖_D`: the square root of the largest generalized
/// eigenvalue of `(C_rᵀC_r, D)`.
pub fn norm_equivalence(c_r: &Mat, d: &Mat) -> Result<f64, SimilarityError> {
    let dis = inv_sqrtm_pd(d).ok_or(SimilarityError::IncompatibleWeighting)?;
    let c = max_eigenvalue_sym(&(&dis * c_r.transpose() * c_r * &dis)).max(0.0).sqrt();
    if c.is_finite() {
        Ok(c)
    } else {
        Err(SimilarityError::IncompatibleWeighting)
    }
}

/// Chains `M ~ M_r` (r1) and `M_r ~ M̂` (r2): output radii add, δ's add.
pub fn combine_relations(
    r1: &SimulationRelation,
    r2: &SimulationRelation,
    c_r: &Mat,
) -> Result<SimulationRelation, SimilarityError> {
    let link = r1.mor.clone().ok_or(SimilarityError::IncompatibleWeighting)?;
    let c = norm_equivalence(c_r, &r2.d)?;
    let mut out = r2.clone();
    out.kind = RelationKind::Combined;
    out.output_radius = r1.output_radius + c * r2.epsilon;
    out.delta = r2.delta.iter().map(|d| (d + link.delta).min(1.0)).collect();
    out.mor = Some(link);
    Ok(out)
}

/// Draws `ŵ ~ N(0, I)` maximally coupled with `w` so that `ŵ = w + γ` except
/// with probability `2Φ(‖γ‖/2) − 1`. Returns whether the shift held.
pub fn maximal_coupling<R: Rng + ?Sized>(rng: &mut R, w: &Vect, gamma: &Vect) -> (Vect, bool) {
    let g2 = gamma.norm_squared();
    if g2 == 0.0 {
        return (w.clone(), true);
    }
    // Couple w ~ N(0, I) with v = ŵ − γ ~ N(−γ, I).
    let log_ratio = -w.dot(gamma) - 0.5 * g2;
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        return (w + gamma, true);
    }
    loop {
        let z = Vect::from_fn(w.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = z - gamma;
        let lr = v.dot(gamma) + 0.5 * g2;
        let accept = 1.0 - lr.min(0.0).exp();
        if rng.random::<f64>() < accept {
            return (v + gamma, false);
        }
    }
}

/// Runs the coupled pair `(x, x̂)` under random abstract inputs and counts
/// steps with `‖x − x̂‖_D > ε`. Pairs leaving the grid restart at a random cell.
/// Returns `(steps counted, exits)`.
pub fn coupled_exit_count<R: Rng + ?Sized>(
    m: &PlantModel,
    abs: &AbstractModel,
    rel: &SimulationRelation,
    steps: usize,
    rng: &mut R,
) -> (usize, usize) {
    let grid = &abs.grid;
    let nu = abs.inputs.inputs.len();
    let q = m.mode(0).bw.ncols();
    let mut s = rng.random_range(0..grid.num_cells());
    let mut x_hat = Vect::from_vec(grid.center(s));
    let mut x = x_hat.clone();
    let mut exits = 0;
    let mut counted = 0;
    for _ in 0..steps {
        let ui = rng.random_range(0..nu);
        let mode = abs.modes[s] as usize;
        let md = m.mode(mode);
        let u_hat = Vect::from_column_slice(&abs.inputs.inputs[ui]);
        let e = &x - &x_hat;
        let u = match rel.interface.gain(mode) {
            Some(k) => &u_hat + k * &e,
            None => u_hat.clone(),
        };
        let w = Vect::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gamma = rel.coupling_gain(mode).map(|g| g * &e).unwrap_or_else(|| Vect::zeros(q));
        let (w_hat, _) = maximal_coupling(rng, &w, &gamma);
        x = md.a * &x + md.b * &u + md.offset + md.bw * &w;
        let mean = abs.tensor.mean_cells(s * nu + ui);
        let mean = Vect::from_fn(grid.dim(), |d, _| grid.lower[d] + (mean[d] + 0.5) * grid.widths[d]);
        let next = mean + md.bw * &w_hat;
        match grid.index_of(next.as_slice()) {
            Some(j) if m.x_space().contains(x.as_slice()).unwrap_or(false) => {
                s = j;
                x_hat = Vect::from_vec(grid.center(j));
                counted += 1;
                if !rel.contains(x_hat.as_slice(), x.as_slice()) {
                    exits += 1;
                    x = x_hat.clone();
                }
            }
            _ => {
                s = rng.random_range(0..grid.num_cells());
                x_hat = Vect::from_vec(grid.center(s));
                x = x_hat.clone();
            }
        }
    }
    (counted, exits)
}
