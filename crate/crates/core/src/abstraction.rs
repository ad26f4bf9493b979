//! Finite-state abstraction: state grid, abstract inputs, the factored
//! Gaussian transition tensor and ε-robust label sets.
//!
//! Transitions are never stored as a matrix. Each (state, input) pair keeps
//! one key per axis; a key names a one-dimensional kernel
//! `K[j] = Φ((j − g + ½)/σ) − Φ((j − g − ½)/σ)` where `g` is the successor
//! mean in grid units. Axes whose means take few distinct values use exact
//! keys, the others snap the mean to `1/SUBCELL` of a cell.

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::geometry::{GeometryError, LabeledPartition, Polytope, TOL_GEO};
use crate::linalg::{Mat, Vect};
use crate::models::PlantModel;
use crate::speclang::Letter;

/// Sub-cell resolution of quantized kernel keys.
pub const SUBCELL: f64 = 64.0;
/// Kernels are evaluated out to this many standard deviations.
const SUPPORT_SIGMAS: f64 = 9.0;
const TENSOR_MAGIC: &[u8; 8] = b"SCSYNTNS";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum AbstractionError {
    #[error("input fractions {actuation} + {feedback} exceed 1")]
    FractionOverflow { actuation: f64, feedback: f64 },
    #[error("noise covariance B_w B_wᵀ is not diagonal and shared by all modes")]
    NonDiagonalNoise,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Uniform grid over a box; cell indices are row-major with axis 0 fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
    pub widths: Vec<f64>,
}

impl Grid {
    pub fn new(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Self, AbstractionError> {
        if lower.len() != upper.len() || lower.len() != counts.len() || counts.is_empty() {
            return Err(AbstractionError::InvalidGrid("dimension mismatch".into()));
        }
        if counts.contains(&0) || lower.iter().zip(upper).any(|(l, u)| !(u > l)) {
            return Err(AbstractionError::InvalidGrid(format!("bounds {lower:?}..{upper:?}, counts {counts:?}")));
        }
        let widths = (0..counts.len()).map(|d| (upper[d] - lower[d]) / counts[d] as f64).collect();
        Ok(Self { lower: lower.to_vec(), upper: upper.to_vec(), counts: counts.to_vec(), widths })
    }

    pub fn over(space: &Polytope, counts: &[usize]) -> Result<Self, AbstractionError> {
        let (lo, hi) = space.bounding_box()?;
        Self::new(&lo, &hi, counts)
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn num_cells(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        self.counts
            .iter()
            .map(|&l| {
                let k = i % l;
                i /= l;
                k
            })
            .collect()
    }

    pub fn flat_index(&self, k: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (d, &kd) in k.iter().enumerate() {
            idx += kd * stride;
            stride *= self.counts[d];
        }
        idx
    }

    pub fn center(&self, i: usize) -> Vec<f64> {
        self.multi_index(i)
            .iter()
            .enumerate()
            .map(|(d, &k)| self.lower[d] + (k as f64 + 0.5) * self.widths[d])
            .collect()
    }

    /// Cell containing `x`, or `None` outside the grid.
    pub fn index_of(&self, x: &[f64]) -> Option<usize> {
        let mut k = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            let t = (x[d] - self.lower[d]) / self.widths[d];
            let tol = 1e-9;
            if t < -tol || t > self.counts[d] as f64 + tol || t.is_nan() {
                return None;
            }
            k.push((t.floor().max(0.0) as usize).min(self.counts[d] - 1));
        }
        Some(self.flat_index(&k))
    }

    /// Cell nearest to `x`.
    pub fn clamp_index(&self, x: &[f64]) -> usize {
        let k: Vec<usize> = (0..self.dim())
            .map(|d| {
                let t = ((x[d] - self.lower[d]) / self.widths[d]).floor();
                (t.max(0.0) as usize).min(self.counts[d] - 1)
            })
            .collect();
        self.flat_index(&k)
    }
}

/// Selects how abstract inputs are refined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterfaceKind {
    /// `u = û`.
    #[default]
    Default,
    /// `u = û + K (x − x̂)`.
    Feedback,
}

/// Abstract inputs on the actuation part of `U` and the budget left for
/// feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractInputSet {
    pub inputs: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub actuation: Polytope,
    /// Per-input half-width available to the feedback term.
    pub feedback_half_width: Vec<f64>,
    pub actuation_fraction: f64,
    pub feedback_fraction: f64,
}

pub fn grid_input_space(
    lu: &[usize],
    u: &Polytope,
    interface: InterfaceKind,
    actuation_fraction: f64,
    feedback_fraction: f64,
) -> Result<AbstractInputSet, AbstractionError> {
    let (lo, hi) = u.box_bounds().ok_or_else(|| AbstractionError::InvalidGrid("input space must be a box".into()))?;
    if lu.len() != lo.len() || lu.contains(&0) {
        return Err(AbstractionError::InvalidGrid(format!("input counts {lu:?}")));
    }
    let (act, fb) = match interface {
        InterfaceKind::Default => (1.0, 0.0),
        InterfaceKind::Feedback => (actuation_fraction, feedback_fraction),
    };
    if !(0.0..=1.0).contains(&act) || !(0.0..=1.0).contains(&fb) || act + fb > 1.0 + 1e-12 {
        return Err(AbstractionError::FractionOverflow { actuation: act, feedback: fb });
    }
    let m = lo.len();
    let center: Vec<f64> = (0..m).map(|d| 0.5 * (lo[d] + hi[d])).collect();
    let half: Vec<f64> = (0..m).map(|d| 0.5 * (hi[d] - lo[d])).collect();
    let alo: Vec<f64> = (0..m).map(|d| center[d] - act * half[d]).collect();
    let ahi: Vec<f64> = (0..m).map(|d| center[d] + act * half[d]).collect();
    let axis_values: Vec<Vec<f64>> = (0..m)
        .map(|d| {
            if lu[d] == 1 {
                vec![center[d]]
            } else {
                (0..lu[d]).map(|k| alo[d] + (ahi[d] - alo[d]) * k as f64 / (lu[d] - 1) as f64).collect()
            }
        })
        .collect();
    let total: usize = lu.iter().product();
    let inputs = (0..total)
        .map(|mut i| {
            (0..m)
                .map(|d| {
                    let k = i % lu[d];
                    i /= lu[d];
                    axis_values[d][k]
                })
                .collect()
        })
        .collect();
    Ok(AbstractInputSet {
        inputs,
        counts: lu.to_vec(),
        actuation: Polytope::from_box(&alo, &ahi)?,
        feedback_half_width: half.iter().map(|h| fb * h).collect(),
        actuation_fraction: act,
        feedback_fraction: fb,
    })
}

/// `Φ(b) − Φ(a)` for `a ≤ b`, accurate in both tails.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    if a >= 0.0 {
        0.5 * (erfc(a * s) - erfc(b * s))
    } else if b <= 0.0 {
        0.5 * (erfc(-b * s) - erfc(-a * s))
    } else {
        1.0 - 0.5 * erfc(b * s) - 0.5 * erfc(-a * s)
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// One-dimensional kernels for a single axis, stored CSR-style by key.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisKernels {
    /// Successor mean in grid units (cell `k` has center `k`).
    pub means: Vec<f64>,
    pub start: Vec<u32>,
    pub ptr: Vec<usize>,
    pub values: Vec<f64>,
    /// Sum of stored entries.
    pub stored: Vec<f64>,
    /// Exact probability of staying inside the grid along this axis.
    pub inside: Vec<f64>,
    /// Largest distance, in cells, between a pair's mean and its key's mean.
    pub quantization: f64,
}

impl AxisKernels {
    pub fn num_keys(&self) -> usize {
        self.means.len()
    }

    pub fn kernel(&self, key: usize) -> (usize, &[f64]) {
        (self.start[key] as usize, &self.values[self.ptr[key]..self.ptr[key + 1]])
    }

    fn build(means: Vec<f64>, sigma_cells: f64, l: usize, tol: f64, quantization: f64) -> Self {
        let rows: Vec<(u32, Vec<f64>, f64)> = means.par_iter().map(|&g| kernel_row(g, sigma_cells, l, tol)).collect();
        let mut start = Vec::with_capacity(rows.len());
        let mut ptr = Vec::with_capacity(rows.len() + 1);
        let mut values = Vec::new();
        let mut stored = Vec::with_capacity(rows.len());
        let mut inside = Vec::with_capacity(rows.len());
        ptr.push(0);
        for (s, v, ins) in rows {
            start.push(s);
            stored.push(v.iter().sum());
            values.extend_from_slice(&v);
            ptr.push(values.len());
            inside.push(ins);
        }
        Self { means, start, ptr, values, stored, inside, quantization }
    }
}

/// Kernel entries ≥ `tol` for mean `g` on an axis of `l` cells, plus the
/// exact in-grid mass.
fn kernel_row(g: f64, sigma: f64, l: usize, tol: f64) -> (u32, Vec<f64>, f64) {
    if sigma == 0.0 {
        let j = (g + 0.5).floor();
        if j >= 0.0 && (j as usize) < l {
            return (j as u32, vec![1.0], 1.0);
        }
        return (0, Vec::new(), 0.0);
    }
    let inside = normal_mass((-0.5 - g) / sigma, (l as f64 - 0.5 - g) / sigma);
    let reach = SUPPORT_SIGMAS * sigma + 1.0;
    let lo = (g - reach).floor().max(0.0);
    let hi = (g + reach).ceil().min(l as f64 - 1.0);
    if lo > hi {
        return (0, Vec::new(), inside);
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let mut vals: Vec<f64> = (lo..=hi)
        .map(|j| normal_mass((j as f64 - 0.5 - g) / sigma, (j as f64 + 0.5 - g) / sigma))
        .collect();
    let first = vals.iter().position(|&v| v >= tol);
    match first {
        None => (0, Vec::new(), inside),
        Some(f) => {
            let last = vals.iter().rposition(|&v| v >= tol).unwrap_or(f);
            vals.truncate(last + 1);
            vals.drain(..f);
            for v in vals.iter_mut() {
                if *v < tol {
                    *v = 0.0;
                }
            }
            ((lo + f) as u32, vals, inside)
        }
    }
}

/// Factored transition probabilities `P(j | s, u) = ∏_d K_d[key_d(s,u)][j_d]`.
/// Mass leaving the grid goes to an absorbing rejecting sink.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionTensor {
    pub counts: Vec<usize>,
    pub num_inputs: usize,
    pub axes: Vec<AxisKernels>,
    /// `pair_keys[pair * n + d]` with `pair = s * num_inputs + u`.
    pub pair_keys: Vec<u32>,
    group_ptr: Vec<usize>,
    group_pairs: Vec<u32>,
}

/// Per-(state, input) expectations over successor cells.
pub trait TransitionOracle: Sync {
    fn num_states(&self) -> usize;
    fn num_inputs(&self) -> usize;
    /// `out[s * num_inputs + u] = Σ_j P(j | s, u) w[j]`.
    fn expect(&self, w: &[f64], out: &mut [f64]);
    /// Probability discarded by truncation (neither on the grid nor in the sink).
    fn truncated_mass(&self, pair: usize) -> f64;
}

impl AbstractionTensor {
    pub fn num_states(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states() * self.num_inputs
    }

    fn keys(&self, pair: usize) -> &[u32] {
        let n = self.counts.len();
        &self.pair_keys[pair * n..(pair + 1) * n]
    }

    /// Sum of stored probabilities over grid cells.
    pub fn row_mass(&self, pair: usize) -> f64 {
        self.keys(pair).iter().zip(&self.axes).map(|(&k, ax)| ax.stored[k as usize]).product()
    }

    /// Probability of leaving the grid.
    pub fn out_mass(&self, pair: usize) -> f64 {
        1.0 - self.keys(pair).iter().zip(&self.axes).map(|(&k, ax)| ax.inside[k as usize]).product::<f64>()
    }

    /// Successor mean of a pair in grid units, as represented by its keys.
    pub fn mean_cells(&self, pair: usize) -> Vec<f64> {
        self.keys(pair).iter().zip(&self.axes).map(|(&k, ax)| ax.means[k as usize]).collect()
    }

    /// Explicit successor distribution of one pair (for tests and export).
    pub fn row(&self, pair: usize) -> Vec<(usize, f64)> {
        let n = self.counts.len();
        let keys = self.keys(pair);
        let mut out = vec![(0usize, 1.0f64)];
        let mut stride = 1;
        for d in 0..n {
            let (st, vals) = self.axes[d].kernel(keys[d] as usize);
            let mut next = Vec::with_capacity(out.len() * vals.len());
            for &(idx, p) in &out {
                for (i, &v) in vals.iter().enumerate() {
                    next.push((idx + (st + i) * stride, p * v));
                }
            }
            out = next;
            stride *= self.counts[d];
        }
        out.retain(|&(_, p)| p > 0.0);
        out
    }

    fn finish(counts: Vec<usize>, num_inputs: usize, axes: Vec<AxisKernels>, pair_keys: Vec<u32>) -> Self {
        let n = counts.len();
        let pairs = pair_keys.len() / n;
        let nk0 = axes[0].num_keys();
        let mut group_ptr = vec![0usize; nk0 + 1];
        for p in 0..pairs {
            group_ptr[pair_keys[p * n] as usize + 1] += 1;
        }
        for k in 0..nk0 {
            group_ptr[k + 1] += group_ptr[k];
        }
        let mut fill = group_ptr.clone();
        let mut group_pairs = vec![0u32; pairs];
        for p in 0..pairs {
            let k = pair_keys[p * n] as usize;
            group_pairs[fill[k]] = p as u32;
            fill[k] += 1;
        }
        Self { counts, num_inputs, axes, pair_keys, group_ptr, group_pairs }
    }

    fn expect_direct(&self, w: &[f64], pair: usize) -> f64 {
        let keys = self.keys(pair);
        let n = self.counts.len();
        fn rec(t: &AbstractionTensor, w: &[f64], keys: &[u32], d: usize, base: usize, strides: &[usize]) -> f64 {
            let (st, vals) = t.axes[d].kernel(keys[d] as usize);
            let mut acc = 0.0;
            for (i, &v) in vals.iter().enumerate() {
                let idx = base + (st + i) * strides[d];
                acc += if d == 0 { v * w[idx] } else { v * rec(t, w, keys, d - 1, idx, strides) };
            }
            acc
        }
        let mut strides = vec![1usize; n];
        for d in 1..n {
            strides[d] = strides[d - 1] * self.counts[d - 1];
        }
        rec(self, w, keys, n - 1, 0, &strides)
    }

    /// Writes the tensor in the versioned little-endian dump format.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), AbstractionError> {
        out.write_all(TENSOR_MAGIC)?;
        out.write_u32::<LittleEndian>(TENSOR_VERSION)?;
        out.write_u32::<LittleEndian>(self.counts.len() as u32)?;
        for &c in &self.counts {
            out.write_u64::<LittleEndian>(c as u64)?;
        }
        out.write_u64::<LittleEndian>(self.num_inputs as u64)?;
        for ax in &self.axes {
            out.write_f64::<LittleEndian>(ax.quantization)?;
            out.write_u64::<LittleEndian>(ax.num_keys() as u64)?;
            out.write_u64::<LittleEndian>(ax.values.len() as u64)?;
            for k in 0..ax.num_keys() {
                out.write_f64::<LittleEndian>(ax.means[k])?;
                out.write_u32::<LittleEndian>(ax.start[k])?;
                out.write_u64::<LittleEndian>((ax.ptr[k + 1] - ax.ptr[k]) as u64)?;
                out.write_f64::<LittleEndian>(ax.inside[k])?;
            }
            for &v in &ax.values {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        out.write_u64::<LittleEndian>(self.pair_keys.len() as u64)?;
        for &k in &self.pair_keys {
            out.write_u32::<LittleEndian>(k)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut inp: R) -> Result<Self, AbstractionError> {
        let mut magic = [0u8; 8];
        inp.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(AbstractionError::Format("bad magic".into()));
        }
        let version = inp.read_u32::<LittleEndian>()?;
        if version != TENSOR_VERSION {
            return Err(AbstractionError::Format(format!("version {version}, expected {TENSOR_VERSION}")));
        }
        let n = inp.read_u32::<LittleEndian>()? as usize;
        let counts = (0..n).map(|_| inp.read_u64::<LittleEndian>().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let num_inputs = inp.read_u64::<LittleEndian>()? as usize;
        let mut axes = Vec::with_capacity(n);
        for _ in 0..n {
            let quantization = inp.read_f64::<LittleEndian>()?;
            let nk = inp.read_u64::<LittleEndian>()? as usize;
            let nv = inp.read_u64::<LittleEndian>()? as usize;
            let mut means = Vec::with_capacity(nk);
            let mut start = Vec::with_capacity(nk);
            let mut ptr = vec![0usize];
            let mut inside = Vec::with_capacity(nk);
            for _ in 0..nk {
                means.push(inp.read_f64::<LittleEndian>()?);
                start.push(inp.read_u32::<LittleEndian>()?);
                let len = inp.read_u64::<LittleEndian>()? as usize;
                ptr.push(ptr.last().copied().unwrap_or(0) + len);
                inside.push(inp.read_f64::<LittleEndian>()?);
            }
            if ptr.last().copied() != Some(nv) {
                return Err(AbstractionError::Format("kernel lengths disagree with payload".into()));
            }
            let values = (0..nv).map(|_| inp.read_f64::<LittleEndian>()).collect::<Result<Vec<_>, _>>()?;
            let stored = (0..nk).map(|k| values[ptr[k]..ptr[k + 1]].iter().sum()).collect();
            axes.push(AxisKernels { means, start, ptr, values, stored, inside, quantization });
        }
        let np = inp.read_u64::<LittleEndian>()? as usize;
        let pair_keys = (0..np).map(|_| inp.read_u32::<LittleEndian>()).collect::<Result<Vec<_>, _>>()?;
        let pairs: usize = counts.iter().product::<usize>() * num_inputs;
        if np != pairs * n || pair_keys.chunks(n).any(|ks| ks.iter().zip(&axes).any(|(&k, ax)| k as usize >= ax.num_keys())) {
            return Err(AbstractionError::Format("pair keys out of range".into()));
        }
        Ok(Self::finish(counts, num_inputs, axes, pair_keys))
    }
}

impl TransitionOracle for AbstractionTensor {
    fn num_states(&self) -> usize {
        AbstractionTensor::num_states(self)
    }

    fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    fn expect(&self, w: &[f64], out: &mut [f64]) {
        let n = self.counts.len();
        match n {
            1 => {
                let per_key: Vec<f64> = (0..self.axes[0].num_keys())
                    .into_par_iter()
                    .map(|k| {
                        let (st, vals) = self.axes[0].kernel(k);
                        vals.iter().zip(&w[st..st + vals.len()]).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                out.par_iter_mut().enumerate().for_each(|(p, o)| *o = per_key[self.pair_keys[p] as usize]);
            }
            2 => {
                let l0 = self.counts[0];
                let ax0 = &self.axes[0];
                let ax1 = &self.axes[1];
                let groups: Vec<Vec<f64>> = (0..ax0.num_keys())
                    .into_par_iter()
                    .map(|k0| {
                        let members = &self.group_pairs[self.group_ptr[k0]..self.group_ptr[k0 + 1]];
                        if members.is_empty() {
                            return Vec::new();
                        }
                        let (lo1, hi1) = members.iter().fold((usize::MAX, 0usize), |(lo, hi), &p| {
                            let (st, vals) = ax1.kernel(self.pair_keys[p as usize * 2 + 1] as usize);
                            (lo.min(st), hi.max(st + vals.len()))
                        });
                        let (st0, v0) = ax0.kernel(k0);
                        let mut t = vec![0.0; hi1.saturating_sub(lo1)];
                        for (i, j1) in (lo1..hi1).enumerate() {
                            let row = &w[j1 * l0 + st0..j1 * l0 + st0 + v0.len()];
                            t[i] = v0.iter().zip(row).map(|(a, b)| a * b).sum();
                        }
                        members
                            .iter()
                            .map(|&p| {
                                let (st1, v1) = ax1.kernel(self.pair_keys[p as usize * 2 + 1] as usize);
                                v1.iter().zip(&t[st1 - lo1..st1 - lo1 + v1.len()]).map(|(a, b)| a * b).sum()
                            })
                            .collect()
                    })
                    .collect();
                for (k0, vals) in groups.into_iter().enumerate() {
                    let members = &self.group_pairs[self.group_ptr[k0]..self.group_ptr[k0 + 1]];
                    for (&p, v) in members.iter().zip(vals) {
                        out[p as usize] = v;
                    }
                }
            }
            _ => {
                out.par_iter_mut().enumerate().for_each(|(p, o)| *o = self.expect_direct(w, p));
            }
        }
    }

    fn truncated_mass(&self, pair: usize) -> f64 {
        let inside: f64 = self.keys(pair).iter().zip(&self.axes).map(|(&k, ax)| ax.inside[k as usize]).product();
        (inside - self.row_mass(pair)).max(0.0)
    }
}

/// Explicit sparse rows, used as an oracle and for small hand-built models.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTransitions {
    pub num_states: usize,
    pub num_inputs: usize,
    /// `rows[s * num_inputs + u]` lists `(target, probability)`.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub truncated: Vec<f64>,
}

impl TransitionOracle for SparseTransitions {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    fn expect(&self, w: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(j, p)| p * w[j]).sum();
        }
    }

    fn truncated_mass(&self, pair: usize) -> f64 {
        self.truncated.get(pair).copied().unwrap_or(0.0)
    }
}

/// Per-axis noise standard deviation, requiring `B_w B_wᵀ` diagonal and equal
/// across modes.
pub fn axis_sigmas(model: &PlantModel) -> Result<Vec<f64>, AbstractionError> {
    let cov0 = {
        let bw = model.mode(0).bw;
        bw * bw.transpose()
    };
    let n = cov0.nrows();
    let scale = cov0.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    for i in 0..n {
        for j in 0..n {
            if i != j && cov0[(i, j)].abs() > 1e-12 * scale {
                return Err(AbstractionError::NonDiagonalNoise);
            }
        }
    }
    for m in 1..model.num_modes() {
        let bw = model.mode(m).bw;
        let c = bw * bw.transpose();
        if (&c - &cov0).norm() > 1e-12 * scale {
            return Err(AbstractionError::NonDiagonalNoise);
        }
    }
    Ok((0..n).map(|d| cov0[(d, d)].max(0.0).sqrt()).collect())
}

/// Mode index of every grid cell (cell center decides).
pub fn mode_map(model: &PlantModel, grid: &Grid) -> Vec<u32> {
    match model {
        PlantModel::Linear(_) => vec![0; grid.num_cells()],
        PlantModel::Pwa(_) => (0..grid.num_cells()).into_par_iter().map(|s| model.mode_of(&grid.center(s)) as u32).collect(),
    }
}

/// Builds the factored tensor. Entries below `tol` are dropped per axis.
pub fn build_transition_tensor(
    model: &PlantModel,
    grid: &Grid,
    inputs: &AbstractInputSet,
    modes: &[u32],
    tol: f64,
) -> Result<AbstractionTensor, AbstractionError> {
    let n = grid.dim();
    if model.state_dim() != n {
        return Err(AbstractionError::InvalidGrid(format!("grid dimension {n} vs state dimension {}", model.state_dim())));
    }
    let sigmas = axis_sigmas(model)?;
    let nu = inputs.inputs.len();
    let ns = grid.num_cells();
    // Per mode and input: B û + a.
    let drift: Vec<Vec<Vect>> = (0..model.num_modes())
        .map(|m| {
            let md = model.mode(m);
            inputs.inputs.iter().map(|u| md.b * Vect::from_column_slice(u) + md.offset).collect()
        })
        .collect();
    let mut axes = Vec::with_capacity(n);
    let mut pair_keys = vec![0u32; ns * nu * n];
    for d in 0..n {
        let w = grid.widths[d];
        let lo = grid.lower[d];
        let means: Vec<f64> = (0..ns)
            .into_par_iter()
            .flat_map_iter(|s| {
                let c = grid.center(s);
                let m = modes[s] as usize;
                let a = model.mode(m).a;
                let ac: f64 = (0..n).map(|k| a[(d, k)] * c[k]).sum();
                let drift = &drift[m];
                (0..nu).map(move |u| (ac + drift[u][d] - lo) / w - 0.5)
            })
            .collect();
        let sigma_cells = sigmas[d] / w;
        let mut bits: Vec<u64> = means.iter().map(|g| g.to_bits()).collect();
        bits.par_sort_unstable();
        bits.dedup();
        let exact_limit = 4 * grid.counts[d] * nu;
        let (keys_of_pairs, key_means, quant) = if bits.len() <= exact_limit {
            let index: HashMap<u64, u32> = bits.iter().enumerate().map(|(i, &b)| (b, i as u32)).collect();
            let k: Vec<u32> = means.iter().map(|g| index[&g.to_bits()]).collect();
            (k, bits.iter().map(|&b| f64::from_bits(b)).collect::<Vec<f64>>(), 0.0)
        } else {
            let q: Vec<i64> = means.par_iter().map(|g| (g * SUBCELL).round() as i64).collect();
            let qmin = q.iter().copied().min().unwrap_or(0);
            let qmax = q.iter().copied().max().unwrap_or(0);
            let mut dense = vec![u32::MAX; (qmax - qmin + 1) as usize];
            for &v in &q {
                dense[(v - qmin) as usize] = 0;
            }
            let mut key_means = Vec::new();
            for (i, slot) in dense.iter_mut().enumerate() {
                if *slot == 0 {
                    *slot = key_means.len() as u32;
                    key_means.push((i as i64 + qmin) as f64 / SUBCELL);
                }
            }
            let k: Vec<u32> = q.iter().map(|&v| dense[(v - qmin) as usize]).collect();
            (k, key_means, 0.5 / SUBCELL)
        };
        for (p, &k) in keys_of_pairs.iter().enumerate() {
            pair_keys[p * n + d] = k;
        }
        log::debug!("axis {d}: {} kernel keys (quantization {quant} cells)", key_means.len());
        axes.push(AxisKernels::build(key_means, sigma_cells, grid.counts[d], tol, quant));
    }
    Ok(AbstractionTensor::finish(grid.counts.clone(), nu, axes, pair_keys))
}

/// Distinct robust letter sets and the set index of each state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSets {
    pub sets: Vec<Vec<Letter>>,
    pub of_state: Vec<u32>,
}

impl LabelSets {
    pub fn letters(&self, s: usize) -> &[Letter] {
        &self.sets[self.of_state[s] as usize]
    }
}

/// Letters of all outputs within `radius` of `ŷ = C x̂`: an AP may be true if
/// some region carrying it is within `radius`, and may be false unless one of
/// its regions contains the whole ball.
pub fn robust_letters(y: &[f64], labeling: &LabeledPartition, radius: f64) -> Vec<Letter> {
    let na = labeling.num_aps;
    let mut can_true = vec![false; na];
    let mut can_false = vec![true; na];
    for (region, ap) in &labeling.regions {
        let sd = region.signed_distance(y).expect("output dimension checked");
        if sd <= radius + TOL_GEO {
            can_true[*ap] = true;
        }
        if -sd > radius + TOL_GEO {
            can_false[*ap] = false;
        }
    }
    let mut letters: Vec<Letter> = vec![0];
    for ap in 0..na {
        let mut next = Vec::with_capacity(letters.len() * 2);
        for &l in &letters {
            if can_false[ap] {
                next.push(l);
            }
            if can_true[ap] {
                next.push(l | (1 << ap));
            }
        }
        letters = next;
    }
    letters.sort_unstable();
    letters
}

pub fn label_sets(grid: &Grid, c: &Mat, labeling: &LabeledPartition, radius: f64) -> LabelSets {
    let per_state: Vec<Vec<Letter>> = (0..grid.num_cells())
        .into_par_iter()
        .map(|s| {
            let x = Vect::from_vec(grid.center(s));
            let y: Vec<f64> = (c * x).iter().copied().collect();
            robust_letters(&y, labeling, radius)
        })
        .collect();
    let mut index: HashMap<Vec<Letter>, u32> = HashMap::new();
    let mut sets = Vec::new();
    let of_state = per_state
        .into_iter()
        .map(|ls| {
            *index.entry(ls.clone()).or_insert_with(|| {
                sets.push(ls);
                (sets.len() - 1) as u32
            })
        })
        .collect();
    LabelSets { sets, of_state }
}

/// Grid, inputs, tensor, per-state modes and letter sets.
#[derive(Debug, Clone)]
pub struct AbstractModel {
    pub grid: Grid,
    pub inputs: AbstractInputSet,
    pub tensor: AbstractionTensor,
    pub modes: Vec<u32>,
    pub labels: Option<LabelSets>,
    pub tol: f64,
}

impl AbstractModel {
    pub fn build(
        model: &PlantModel,
        grid: Grid,
        inputs: AbstractInputSet,
        tol: f64,
    ) -> Result<Self, AbstractionError> {
        let modes = mode_map(model, &grid);
        let tensor = build_transition_tensor(model, &grid, &inputs, &modes, tol)?;
        Ok(Self { grid, inputs, tensor, modes, labels: None, tol })
    }

    /// Per-axis bound on `x⁺ − x̂⁺` from cell rounding and key quantization.
    pub fn quantization_half_widths(&self) -> Vec<f64> {
        (0..self.grid.dim())
            .map(|d| self.grid.widths[d] * (0.5 + self.tensor.axes[d].quantization))
            .collect()
    }
}
