//! Robust value iteration on the product of the abstraction and the DFA.

use serde::{Deserialize, Serialize};

use crate::abstraction::{Grid, LabelSets, TransitionOracle};
use crate::geometry::LabeledPartition;
use crate::linalg::{Mat, Vect};
use crate::speclang::Dfa;

pub const DEFAULT_THOLD: f64 = 1e-12;
pub const MAX_ITER: usize = 100_000;
/// Improvements below this do not change a recorded input.
const TIE_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthesisError {
    #[error("value iteration did not converge in {iterations} sweeps (last change {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BoundMode {
    /// Worst case over letters, `−δ`.
    #[default]
    Lower,
    /// Best case over letters, `+δ`, truncated mass counted as success.
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOptions {
    pub thold: f64,
    pub max_iter: usize,
    pub mode: BoundMode,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self { thold: DEFAULT_THOLD, max_iter: MAX_ITER, mode: BoundMode::Lower }
    }
}

/// `values[q][s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub values: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

impl ValueFunction {
    pub fn get(&self, s: usize, q: usize) -> f64 {
        self.values[q][s]
    }
}

/// `inputs[q][s]` is an abstract input index; `active[q]` is false for
/// accepting and dead DFA states, whose entries are placeholders.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Policy {
    pub inputs: Vec<Vec<u32>>,
    pub active: Vec<bool>,
}

impl Policy {
    pub fn input(&self, s: usize, q: usize) -> usize {
        self.inputs[q][s] as usize
    }
}

/// Distinct successor DFA states per `(q, letter set)`.
struct Successors {
    targets: Vec<Vec<Vec<usize>>>,
}

impl Successors {
    fn new(dfa: &Dfa, labels: &LabelSets) -> Self {
        let targets = (0..dfa.num_states)
            .map(|q| {
                labels
                    .sets
                    .iter()
                    .map(|set| {
                        let mut t: Vec<usize> = set.iter().map(|&l| dfa.step(q, l)).collect();
                        t.sort_unstable();
                        t.dedup();
                        t
                    })
                    .collect()
            })
            .collect();
        Self { targets }
    }
}

struct Problem<'a, O: TransitionOracle> {
    oracle: &'a O,
    dfa: &'a Dfa,
    labels: &'a LabelSets,
    delta: &'a [f64],
    succ: Successors,
    active: Vec<bool>,
    mode: BoundMode,
    truncated: Vec<f64>,
}

impl<'a, O: TransitionOracle> Problem<'a, O> {
    fn new(
        oracle: &'a O,
        dfa: &'a Dfa,
        labels: &'a LabelSets,
        delta: &'a [f64],
        mode: BoundMode,
    ) -> Result<Self, SynthesisError> {
        let ns = oracle.num_states();
        if labels.of_state.len() != ns || delta.len() != ns {
            return Err(SynthesisError::Mismatch(format!(
                "{ns} states, {} label entries, {} deviations",
                labels.of_state.len(),
                delta.len()
            )));
        }
        let max_letter = labels.sets.iter().flatten().copied().max().unwrap_or(0) as usize;
        if max_letter >= dfa.num_letters() {
            return Err(SynthesisError::Mismatch(format!("letter {max_letter} outside the DFA alphabet")));
        }
        let dead = dfa.dead_states();
        let active = (0..dfa.num_states).map(|q| !dfa.is_accepting(q) && !dead[q]).collect();
        let truncated = match mode {
            BoundMode::Lower => Vec::new(),
            BoundMode::Upper => {
                (0..ns * oracle.num_inputs()).map(|p| oracle.truncated_mass(p)).collect()
            }
        };
        Ok(Self { oracle, dfa, labels, delta, succ: Successors::new(dfa, labels), active, mode, truncated })
    }

    fn initial(&self) -> Vec<Vec<f64>> {
        let ns = self.oracle.num_states();
        (0..self.dfa.num_states).map(|q| vec![if self.dfa.is_accepting(q) { 1.0 } else { 0.0 }; ns]).collect()
    }

    /// Continuation values `W_q[j]` seen from DFA state `q`.
    fn continuation(&self, v: &[Vec<f64>], q: usize, w: &mut [f64]) {
        let targets = &self.succ.targets[q];
        for (j, wj) in w.iter_mut().enumerate() {
            let set = self.labels.of_state[j] as usize;
            let val = |t: usize| if self.dfa.is_accepting(t) { 1.0 } else { v[t][j] };
            let ts = &targets[set];
            *wj = match self.mode {
                BoundMode::Lower => ts.iter().map(|&t| val(t)).fold(f64::INFINITY, f64::min),
                BoundMode::Upper => ts.iter().map(|&t| val(t)).fold(f64::NEG_INFINITY, f64::max),
            };
        }
    }

    /// One sweep: new values and argmax inputs for every DFA state. A
    /// previous choice is kept unless another input is strictly better, so
    /// ties at the fixed point cannot select inputs that never make progress.
    fn step(&self, v: &[Vec<f64>], prev: Option<&[Vec<u32>]>) -> (Vec<Vec<f64>>, Vec<Vec<u32>>) {
        let ns = self.oracle.num_states();
        let nu = self.oracle.num_inputs();
        let mut w = vec![0.0; ns];
        let mut e = vec![0.0; ns * nu];
        let mut out = Vec::with_capacity(self.dfa.num_states);
        let mut arg = Vec::with_capacity(self.dfa.num_states);
        for q in 0..self.dfa.num_states {
            if !self.active[q] {
                out.push(v[q].clone());
                arg.push(vec![0u32; ns]);
                continue;
            }
            self.continuation(v, q, &mut w);
            self.oracle.expect(&w, &mut e);
            if self.mode == BoundMode::Upper {
                for (ei, t) in e.iter_mut().zip(&self.truncated) {
                    *ei += t;
                }
            }
            let mut vq = vec![0.0; ns];
            let mut aq = vec![0u32; ns];
            for s in 0..ns {
                let row = &e[s * nu..(s + 1) * nu];
                let mut best = 0;
                for u in 1..nu {
                    if row[u] > row[best] {
                        best = u;
                    }
                }
                if let Some(p) = prev {
                    let kept = p[q][s] as usize;
                    if row[kept] >= row[best] - TIE_TOL {
                        best = kept;
                    }
                }
                let shifted = match self.mode {
                    BoundMode::Lower => row[best] - self.delta[s],
                    BoundMode::Upper => row[best] + self.delta[s],
                };
                vq[s] = shifted.clamp(0.0, 1.0);
                aq[s] = best as u32;
            }
            out.push(vq);
            arg.push(aq);
        }
        (out, arg)
    }
}

/// One application of the robust operator; exposed for testing.
pub fn robust_bellman_step<O: TransitionOracle>(
    v: &ValueFunction,
    oracle: &O,
    dfa: &Dfa,
    labels: &LabelSets,
    delta: &[f64],
    mode: BoundMode,
) -> Result<(ValueFunction, Vec<Vec<u32>>), SynthesisError> {
    let p = Problem::new(oracle, dfa, labels, delta, mode)?;
    let (values, arg) = p.step(&v.values, None);
    Ok((ValueFunction { values, iterations: v.iterations + 1, converged: false }, arg))
}

/// `V₀ = 1_{Q_f}`.
pub fn initial_value(num_states: usize, dfa: &Dfa) -> ValueFunction {
    let values =
        (0..dfa.num_states).map(|q| vec![if dfa.is_accepting(q) { 1.0 } else { 0.0 }; num_states]).collect();
    ValueFunction { values, iterations: 0, converged: false }
}

/// Iterates the robust operator from `1_{Q_f}` until the sup-norm change is
/// below `thold`. `delta[s]` is the per-step deviation at abstract state `s`.
pub fn value_iteration<O: TransitionOracle>(
    oracle: &O,
    dfa: &Dfa,
    labels: &LabelSets,
    delta: &[f64],
    opts: &SynthesisOptions,
) -> Result<(ValueFunction, Policy), SynthesisError> {
    let p = Problem::new(oracle, dfa, labels, delta, opts.mode)?;
    let mut v = p.initial();
    let mut residual = f64::INFINITY;
    let mut arg: Option<Vec<Vec<u32>>> = None;
    for it in 1..=opts.max_iter {
        let (next, a) = p.step(&v, arg.as_deref());
        arg = Some(a);
        residual = next
            .iter()
            .zip(&v)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        v = next;
        if it % 100 == 0 {
            log::debug!("sweep {it}: change {residual:.3e}");
        }
        if residual < opts.thold {
            let policy = extract_policy(arg.unwrap_or_default(), &p.active);
            return Ok((ValueFunction { values: v, iterations: it, converged: true }, policy));
        }
    }
    Err(SynthesisError::NonConvergence { iterations: opts.max_iter, residual })
}

/// Wraps the argmax record of the final sweep.
pub fn extract_policy(argmax: Vec<Vec<u32>>, active: &[bool]) -> Policy {
    Policy { inputs: argmax, active: active.to_vec() }
}

/// DFA state after reading the label of `y₀`.
pub fn initial_dfa_state(dfa: &Dfa, labeling: &LabeledPartition, y0: &[f64]) -> usize {
    dfa.step(dfa.initial, labeling.label(y0))
}

/// Value at a concrete initial state: `V(Π(x₀), τ(q₀, L(C x₀)))`, zero outside
/// the grid.
pub fn value_at(v: &ValueFunction, grid: &Grid, dfa: &Dfa, labeling: &LabeledPartition, c: &Mat, x0: &[f64]) -> f64 {
    let y: Vec<f64> = (c * Vect::from_column_slice(x0)).iter().copied().collect();
    let q = initial_dfa_state(dfa, labeling, &y);
    if dfa.is_accepting(q) {
        return 1.0;
    }
    grid.index_of(x0).map_or(0.0, |s| v.get(s, q))
}

/// Initial-state values per cell, read at `τ(q₀, L(C x̂))`.
pub fn initial_state_values(v: &ValueFunction, grid: &Grid, dfa: &Dfa, labeling: &LabeledPartition, c: &Mat) -> Vec<f64> {
    (0..grid.num_cells())
        .map(|s| {
            let x = Vect::from_vec(grid.center(s));
            let y: Vec<f64> = (c * x).iter().copied().collect();
            let q = initial_dfa_state(dfa, labeling, &y);
            if dfa.is_accepting(q) {
                1.0
            } else {
                v.get(s, q)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::SparseTransitions;
    use crate::speclang::{parse_scltl, translate_spec};
    use proptest::prelude::*;

    /// DFA for `F p1` over one AP.
    fn reach_dfa() -> Dfa {
        translate_spec(&parse_scltl("F p1", &["p1"]).unwrap())
    }

    fn labels_of(letters: &[u32]) -> LabelSets {
        let mut sets: Vec<Vec<u32>> = Vec::new();
        let of_state = letters
            .iter()
            .map(|&l| {
                let v = vec![l];
                match sets.iter().position(|s| *s == v) {
                    Some(i) => i as u32,
                    None => {
                        sets.push(v);
                        (sets.len() - 1) as u32
                    }
                }
            })
            .collect();
        LabelSets { sets, of_state }
    }

    fn chain() -> SparseTransitions {
        // s0 --(0.7)--> s1 (labelled p1), else stays; s1 absorbing.
        SparseTransitions {
            num_states: 2,
            num_inputs: 1,
            rows: vec![vec![(1, 0.7), (0, 0.3)], vec![(1, 1.0)]],
            truncated: vec![0.0; 2],
        }
    }

    fn q_after_start(dfa: &Dfa) -> usize {
        dfa.step(dfa.initial, 0)
    }

    #[test]
    fn hand_chain_one_step() {
        let dfa = reach_dfa();
        let labels = labels_of(&[0, 1]);
        let v0 = initial_value(2, &dfa);
        let (v1, _) = robust_bellman_step(&v0, &chain(), &dfa, &labels, &[0.05, 0.05], BoundMode::Lower).unwrap();
        let q = q_after_start(&dfa);
        assert!((v1.get(0, q) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn accepting_dfa_gives_one() {
        let dfa = translate_spec(&parse_scltl("true", &[]).unwrap());
        let labels = labels_of(&[0, 0]);
        let (v, _) = value_iteration(&chain(), &dfa, &labels, &[0.0, 0.0], &SynthesisOptions::default()).unwrap();
        for q in 0..dfa.num_states {
            if dfa.is_accepting(q) {
                assert!(v.values[q].iter().all(|&x| x == 1.0));
            }
        }
    }

    #[test]
    fn large_delta_zeroes_values() {
        let dfa = reach_dfa();
        let labels = labels_of(&[0, 1]);
        let (v, _) = value_iteration(&chain(), &dfa, &labels, &[1.0, 1.0], &SynthesisOptions::default()).unwrap();
        for q in 0..dfa.num_states {
            if !dfa.is_accepting(q) {
                assert!(v.values[q].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn dominant_input_is_chosen() {
        let t = SparseTransitions {
            num_states: 3,
            num_inputs: 2,
            rows: vec![
                vec![(0, 1.0)],
                vec![(1, 0.5), (2, 0.5)],
                vec![(1, 1.0)],
                vec![(2, 1.0)],
                vec![(2, 1.0)],
                vec![(2, 1.0)],
            ],
            truncated: vec![0.0; 6],
        };
        let dfa = reach_dfa();
        let labels = labels_of(&[0, 0, 1]);
        let (v, pol) = value_iteration(&t, &dfa, &labels, &[0.0; 3], &SynthesisOptions::default()).unwrap();
        let q = q_after_start(&dfa);
        assert_eq!(pol.input(0, q), 1);
        assert_eq!(pol.input(1, q), 1);
        assert!((v.get(0, q) - 1.0).abs() < 1e-9);
        assert!(pol.active[q]);
        assert!(dfa.accepting.iter().all(|&a| !pol.active[a]));
    }

    #[test]
    fn trap_state_is_zero() {
        let dfa = translate_spec(&parse_scltl("!p2 U p1", &["p1", "p2"]).unwrap());
        let trap = dfa.sink_trap.unwrap();
        let t = chain();
        let labels = labels_of(&[0, 1]);
        let (v, _) = value_iteration(&t, &dfa, &labels, &[0.0; 2], &SynthesisOptions::default()).unwrap();
        assert!(v.values[trap].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ties_go_to_lowest_input() {
        let t = SparseTransitions {
            num_states: 2,
            num_inputs: 3,
            rows: vec![vec![(1, 0.5)], vec![(1, 0.5)], vec![(1, 0.5)], vec![(1, 1.0)], vec![(1, 1.0)], vec![(1, 1.0)]],
            truncated: vec![0.0; 6],
        };
        let dfa = reach_dfa();
        let labels = labels_of(&[0, 1]);
        let (_, pol) = value_iteration(&t, &dfa, &labels, &[0.0; 2], &SynthesisOptions::default()).unwrap();
        assert_eq!(pol.input(0, q_after_start(&dfa)), 0);
    }

    /// Independent dense dynamic program on the explicit product.
    fn brute_force(
        p: &[Vec<Vec<f64>>],
        letters: &[Vec<u32>],
        dfa: &Dfa,
        delta: &[f64],
        upper: bool,
        thold: f64,
    ) -> Vec<Vec<f64>> {
        let ns = p.len();
        let nq = dfa.num_states;
        let mut v = vec![vec![0.0; ns]; nq];
        for q in 0..nq {
            if dfa.is_accepting(q) {
                v[q] = vec![1.0; ns];
            }
        }
        let dead = dfa.dead_states();
        loop {
            let mut next = v.clone();
            let mut diff: f64 = 0.0;
            for q in 0..nq {
                if dfa.is_accepting(q) || dead[q] {
                    continue;
                }
                for s in 0..ns {
                    let mut best = f64::NEG_INFINITY;
                    for row in &p[s] {
                        let mut e = 0.0;
                        for j in 0..ns {
                            let vals = letters[j].iter().map(|&l| {
                                let t = dfa.step(q, l);
                                if dfa.is_accepting(t) { 1.0 } else { v[t][j] }
                            });
                            let w = if upper {
                                vals.fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                vals.fold(f64::INFINITY, f64::min)
                            };
                            e += row[j] * w;
                        }
                        best = best.max(e);
                    }
                    let val = if upper { best + delta[s] } else { best - delta[s] };
                    next[q][s] = val.clamp(0.0, 1.0);
                    diff = diff.max((next[q][s] - v[q][s]).abs());
                }
            }
            v = next;
            if diff < thold {
                return v;
            }
        }
    }

    fn random_instance() -> impl Strategy<Value = (Vec<Vec<Vec<f64>>>, Vec<Vec<u32>>, Vec<f64>, usize)> {
        (2usize..12, 1usize..4, 0usize..3).prop_flat_map(|(ns, nu, f)| {
            (
                proptest::collection::vec(proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, ns), nu), ns),
                proptest::collection::vec(proptest::collection::btree_set(0u32..4, 1..3), ns),
                proptest::collection::vec(0.0f64..0.1, ns),
                Just(f),
            )
                .prop_map(|(raw, sets, delta, f)| {
                    let p = raw
                        .into_iter()
                        .map(|rows| {
                            rows.into_iter()
                                .map(|r| {
                                    let s: f64 = r.iter().sum::<f64>() * 1.1 + 1e-9;
                                    r.into_iter().map(|x| x / s).collect()
                                })
                                .collect()
                        })
                        .collect();
                    let letters = sets.into_iter().map(|s| s.into_iter().collect()).collect();
                    (p, letters, delta, f)
                })
        })
    }

    fn formula(i: usize) -> Dfa {
        let text = ["!p2 U p1", "F (p1 & X p2)", "F p1 & F p2"][i];
        translate_spec(&parse_scltl(text, &["p1", "p2"]).unwrap())
    }

    fn oracle_of(p: &[Vec<Vec<f64>>]) -> SparseTransitions {
        let ns = p.len();
        let nu = p[0].len();
        SparseTransitions {
            num_states: ns,
            num_inputs: nu,
            rows: p.iter().flat_map(|rows| rows.iter().map(|r| r.iter().copied().enumerate().collect::<Vec<_>>())).collect(),
            truncated: vec![0.0; ns * nu],
        }
    }

    fn labels_from(letters: &[Vec<u32>]) -> LabelSets {
        let mut sets: Vec<Vec<u32>> = Vec::new();
        let of_state = letters
            .iter()
            .map(|l| match sets.iter().position(|s| s == l) {
                Some(i) => i as u32,
                None => {
                    sets.push(l.clone());
                    (sets.len() - 1) as u32
                }
            })
            .collect();
        LabelSets { sets, of_state }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_dense_dynamic_program((p, letters, delta, f) in random_instance(), upper in any::<bool>()) {
            let dfa = formula(f);
            prop_assume!(dfa.num_states <= 4);
            let opts = SynthesisOptions {
                thold: 1e-13,
                max_iter: MAX_ITER,
                mode: if upper { BoundMode::Upper } else { BoundMode::Lower },
            };
            let (v, _) = value_iteration(&oracle_of(&p), &dfa, &labels_from(&letters), &delta, &opts).unwrap();
            let expect = brute_force(&p, &letters, &dfa, &delta, upper, 1e-13);
            for q in 0..dfa.num_states {
                for s in 0..p.len() {
                    prop_assert!((v.values[q][s] - expect[q][s]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn sweeps_are_monotone_and_bounded((p, letters, delta, f) in random_instance()) {
            let dfa = formula(f);
            let oracle = oracle_of(&p);
            let labels = labels_from(&letters);
            let mut v = initial_value(p.len(), &dfa);
            for _ in 0..30 {
                let (next, _) = robust_bellman_step(&v, &oracle, &dfa, &labels, &delta, BoundMode::Lower).unwrap();
                for q in 0..dfa.num_states {
                    for s in 0..p.len() {
                        prop_assert!(next.values[q][s] >= v.values[q][s]);
                        prop_assert!((0.0..=1.0).contains(&next.values[q][s]));
                    }
                }
                v = next;
            }
        }

        #[test]
        fn robustness_only_lowers_values((p, letters, delta, f) in random_instance(), bump in 0.0f64..0.1) {
            let dfa = formula(f);
            let oracle = oracle_of(&p);
            let opts = SynthesisOptions { thold: 1e-12, ..Default::default() };
            let (base, _) = value_iteration(&oracle, &dfa, &labels_from(&letters), &delta, &opts).unwrap();
            let more_delta: Vec<f64> = delta.iter().map(|d| d + bump).collect();
            let (lower, _) = value_iteration(&oracle, &dfa, &labels_from(&letters), &more_delta, &opts).unwrap();
            let wider: Vec<Vec<u32>> = letters.iter().map(|l| { let mut l = l.clone(); if !l.contains(&0) { l.insert(0, 0); } l }).collect();
            let (coarse, _) = value_iteration(&oracle, &dfa, &labels_from(&wider), &delta, &opts).unwrap();
            let up = SynthesisOptions { mode: BoundMode::Upper, ..opts };
            let (upper, _) = value_iteration(&oracle, &dfa, &labels_from(&letters), &delta, &up).unwrap();
            for q in 0..dfa.num_states {
                for s in 0..p.len() {
                    prop_assert!(lower.values[q][s] <= base.values[q][s] + 1e-10);
                    prop_assert!(coarse.values[q][s] <= base.values[q][s] + 1e-10);
                    prop_assert!(base.values[q][s] <= upper.values[q][s] + 1e-10);
                }
            }
        }
    }
}
