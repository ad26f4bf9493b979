//! Control refinement and closed-loop Monte Carlo deployment.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{AbstractInputSet, Grid, InterfaceKind};
use crate::geometry::{LabeledPartition, Polytope};
use crate::linalg::{weighted_norm, Mat, Vect};
use crate::models::{LinearModel, NonlinearModel, ShiftRecord};
use crate::similarity::{maximal_coupling, SimulationRelation};
use crate::speclang::{Dfa, Letter};
use crate::synthesis::Policy;

/// Window, in cells per axis, searched when repairing a relation breach.
const REPAIR_RADIUS: usize = 3;
/// Two-sided 95% normal quantile for Wilson intervals.
pub const WILSON_Z: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("feedback term needs {needed:.4} on input {input} but only {available:.4} is reserved")]
    BudgetViolation { input: usize, needed: f64, available: f64 },
    #[error("inconsistent controller data: {0}")]
    Mismatch(String),
}

/// Reduced-order dynamics tracked by the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedDynamics {
    pub a: Mat,
    pub b: Mat,
    pub bw: Mat,
    pub offset: Vect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub dfa: Dfa,
    pub grid: Grid,
    pub inputs: AbstractInputSet,
    /// Tables below are stored as packed payloads in the controller bundle.
    #[serde(skip)]
    pub policy: Policy,
    #[serde(skip)]
    pub modes: Vec<u32>,
    pub relation: SimulationRelation,
    /// Output map and labels of the controlled system, in DFA letter order.
    pub c: Mat,
    pub labeling: LabeledPartition,
    pub u_space: Polytope,
    pub reduced: Option<ReducedDynamics>,
    pub shift: Option<ShiftRecord>,
    /// Initial-state satisfaction per cell, for reporting.
    #[serde(skip)]
    pub initial_values: Vec<f64>,
}

/// Mutable state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub q: usize,
    pub x_r: Option<Vect>,
    pub breach: bool,
    pub clamped: usize,
}

/// What one controller step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub u: Vect,
    /// Input applied to the reduced model (equals `u` without reduction).
    pub u_r: Vect,
    pub cell: usize,
    pub breach: bool,
    pub clamped: bool,
}

/// Packages the synthesis results and checks the feedback budget.
pub fn refine_controller(
    initial_values: Vec<f64>,
    policy: Policy,
    grid: Grid,
    inputs: AbstractInputSet,
    modes: Vec<u32>,
    relation: SimulationRelation,
    dfa: Dfa,
    system: (&Mat, &LabeledPartition, &Polytope),
    reduced: Option<ReducedDynamics>,
    shift: Option<ShiftRecord>,
) -> Result<Controller, RuntimeError> {
    let (c, labeling, u_space) = system;
    if modes.len() != grid.num_cells() || policy.inputs.len() != dfa.num_states {
        return Err(RuntimeError::Mismatch("policy, modes and grid disagree".into()));
    }
    if relation.interface.kind == InterfaceKind::Feedback {
        let dis = crate::linalg::inv_sqrtm_pd(&relation.d)
            .ok_or_else(|| RuntimeError::Mismatch("weighting is not positive definite".into()))?;
        for k in &relation.interface.gains {
            let kd = k * &dis;
            for j in 0..kd.nrows() {
                let needed = kd.row(j).norm() * relation.epsilon;
                let available = inputs.feedback_half_width[j];
                if needed > available * (1.0 + 1e-9) + 1e-12 {
                    return Err(RuntimeError::BudgetViolation { input: j, needed, available });
                }
            }
        }
    }
    Ok(Controller {
        dfa,
        grid,
        inputs,
        policy,
        modes,
        relation,
        c: c.clone(),
        labeling: labeling.clone(),
        u_space: u_space.clone(),
        reduced,
        shift,
        initial_values,
    })
}

impl Controller {
    pub fn label(&self, x: &[f64]) -> Letter {
        let y = &self.c * Vect::from_column_slice(x);
        self.labeling.label(y.as_slice())
    }

    /// Fresh state for a run starting at `x0`: `q = τ(q₀, L(C x₀))` and, with
    /// reduction, `x_r = (PᵀD_rP)⁻¹PᵀD_r x₀`.
    /// The state starts in breach when `x₀` is not related to its projection.
    pub fn reset(&self, x0: &[f64]) -> ControllerState {
        let q = self.dfa.step(self.dfa.initial, self.label(x0));
        let mut breach = false;
        let x_r = self.relation.mor.as_ref().map(|link| {
            let x = Vect::from_column_slice(x0);
            let xr = crate::mor::project_initial(&link.p, &link.d, &x).unwrap_or_else(|| Vect::zeros(link.p.ncols()));
            let e = &x - &link.p * &xr;
            breach = weighted_norm(e.as_slice(), &link.d) > link.epsilon * (1.0 + 1e-12);
            xr
        });
        ControllerState { q, x_r, breach, clamped: 0 }
    }

    /// Abstract cell related to `z`: `Π(z)` when it is a member, else the
    /// nearest member in the `D`-norm within a small window.
    fn track(&self, z: &[f64]) -> (usize, bool) {
        let s = self.grid.clamp_index(z);
        let center = self.grid.center(s);
        if self.grid.index_of(z).is_some() && self.relation.contains(&center, z) {
            return (s, false);
        }
        let k = self.grid.multi_index(s);
        let n = self.grid.dim();
        let mut best = (s, f64::INFINITY);
        let span = 2 * REPAIR_RADIUS + 1;
        for off in 0..span.pow(n as u32) {
            let mut idx = Vec::with_capacity(n);
            let mut o = off;
            let mut ok = true;
            for d in 0..n {
                let delta = (o % span) as isize - REPAIR_RADIUS as isize;
                o /= span;
                let v = k[d] as isize + delta;
                if v < 0 || v >= self.grid.counts[d] as isize {
                    ok = false;
                    break;
                }
                idx.push(v as usize);
            }
            if !ok {
                continue;
            }
            let cell = self.grid.flat_index(&idx);
            let c = self.grid.center(cell);
            let e: Vec<f64> = z.iter().zip(&c).map(|(a, b)| a - b).collect();
            let dist = weighted_norm(&e, &self.relation.d);
            if dist < best.1 {
                best = (cell, dist);
            }
        }
        (best.0, best.1 > self.relation.epsilon * (1.0 + 1e-12))
    }

    /// Input for measured state `x`. Sets `state.breach` if no abstract state
    /// is related to the (reduced) state.
    pub fn step(&self, state: &mut ControllerState, x: &[f64]) -> StepOutput {
        let z: Vec<f64> = match &state.x_r {
            Some(xr) => xr.iter().copied().collect(),
            None => x.to_vec(),
        };
        let (cell, breach) = self.track(&z);
        if breach {
            state.breach = true;
            log::debug!("relation breach at {z:?}");
        }
        let x_hat = Vect::from_vec(self.grid.center(cell));
        let u_hat = Vect::from_column_slice(&self.inputs.inputs[self.policy.input(cell, state.q)]);
        let zv = Vect::from_vec(z);
        let mode = self.modes[cell] as usize;
        let u_r = match self.relation.interface.gain(mode) {
            Some(k) => &u_hat + k * (&zv - &x_hat),
            None => u_hat,
        };
        let mut u = match (&self.relation.mor, &state.x_r) {
            (Some(link), Some(xr)) => {
                let e = Vect::from_column_slice(x) - &link.p * xr;
                &u_r + &link.q * xr + &link.k_mor * e
            }
            _ => u_r.clone(),
        };
        let (lo, hi) = self.u_space.box_bounds().expect("input space is a box");
        let mut clamped = false;
        for j in 0..u.len() {
            let v = u[j].clamp(lo[j], hi[j]);
            if (v - u[j]).abs() > 1e-9 {
                clamped = true;
            }
            u[j] = v;
        }
        if clamped {
            state.clamped += 1;
        }
        StepOutput { u, u_r, cell, breach, clamped }
    }

    /// Advances the DFA on the label of `x⁺`.
    pub fn observe(&self, state: &mut ControllerState, x_next: &[f64]) -> Letter {
        let l = self.label(x_next);
        state.q = self.dfa.step(state.q, l);
        l
    }

    /// Propagates the reduced state with `w_r` maximally coupled to `w`.
    pub fn advance_reduced<R: rand::Rng + ?Sized>(
        &self,
        state: &mut ControllerState,
        x: &[f64],
        u_r: &Vect,
        w: &Vect,
        rng: &mut R,
    ) {
        let (Some(link), Some(red), Some(xr)) = (&self.relation.mor, &self.reduced, &state.x_r) else { return };
        let e = Vect::from_column_slice(x) - &link.p * xr;
        let gamma = &link.kernel * e;
        let (w_r, _) = maximal_coupling(rng, w, &gamma);
        state.x_r = Some(&red.a * xr + &red.b * u_r + &red.bw * w_r + &red.offset);
    }

    pub fn is_accepting(&self, state: &ControllerState) -> bool {
        self.dfa.is_accepting(state.q)
    }

    /// Reported robust value at `x₀`.
    pub fn value_at(&self, x0: &[f64]) -> f64 {
        let q = self.dfa.step(self.dfa.initial, self.label(x0));
        if self.dfa.is_accepting(q) {
            return 1.0;
        }
        let st = self.reset(x0);
        if st.breach {
            return 0.0;
        }
        let z: Vec<f64> = match st.x_r {
            Some(xr) => xr.iter().copied().collect(),
            None => x0.to_vec(),
        };
        match self.grid.index_of(&z) {
            Some(s) if self.policy.active[q] || !self.dfa.dead_states()[q] => {
                self.initial_values.get(s).copied().unwrap_or(0.0)
            }
            _ => 0.0,
        }
    }
}

/// System the controller is deployed on, in the controller's coordinates.
#[derive(Debug, Clone)]
pub enum Plant {
    Linear(LinearModel),
    Nonlinear(NonlinearModel),
}

impl Plant {
    fn next(&self, x: &Vect, u: &Vect, w: &Vect) -> Vect {
        match self {
            Plant::Linear(m) => &m.a * x + &m.b * u + &m.offset + &m.bw * w,
            Plant::Nonlinear(m) => {
                Vect::from_vec(m.dynamics.eval(x.as_slice(), u.as_slice())) + &m.bw * w
            }
        }
    }

    fn noise_dim(&self) -> usize {
        match self {
            Plant::Linear(m) => m.bw.ncols(),
            Plant::Nonlinear(m) => m.bw.ncols(),
        }
    }

    fn x_space(&self) -> &Polytope {
        match self {
            Plant::Linear(m) => &m.x_space,
            Plant::Nonlinear(m) => &m.x_space,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub run: usize,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub q: Vec<usize>,
    pub letters: Vec<Letter>,
    pub satisfied: bool,
    pub breach: bool,
    pub left_domain: bool,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub runs: usize,
    pub successes: usize,
    pub breaches: usize,
    pub input_violations: usize,
    pub satisfaction: f64,
    pub wilson: (f64, f64),
    pub trajectories: Vec<Trajectory>,
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// One rollout of at most `horizon` steps. A run satisfies when the DFA is
/// accepting at some `t ≤ horizon`; leaving `X` ends it unsatisfied.
pub fn rollout(c: &Controller, plant: &Plant, x0: &[f64], horizon: usize, run: usize, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    let mut st = c.reset(x0);
    let mut x = Vect::from_column_slice(x0);
    let q_dim = plant.noise_dim();
    let mut tr = Trajectory {
        run,
        states: vec![x0.to_vec()],
        inputs: Vec::new(),
        q: vec![st.q],
        letters: vec![c.label(x0)],
        satisfied: c.is_accepting(&st),
        breach: false,
        left_domain: false,
        clamped: 0,
    };
    for _ in 0..horizon {
        if tr.satisfied {
            break;
        }
        let out = c.step(&mut st, x.as_slice());
        let w = Vect::from_fn(q_dim, |_, _| StandardNormal.sample(&mut rng));
        let x_next = plant.next(&x, &out.u, &w);
        c.advance_reduced(&mut st, x.as_slice(), &out.u_r, &w, &mut rng);
        x = x_next;
        let l = c.observe(&mut st, x.as_slice());
        tr.inputs.push(out.u.iter().copied().collect());
        tr.states.push(x.iter().copied().collect());
        tr.q.push(st.q);
        tr.letters.push(l);
        if c.is_accepting(&st) {
            tr.satisfied = true;
        } else if plant.x_space().max_violation(x.as_slice()) > 1e-9 {
            tr.left_domain = true;
            break;
        }
    }
    tr.breach = st.breach;
    tr.clamped = st.clamped;
    tr
}

/// Independent closed-loop runs; run `i` uses the ChaCha stream `i` of `seed`.
/// Runs with a relation breach count as failures.
pub fn simulate(
    c: &Controller,
    plant: &Plant,
    x0: &[f64],
    horizon: usize,
    runs: usize,
    seed: u64,
    keep_trajectories: bool,
) -> SimulationResult {
    let trs: Vec<Trajectory> = (0..runs).into_par_iter().map(|r| rollout(c, plant, x0, horizon, r, seed)).collect();
    let successes = trs.iter().filter(|t| t.satisfied && !t.breach).count();
    let breaches = trs.iter().filter(|t| t.breach).count();
    let input_violations = trs.iter().map(|t| t.clamped).sum();
    SimulationResult {
        runs,
        successes,
        breaches,
        input_violations,
        satisfaction: if runs == 0 { 0.0 } else { successes as f64 / runs as f64 },
        wilson: wilson_interval(successes, runs, WILSON_Z),
        trajectories: if keep_trajectories { trs } else { Vec::new() },
    }
}

/// Trajectory CSV `run,t,x…,u…,q,letter`, in absolute coordinates when a
/// steady-state shift is given. The last row of each run has empty inputs.
pub fn write_trajectories_csv<W: Write>(
    mut out: W,
    trajectories: &[Trajectory],
    shift: Option<&ShiftRecord>,
) -> std::io::Result<()> {
    let n = trajectories.first().and_then(|t| t.states.first()).map_or(0, Vec::len);
    let m = trajectories.iter().find_map(|t| t.inputs.first()).map_or(0, Vec::len);
    let mut header = vec!["run".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.push("q".into());
    header.push("letter".into());
    writeln!(out, "{}", header.join(","))?;
    for tr in trajectories {
        for (t, x) in tr.states.iter().enumerate() {
            let mut row = vec![tr.run.to_string(), t.to_string()];
            row.extend(x.iter().enumerate().map(|(i, v)| (v + shift.map_or(0.0, |s| s.x_ss[i])).to_string()));
            match tr.inputs.get(t) {
                Some(u) => row.extend(u.iter().enumerate().map(|(i, v)| (v + shift.map_or(0.0, |s| s.u_ss[i])).to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            row.push(tr.q[t].to_string());
            row.push(tr.letters[t].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{grid_input_space, label_sets, AbstractModel};
    use crate::models::PlantModel;
    use crate::similarity::{finite_relation, default_probes};
    use crate::speclang::{parse_scltl, translate_spec};
    use crate::synthesis::{initial_state_values, value_iteration, SynthesisOptions};

    fn park(bw: f64, l: usize) -> (LinearModel, Controller) {
        let x = Polytope::from_box(&[-10.0, -10.0], &[10.0, 10.0]).unwrap();
        let u = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let lab = LabeledPartition::new(
            vec![
                (Polytope::from_box(&[4.0, -4.0], &[10.0, 0.0]).unwrap(), 0),
                (Polytope::from_box(&[4.0, 0.0], &[10.0, 4.0]).unwrap(), 1),
            ],
            x.clone(),
            2,
        )
        .unwrap();
        let m = LinearModel::new(
            Mat::identity(2, 2) * 0.9,
            Mat::identity(2, 2) * 0.7,
            Mat::identity(2, 2),
            Mat::identity(2, 2) * bw,
            x,
            u,
            lab.clone(),
            vec!["p1".into(), "p2".into()],
        )
        .unwrap();
        let plant = PlantModel::Linear(m.clone());
        let grid = Grid::over(&m.x_space, &[l, l]).unwrap();
        let inputs = grid_input_space(&[3, 3], &m.u_space, InterfaceKind::Default, 1.0, 0.0).unwrap();
        let abs = AbstractModel::build(&plant, grid.clone(), inputs.clone(), 1e-6).unwrap();
        let eps = if bw == 0.0 { 4.0 } else { 1.005 };
        let rel = finite_relation(&plant, &abs, eps, InterfaceKind::Default, &default_probes(&plant)).unwrap();
        let labels = label_sets(&grid, &m.c, &lab, rel.output_radius);
        let dfa = translate_spec(&parse_scltl("!p2 U p1", &["p1", "p2"]).unwrap());
        let delta = rel.state_deltas(&abs.modes);
        let opts = SynthesisOptions { thold: 1e-6, ..Default::default() };
        let (v, pol) = value_iteration(&abs.tensor, &dfa, &labels, &delta, &opts).unwrap();
        let init = initial_state_values(&v, &grid, &dfa, &lab, &m.c);
        let c = refine_controller(
            init,
            pol,
            grid,
            inputs,
            abs.modes.clone(),
            rel,
            dfa,
            (&m.c, &lab, &m.u_space),
            None,
            None,
        )
        .unwrap();
        (m, c)
    }

    #[test]
    fn default_interface_emits_policy_input() {
        let (_, c) = park(1.0, 40);
        let x = c.grid.center(123);
        let mut st = c.reset(&x);
        let out = c.step(&mut st, &x);
        let expect = &c.inputs.inputs[c.policy.input(123, st.q)];
        assert_eq!(out.u.as_slice(), expect.as_slice());
        assert_eq!(out.cell, 123);
        assert!(!out.breach && !out.clamped);
    }

    #[test]
    fn far_state_is_a_breach() {
        let (_, c) = park(1.0, 40);
        let mut st = c.reset(&[0.0, 0.0]);
        c.step(&mut st, &[25.0, 0.0]);
        assert!(st.breach);
    }

    #[test]
    fn wilson_matches_closed_form() {
        let (lo, hi) = wilson_interval(50, 100, WILSON_Z);
        assert!((lo - 0.403_831).abs() < 1e-5 && (hi - 0.596_169).abs() < 1e-5);
        assert_eq!(wilson_interval(0, 0, WILSON_Z), (0.0, 1.0));
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let (m, c) = park(1.0, 40);
        let plant = Plant::Linear(m);
        let a = simulate(&c, &plant, &[-4.0, -5.0], 40, 20, 9, true);
        let b = simulate(&c, &plant, &[-4.0, -5.0], 40, 20, 9, true);
        assert_eq!(a, b);
        let other = simulate(&c, &plant, &[-4.0, -5.0], 40, 20, 10, true);
        assert_ne!(a.trajectories, other.trajectories);
    }

    #[test]
    fn noiseless_runs_are_deterministic() {
        let (m, c) = park(0.0, 40);
        let plant = Plant::Linear(m);
        let r = simulate(&c, &plant, &[-4.0, -5.0], 60, 10, 1, false);
        assert!(r.successes == 0 || r.successes == 10);
        assert_eq!(r.input_violations, 0);
    }

    #[test]
    fn soundness_on_running_example() {
        let (m, c) = park(1.0, 200);
        let plant = Plant::Linear(m);
        for x0 in [[-4.0, -5.0], [-8.0, 2.0], [4.0, 8.0]] {
            let bound = c.value_at(&x0);
            let r = simulate(&c, &plant, &x0, 200, 500, 42, false);
            let half = 0.5 * (r.wilson.1 - r.wilson.0);
            assert!(r.satisfaction >= bound - 3.0 * half, "{x0:?}: {} vs {bound}", r.satisfaction);
            assert_eq!(r.input_violations, 0);
        }
    }

    #[test]
    fn feedback_budget_is_checked() {
        let (m, c) = park(1.0, 40);
        let mut rel = c.relation.clone();
        rel.interface.kind = InterfaceKind::Feedback;
        rel.interface.gains = vec![Mat::identity(2, 2) * -5.0];
        let inputs = grid_input_space(&[3, 3], &m.u_space, InterfaceKind::Feedback, 0.8, 0.2).unwrap();
        let err = refine_controller(
            c.initial_values.clone(),
            c.policy.clone(),
            c.grid.clone(),
            inputs,
            c.modes.clone(),
            rel,
            c.dfa.clone(),
            (&m.c, &c.labeling, &m.u_space),
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, RuntimeError::BudgetViolation { .. }));
    }

    #[test]
    fn trajectory_csv_layout() {
        let tr = Trajectory {
            run: 0,
            states: vec![vec![1.0, 2.0], vec![1.5, 2.5]],
            inputs: vec![vec![0.5]],
            q: vec![0, 1],
            letters: vec![0, 2],
            satisfied: true,
            breach: false,
            left_domain: false,
            clamped: 0,
        };
        let shift = ShiftRecord { x_ss: Vect::from_vec(vec![10.0, 0.0]), u_ss: Vect::from_vec(vec![1.0]), y_ss: Vect::zeros(1) };
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &[tr], Some(&shift)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run,t,x1,x2,u1,q,letter");
        assert_eq!(lines[1], "0,0,11,2,1.5,0,0");
        assert_eq!(lines[2], "0,1,11.5,2.5,,1,2");
    }
}
