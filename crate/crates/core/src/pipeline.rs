//! End-to-end synthesis: translate, abstract, quantify, synthesize, refine
//! and deploy, with per-step timings and machine-readable outputs.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::abstraction::{grid_input_space, label_sets, AbstractInputSet, AbstractModel, AbstractionError, Grid};
use crate::bundle::BundleError;
use crate::config::{BuiltModel, Config, ConfigError};
use crate::geometry::{GeometryError, Polytope};
use crate::linalg::{Mat, Vect};
use crate::models::{normalize_disturbance, steady_state_shift, LinearModel, ModelError, PlantModel, ShiftRecord};
use crate::mor::{diagonalize_noise, model_reduction, reduce_x, MorError, ReducedPair};
use crate::pwa::{pwa_approximation, PwaError};
use crate::runtime::{refine_controller, simulate, Controller, Plant, ReducedDynamics, RuntimeError, SimulationResult};
use crate::similarity::{combine_relations, default_probes, finite_relation, mor_relation, SimilarityError, SimulationRelation};
use crate::speclang::{parse_scltl, translate_spec, Dfa, SpecError};
use crate::synthesis::{initial_state_values, value_iteration, BoundMode, SynthesisError, SynthesisOptions, ValueFunction};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("translate: {0}")]
    Spec(#[from] SpecError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("pwa: {0}")]
    Pwa(#[from] PwaError),
    #[error("reduction: {0}")]
    Mor(#[from] MorError),
    #[error("abstraction: {0}")]
    Abstraction(#[from] AbstractionError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("similarity: {0}")]
    Similarity(#[from] SimilarityError),
    #[error("synthesis: {0}")]
    Synthesis(#[from] SynthesisError),
    #[error("refinement: {0}")]
    Runtime(#[from] RuntimeError),
    #[error("bundle: {0}")]
    Bundle(#[from] BundleError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 infeasible relation, 4 non-convergence,
    /// 5 bundle version mismatch, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Spec(_) | PipelineError::Model(_) | PipelineError::Pwa(_) => 2,
            PipelineError::Similarity(_) | PipelineError::Runtime(RuntimeError::BudgetViolation { .. }) => 3,
            PipelineError::Synthesis(SynthesisError::NonConvergence { .. }) => 4,
            PipelineError::Bundle(BundleError::Version { .. }) => 5,
            _ => 1,
        }
    }
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub upper_bound: bool,
    pub initial_only: bool,
    pub tol: Option<f64>,
    pub thold: Option<f64>,
    pub seed: u64,
    /// Skip the deployment runs of the `[simulation]` section.
    pub skip_simulation: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut Config) {
        cfg.synthesis.upper_bound |= self.upper_bound;
        cfg.synthesis.initial_only |= self.initial_only;
        if let Some(t) = self.tol {
            cfg.abstraction.tol = t;
        }
        if let Some(t) = self.thold {
            cfg.synthesis.thold = t;
        }
    }
}

/// Wall time in seconds of the six synthesis steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub translate: f64,
    pub abstraction: f64,
    pub similarity: f64,
    pub synthesis: f64,
    pub refinement: f64,
    pub deployment: f64,
}

impl StepTimings {
    pub fn total(&self) -> f64 {
        self.translate + self.abstraction + self.similarity + self.synthesis + self.refinement + self.deployment
    }

    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("(1) translate specification", self.translate),
            ("(2) finite-state abstraction", self.abstraction),
            ("(3) similarity quantification", self.similarity),
            ("(4) controller synthesis", self.synthesis),
            ("(5) control refinement", self.refinement),
            ("(6) deployment", self.deployment),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSummary {
    pub kind: String,
    pub epsilon: f64,
    pub output_radius: f64,
    pub delta_max: f64,
    pub delta_mean: f64,
    pub lambda_max: f64,
    pub beta_max: f64,
    pub feedback_scale: f64,
}

impl RelationSummary {
    fn of(r: &SimulationRelation) -> Self {
        let mean = if r.delta.is_empty() { 0.0 } else { r.delta.iter().sum::<f64>() / r.delta.len() as f64 };
        Self {
            kind: format!("{:?}", r.kind),
            epsilon: r.epsilon,
            output_radius: r.output_radius,
            delta_max: r.max_delta(),
            delta_mean: mean,
            lambda_max: r.lambda.iter().copied().fold(0.0, f64::max),
            beta_max: r.beta.iter().copied().fold(0.0, f64::max),
            feedback_scale: r.interface.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub dimr: usize,
    pub hankel: Vec<f64>,
    pub epsilon_1: f64,
    pub delta_1: f64,
    pub output_radius_1: f64,
    pub lambda_1: f64,
    pub noise_tail: f64,
    pub epsilon_2: f64,
    pub delta_2: f64,
    pub reduced_x_space: (Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialValue {
    pub x0: Vec<f64>,
    pub q: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSummary {
    pub x0: Vec<f64>,
    pub bound: f64,
    pub horizon: usize,
    pub runs: usize,
    pub successes: usize,
    pub satisfaction: f64,
    pub wilson: (f64, f64),
    pub breaches: usize,
    pub input_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub name: String,
    pub dfa_states: usize,
    pub grid_cells: Vec<usize>,
    pub grid_widths: Vec<f64>,
    pub abstract_inputs: usize,
    pub modes: usize,
    pub pwa_rigorous: Option<bool>,
    pub relation: RelationSummary,
    pub reduction: Option<ReductionSummary>,
    pub bound_mode: String,
    pub iterations: usize,
    pub peak_value: f64,
    pub initial_values: Vec<InitialValue>,
    pub deployment: Vec<DeploymentSummary>,
    pub timings: StepTimings,
    pub total_seconds: f64,
    pub peak_memory_mb: Option<f64>,
}

/// Everything a synthesis run produces.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub config: Config,
    pub controller: Controller,
    pub values: ValueFunction,
    pub dfa: Dfa,
    pub plant: Plant,
    pub report: Report,
    pub simulations: Vec<SimulationResult>,
}

/// Peak resident set size from `/proc/self/status`, if available.
pub fn peak_memory_mb() -> Option<f64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = s.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// The controlled system in controller coordinates: noise normalized and,
/// if requested, shifted to the steady state.
pub fn deployment_plant(cfg: &Config) -> Result<(Plant, Option<ShiftRecord>), PipelineError> {
    match cfg.build_model()? {
        BuiltModel::Linear(m) => {
            let (m, shift) = prepare_linear(cfg, &m)?;
            Ok((Plant::Linear(m), shift))
        }
        BuiltModel::Nonlinear(m) => Ok((Plant::Nonlinear(m.normalized()?), None)),
    }
}

fn prepare_linear(cfg: &Config, m: &LinearModel) -> Result<(LinearModel, Option<ShiftRecord>), PipelineError> {
    let (m, _) = normalize_disturbance(m)?;
    match &cfg.preprocess.steady_state {
        Some(y) => {
            let (m, rec) = steady_state_shift(&m, y)?;
            Ok((m, Some(rec)))
        }
        None => Ok((m, None)),
    }
}

/// `{x_r : C_r x_r ∈ R}` for an output region `R`.
fn pull_back(region: &Polytope, c: &Mat) -> Result<Polytope, GeometryError> {
    let rows: Vec<Vec<f64>> = region
        .normals()
        .iter()
        .map(|h| (0..c.ncols()).map(|j| (0..c.nrows()).map(|i| h[i] * c[(i, j)]).sum()).collect())
        .collect();
    Polytope::from_halfspaces(&rows, region.offsets())
}

fn reduce_pair(cfg: &Config, m: &LinearModel, act: &Polytope) -> Result<ReducedPair, PipelineError> {
    let spec = cfg.mor.as_ref().expect("caller checked");
    let mut pair = diagonalize_noise(model_reduction(m, spec.dimr, spec.f)?)?;
    if let Some(rx) = &spec.reduce_x {
        let ap = cfg
            .spec
            .aps
            .iter()
            .position(|a| a == &rx.ap)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown AP '{}'", rx.ap)))?;
        let region = m
            .labeling
            .regions
            .iter()
            .find(|(_, a)| *a == ap)
            .map(|(r, _)| r.clone())
            .ok_or_else(|| ConfigError::Invalid(format!("no region for AP '{}'", rx.ap)))?;
        let target = pull_back(&region, &pair.reduced.c)?;
        pair.reduced = reduce_x(&pair.reduced, act, &target, rx.iterations)?;
    }
    Ok(pair)
}

/// Step (2): the model the grid is built on, the deployed plant, and the
/// finite-state abstraction.
pub struct AbstractionStep {
    pub abs_plant: PlantModel,
    pub plant: Plant,
    pub shift: Option<ShiftRecord>,
    pub pair: Option<ReducedPair>,
    pub pwa_rigorous: Option<bool>,
    pub grid: Grid,
    pub inputs: AbstractInputSet,
    pub abs: AbstractModel,
}

pub fn build_abstraction(cfg: &Config) -> Result<AbstractionStep, PipelineError> {
    let built = cfg.build_model()?;
    let a = &cfg.abstraction;
    let mut pair = None;
    let mut pwa_rigorous = None;
    let (abs_plant, plant, shift) = match built {
        BuiltModel::Linear(m) => {
            let (m, shift) = prepare_linear(cfg, &m)?;
            if cfg.mor.is_some() {
                let probe = grid_input_space(&a.inputs, &m.u_space, a.interface, a.actuation, a.feedback)?;
                let p = reduce_pair(cfg, &m, &probe.actuation)?;
                let reduced = PlantModel::Linear(p.reduced.clone());
                pair = Some(p);
                (reduced, Plant::Linear(m), shift)
            } else {
                (PlantModel::Linear(m.clone()), Plant::Linear(m), shift)
            }
        }
        BuiltModel::Nonlinear(m) => {
            let m = m.normalized()?;
            let pw = cfg.pwa.as_ref().expect("checked");
            let pwa = pwa_approximation(&m, &pw.partitions, pw.input_affine)?;
            pwa_rigorous = Some(pwa.rigorous);
            log::info!("PWA approximation with {} modes", pwa.modes.len());
            (PlantModel::Pwa(pwa), Plant::Nonlinear(m), None)
        }
    };
    let grid = Grid::over(abs_plant.x_space(), &a.cells)?;
    let inputs = grid_input_space(&a.inputs, abs_plant.u_space(), a.interface, a.actuation, a.feedback)?;
    let abs = AbstractModel::build(&abs_plant, grid.clone(), inputs.clone(), a.tol)?;
    Ok(AbstractionStep { abs_plant, plant, shift, pair, pwa_rigorous, grid, inputs, abs })
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs the whole pipeline on `cfg` (with overrides already applied).
pub fn run(cfg: &Config, ov: &Overrides) -> Result<Outcome, PipelineError> {
    let mut cfg = cfg.clone();
    ov.apply(&mut cfg);
    let mut timings = StepTimings::default();

    let t = Instant::now();
    let aps: Vec<&str> = cfg.spec.aps.iter().map(String::as_str).collect();
    let dfa = translate_spec(&parse_scltl(&cfg.spec.formula, &aps)?);
    timings.translate = secs(t);
    log::info!("DFA with {} states", dfa.num_states);

    let t = Instant::now();
    let AbstractionStep { abs_plant, plant, shift, pair, pwa_rigorous, grid, inputs, abs } = build_abstraction(&cfg)?;
    let a = &cfg.abstraction;
    timings.abstraction = secs(t);
    log::info!("abstraction with {} states built in {:.2}s", grid.num_cells(), timings.abstraction);

    let t = Instant::now();
    let probes = cfg.similarity.probes.clone().unwrap_or_else(|| default_probes(&abs_plant));
    let rel2 = finite_relation(&abs_plant, &abs, cfg.similarity.epsilon, a.interface, &probes)?;
    let (rel, reduction) = match &pair {
        Some(p) => {
            let spec = cfg.mor.as_ref().expect("checked");
            let rel1 = mor_relation(p, spec.epsilon, spec.eta)?;
            let combined = combine_relations(&rel1, &rel2, &p.reduced.c)?;
            let link = rel1.mor.as_ref().expect("reduction link");
            let (lo, hi) = p.reduced.x_space.bounding_box()?;
            let summary = ReductionSummary {
                dimr: spec.dimr,
                hankel: p.hankel.clone(),
                epsilon_1: link.epsilon,
                delta_1: link.delta,
                output_radius_1: link.output_radius,
                lambda_1: link.lambda,
                noise_tail: link.noise_tail,
                epsilon_2: rel2.epsilon,
                delta_2: rel2.max_delta(),
                reduced_x_space: (lo, hi),
            };
            (combined, Some(summary))
        }
        None => (rel2, None),
    };
    timings.similarity = secs(t);
    log::info!("relation: eps {} delta {:.3e} output radius {:.4}", rel.epsilon, rel.max_delta(), rel.output_radius);

    let t = Instant::now();
    let labeling = abs_plant.labeling().clone();
    let c_abs = abs_plant.c().clone();
    let labels = label_sets(&grid, &c_abs, &labeling, rel.output_radius);
    let delta = rel.state_deltas(&abs.modes);
    let opts = SynthesisOptions {
        thold: cfg.synthesis.thold,
        max_iter: cfg.synthesis.max_iter,
        mode: if cfg.synthesis.upper_bound { BoundMode::Upper } else { BoundMode::Lower },
    };
    let (values, policy) = value_iteration(&abs.tensor, &dfa, &labels, &delta, &opts)?;
    let init = initial_state_values(&values, &grid, &dfa, &labeling, &c_abs);
    timings.synthesis = secs(t);
    log::info!("value iteration converged after {} sweeps", values.iterations);

    let t = Instant::now();
    let reduced = pair.as_ref().map(|p| ReducedDynamics {
        a: p.reduced.a.clone(),
        b: p.reduced.b.clone(),
        bw: p.reduced.bw.clone(),
        offset: p.reduced.offset.clone(),
    });
    let (c_out, lab_out, u_out) = match &plant {
        Plant::Linear(m) => (m.c.clone(), m.labeling.clone(), m.u_space.clone()),
        Plant::Nonlinear(m) => (m.c.clone(), m.labeling.clone(), m.u_space.clone()),
    };
    let controller = refine_controller(
        init,
        policy,
        grid.clone(),
        inputs,
        abs.modes.clone(),
        rel.clone(),
        dfa.clone(),
        (&c_out, &lab_out, &u_out),
        reduced,
        shift.clone(),
    )?;
    timings.refinement = secs(t);

    let to_local = |x0: &[f64]| -> Vec<f64> {
        match &shift {
            Some(s) => x0.iter().zip(s.x_ss.iter()).map(|(a, b)| a - b).collect(),
            None => x0.to_vec(),
        }
    };
    let initial_values: Vec<InitialValue> = cfg
        .simulation
        .iter()
        .flat_map(|s| s.x0.iter())
        .map(|x0| {
            let (q, value) = value_at_state(&controller, &values, &to_local(x0));
            InitialValue { x0: x0.clone(), q, value }
        })
        .collect();

    let t = Instant::now();
    let mut deployment = Vec::new();
    let mut simulations = Vec::new();
    if let (Some(sim), false) = (&cfg.simulation, ov.skip_simulation) {
        for (x0, iv) in sim.x0.iter().zip(&initial_values) {
            if sim.runs == 0 {
                continue;
            }
            let r = simulate(&controller, &plant, &to_local(x0), sim.horizon, sim.runs, ov.seed, false);
            deployment.push(DeploymentSummary {
                x0: x0.clone(),
                bound: iv.value,
                horizon: sim.horizon,
                runs: r.runs,
                successes: r.successes,
                satisfaction: r.satisfaction,
                wilson: r.wilson,
                breaches: r.breaches,
                input_violations: r.input_violations,
            });
            simulations.push(r);
        }
    }
    timings.deployment = secs(t);

    let report = Report {
        report_version: REPORT_VERSION,
        name: cfg.name.clone(),
        dfa_states: dfa.num_states,
        grid_cells: grid.counts.clone(),
        grid_widths: grid.widths.clone(),
        abstract_inputs: controller.inputs.inputs.len(),
        modes: abs_plant.num_modes(),
        pwa_rigorous,
        relation: RelationSummary::of(&rel),
        reduction,
        bound_mode: format!("{:?}", opts.mode).to_lowercase(),
        iterations: values.iterations,
        peak_value: controller.initial_values.iter().copied().fold(0.0, f64::max),
        initial_values,
        deployment,
        total_seconds: timings.total(),
        timings,
        peak_memory_mb: peak_memory_mb(),
    };
    Ok(Outcome { config: cfg, controller, values, dfa, plant, report, simulations })
}

/// `V(Π(z₀), τ(q₀, L(C x₀)))` for a state in controller coordinates, where
/// `z₀` is `x₀` or its reduced projection. Returns `(q, value)`.
pub fn value_at_state(c: &Controller, v: &ValueFunction, x0: &[f64]) -> (usize, f64) {
    let st = c.reset(x0);
    if c.dfa.is_accepting(st.q) {
        return (st.q, 1.0);
    }
    if st.breach {
        return (st.q, 0.0);
    }
    let z: Vec<f64> = match &st.x_r {
        Some(xr) => xr.iter().copied().collect(),
        None => x0.to_vec(),
    };
    (st.q, c.grid.index_of(&z).map_or(0.0, |s| v.get(s, st.q)))
}

/// Satisfaction field CSV `x1..xn,q,value` over cell centers. With
/// `initial_only`, one row per cell at its initial DFA state.
pub fn write_field_csv<W: Write>(
    mut out: W,
    c: &Controller,
    v: &ValueFunction,
    initial_only: bool,
) -> std::io::Result<()> {
    let n = c.grid.dim();
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.push("q".into());
    header.push("value".into());
    writeln!(out, "{}", header.join(","))?;
    let mut out = std::io::BufWriter::new(out);
    let row = |out: &mut dyn Write, s: usize, q: usize, val: f64| -> std::io::Result<()> {
        let x = c.grid.center(s);
        let coords: Vec<String> = x.iter().map(f64::to_string).collect();
        writeln!(out, "{},{q},{val}", coords.join(","))
    };
    if initial_only {
        for s in 0..c.grid.num_cells() {
            let y = &c.c_abs_output(s);
            let q = c.dfa.step(c.dfa.initial, c.labeling.label(y));
            row(&mut out, s, q, c.initial_values[s])?;
        }
    } else {
        for (q, vals) in v.values.iter().enumerate() {
            for (s, &val) in vals.iter().enumerate() {
                row(&mut out, s, q, val)?;
            }
        }
    }
    out.flush()
}

impl Controller {
    /// Output of the abstract model at the center of cell `s`.
    fn c_abs_output(&self, s: usize) -> Vec<f64> {
        let x = Vect::from_vec(self.grid.center(s));
        let y = match &self.relation.mor {
            Some(link) => &self.c * (&link.p * x),
            None => &self.c * x,
        };
        y.iter().copied().collect()
    }
}

/// Timing table in the layout of the benchmark tables: seconds and share.
pub fn timing_table(t: &StepTimings) -> String {
    let total = t.total().max(1e-12);
    let mut s = format!("{:<34}{:>12}{:>10}\n", "step", "seconds", "share");
    for (name, v) in t.rows() {
        s.push_str(&format!("{:<34}{:>12.3}{:>9.2}%\n", name, v, 100.0 * v / total));
    }
    s.push_str(&format!("{:<34}{:>12.3}{:>9.2}%\n", "total", t.total(), 100.0));
    s
}
