//! Declarative TOML problem descriptions and the built-in benchmark presets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::abstraction::InterfaceKind;
use crate::geometry::{GeometryError, LabeledPartition, Polytope};
use crate::linalg::{mat_from_rows, Mat, Vect};
use crate::models::{builtin_dynamics, LinearModel, ModelError, NonlinearModel};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Set given either as a box or as a vertex list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SetSpec {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Vertices { vertices: Vec<Vec<f64>> },
}

impl SetSpec {
    pub fn to_polytope(&self) -> Result<Polytope, GeometryError> {
        match self {
            SetSpec::Box { lower, upper } => Polytope::from_box(lower, upper),
            SetSpec::Vertices { vertices } => Polytope::from_vertices(vertices),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub ap: String,
    #[serde(flatten)]
    pub set: SetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsSpec>,
    pub c: Vec<Vec<f64>>,
    pub bw: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    pub x_space: SetSpec,
    pub u_space: SetSpec,
    /// Output space; defaults to the image box of `X` under `C`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_space: Option<SetSpec>,
    pub regions: Vec<RegionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecSection {
    pub formula: String,
    pub aps: Vec<String>,
}

/// The noise is always normalized to `N(0, I)`; an optional output set point
/// moves an affine model to deviation coordinates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PreprocessSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steady_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwaSpec {
    pub partitions: Vec<usize>,
    #[serde(default = "yes")]
    pub input_affine: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceXSpec {
    pub ap: String,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorSpec {
    pub dimr: usize,
    pub f: f64,
    /// `ε` of the relation between the full and the reduced model.
    pub epsilon: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce_x: Option<ReduceXSpec>,
}

fn default_eta() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionSpec {
    pub cells: Vec<usize>,
    pub inputs: Vec<usize>,
    pub tol: f64,
    #[serde(default)]
    pub interface: InterfaceKind,
    #[serde(default = "one")]
    pub actuation: f64,
    #[serde(default)]
    pub feedback: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySpec {
    pub epsilon: f64,
    /// States used to pick the weighting; defaults to fractional probes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSpec {
    pub thold: f64,
    #[serde(default)]
    pub upper_bound: bool,
    #[serde(default)]
    pub initial_only: bool,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_max_iter() -> usize {
    crate::synthesis::MAX_ITER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    /// Initial states in the original (unshifted) coordinates.
    pub x0: Vec<Vec<f64>>,
    pub horizon: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub name: String,
    pub model: ModelSpec,
    pub spec: SpecSection,
    #[serde(default)]
    pub preprocess: PreprocessSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pwa: Option<PwaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mor: Option<MorSpec>,
    pub abstraction: AbstractionSpec,
    pub similarity: SimilaritySpec,
    pub synthesis: SynthesisSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSpec>,
}

pub const PRESETS: [&str; 4] = ["carpark", "package-delivery", "vdpol", "bas"];

/// TOML text of a built-in preset.
pub fn preset_text(name: &str) -> Result<&'static str, ConfigError> {
    match name {
        "carpark" => Ok(include_str!("../presets/carpark.toml")),
        "package-delivery" => Ok(include_str!("../presets/package-delivery.toml")),
        "vdpol" => Ok(include_str!("../presets/vdpol.toml")),
        "bas" => Ok(include_str!("../presets/bas.toml")),
        other => Err(ConfigError::UnknownPreset(other.to_string())),
    }
}

pub fn preset(name: &str) -> Result<Config, ConfigError> {
    Config::from_toml(preset_text(name)?)
}

/// Built model before any pipeline transformation.
#[derive(Debug, Clone)]
pub enum BuiltModel {
    Linear(LinearModel),
    Nonlinear(NonlinearModel),
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Mat, ConfigError> {
    if rows.is_empty() {
        return Err(ConfigError::Invalid(format!("{what} is empty")));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(ConfigError::Invalid(format!("{what} has ragged rows")));
    }
    Ok(mat_from_rows(rows))
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(text)?;
        c.check()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        match self.model.kind {
            ModelKind::Linear if self.model.a.is_none() || self.model.b.is_none() => {
                return bad("linear model needs a and b")
            }
            ModelKind::Nonlinear if self.model.dynamics.is_none() => return bad("nonlinear model needs dynamics"),
            ModelKind::Nonlinear if self.pwa.is_none() => return bad("nonlinear model needs a [pwa] section"),
            _ => {}
        }
        if self.mor.is_some() && self.model.kind != ModelKind::Linear {
            return bad("model reduction needs a linear model");
        }
        if !(self.abstraction.tol > 0.0 && self.abstraction.tol < 1.0) {
            return bad("abstraction.tol must lie in (0, 1)");
        }
        if !(self.synthesis.thold > 0.0) {
            return bad("synthesis.thold must be positive");
        }
        if self.similarity.epsilon < 0.0 {
            return bad("similarity.epsilon must be non-negative");
        }
        if self.abstraction.cells.contains(&0) || self.abstraction.inputs.contains(&0) {
            return bad("grid counts must be positive");
        }
        for r in &self.model.regions {
            if !self.spec.aps.contains(&r.ap) {
                return Err(ConfigError::Invalid(format!("region AP '{}' not in spec.aps", r.ap)));
            }
        }
        Ok(())
    }

    fn ap_index(&self, ap: &str) -> Result<usize, ConfigError> {
        self.spec
            .aps
            .iter()
            .position(|a| a == ap)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown AP '{ap}'")))
    }

    /// Labeled output regions with bits in `spec.aps` order.
    pub fn labeling(&self, x_space: &Polytope, c: &Mat) -> Result<LabeledPartition, ConfigError> {
        let universe = match &self.model.y_space {
            Some(s) => s.to_polytope()?,
            None => {
                let (lo, hi) = x_space.bounding_box()?;
                let mut ylo = vec![0.0; c.nrows()];
                let mut yhi = vec![0.0; c.nrows()];
                for i in 0..c.nrows() {
                    for d in 0..lo.len() {
                        let v = c[(i, d)];
                        ylo[i] += (v * lo[d]).min(v * hi[d]);
                        yhi[i] += (v * lo[d]).max(v * hi[d]);
                    }
                }
                Polytope::from_box(&ylo, &yhi)?
            }
        };
        let regions = self
            .model
            .regions
            .iter()
            .map(|r| Ok((r.set.to_polytope()?, self.ap_index(&r.ap)?)))
            .collect::<Result<Vec<_>, ConfigError>>()?;
        Ok(LabeledPartition::new(regions, universe, self.spec.aps.len())?)
    }

    /// Model exactly as written, without normalization or shift.
    pub fn build_model(&self) -> Result<BuiltModel, ConfigError> {
        let ms = &self.model;
        let c = matrix(&ms.c, "c")?;
        let bw = matrix(&ms.bw, "bw")?;
        let q = bw.ncols();
        let mu = Vect::from_vec(ms.mu.clone().unwrap_or_else(|| vec![0.0; q]));
        let sigma = match &ms.sigma {
            Some(s) => matrix(s, "sigma")?,
            None => Mat::identity(q, q),
        };
        let x_space = ms.x_space.to_polytope()?;
        let u_space = ms.u_space.to_polytope()?;
        let labeling = self.labeling(&x_space, &c)?;
        let ap_names = self.spec.aps.clone();
        match ms.kind {
            ModelKind::Linear => {
                let a = matrix(ms.a.as_ref().expect("checked"), "a")?;
                let b = matrix(ms.b.as_ref().expect("checked"), "b")?;
                let n = a.nrows();
                let m = LinearModel {
                    offset: Vect::from_vec(ms.offset.clone().unwrap_or_else(|| vec![0.0; n])),
                    a,
                    b,
                    c,
                    bw,
                    mu,
                    sigma,
                    x_space,
                    u_space,
                    labeling,
                    ap_names,
                };
                m.validate()?;
                Ok(BuiltModel::Linear(m))
            }
            ModelKind::Nonlinear => {
                let spec = ms.dynamics.as_ref().expect("checked");
                let params: Vec<(String, f64)> = spec.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
                let m = NonlinearModel {
                    dynamics: builtin_dynamics(&spec.name, &params)?,
                    c,
                    bw,
                    mu,
                    sigma,
                    x_space,
                    u_space,
                    labeling,
                    ap_names,
                };
                m.validate()?;
                Ok(BuiltModel::Nonlinear(m))
            }
        }
    }
}
