//! Controller bundle: one JSON document with packed little-endian tables.

use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::runtime::Controller;
use crate::synthesis::Policy;

pub const BUNDLE_FORMAT: &str = "scsyn-controller";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("bundle version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed bundle: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    format: String,
    version: u32,
    config: Config,
    controller: Controller,
    policy_active: Vec<bool>,
    policy_states: usize,
    /// `u32` input indices, DFA-state major.
    policy: String,
    /// `u32` mode index per cell.
    modes: String,
    /// `f64` initial-state value per cell.
    initial_values: String,
}

fn pack_u32(v: impl Iterator<Item = u32>) -> String {
    STANDARD.encode(v.flat_map(u32::to_le_bytes).collect::<Vec<u8>>())
}

fn unpack_u32(s: &str) -> Result<Vec<u32>, BundleError> {
    let bytes = STANDARD.decode(s).map_err(|e| BundleError::Format(e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(BundleError::Format("u32 payload length".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
}

fn pack_f64(v: &[f64]) -> String {
    STANDARD.encode(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
}

fn unpack_f64(s: &str) -> Result<Vec<f64>, BundleError> {
    let bytes = STANDARD.decode(s).map_err(|e| BundleError::Format(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(BundleError::Format("f64 payload length".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

pub fn write_bundle<W: Write>(out: W, config: &Config, c: &Controller) -> Result<(), BundleError> {
    let ns = c.grid.num_cells();
    let file = BundleFile {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        config: config.clone(),
        controller: c.clone(),
        policy_active: c.policy.active.clone(),
        policy_states: ns,
        policy: pack_u32(c.policy.inputs.iter().flatten().copied()),
        modes: pack_u32(c.modes.iter().copied()),
        initial_values: pack_f64(&c.initial_values),
    };
    serde_json::to_writer(out, &file).map_err(|e| BundleError::Format(e.to_string()))
}

/// Reads a bundle, checking the format tag and version before the body.
pub fn read_bundle<R: Read>(mut inp: R) -> Result<(Config, Controller), BundleError> {
    let mut text = String::new();
    inp.read_to_string(&mut text)?;
    let header: Header = serde_json::from_str(&text).map_err(|e| BundleError::Format(e.to_string()))?;
    if header.format != BUNDLE_FORMAT {
        return Err(BundleError::Format(format!("unexpected format tag '{}'", header.format)));
    }
    if header.version != BUNDLE_VERSION {
        return Err(BundleError::Version { found: header.version, expected: BUNDLE_VERSION });
    }
    let file: BundleFile = serde_json::from_str(&text).map_err(|e| BundleError::Format(e.to_string()))?;
    let mut c = file.controller;
    let ns = file.policy_states;
    if ns != c.grid.num_cells() {
        return Err(BundleError::Format("policy size does not match grid".into()));
    }
    let flat = unpack_u32(&file.policy)?;
    if flat.len() != ns * file.policy_active.len() {
        return Err(BundleError::Format("policy payload size".into()));
    }
    let inputs = if ns == 0 { vec![Vec::new(); file.policy_active.len()] } else { flat.chunks(ns).map(<[u32]>::to_vec).collect() };
    c.policy = Policy { inputs, active: file.policy_active };
    c.modes = unpack_u32(&file.modes)?;
    c.initial_values = unpack_f64(&file.initial_values)?;
    if c.modes.len() != ns || c.initial_values.len() != ns {
        return Err(BundleError::Format("per-cell payload size".into()));
    }
    Ok((file.config, c))
}
