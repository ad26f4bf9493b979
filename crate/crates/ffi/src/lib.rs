//! C ABI for scsyn.
//!
//! Every function returns a [`ScsynStatus`]; on failure a message is kept per
//! thread and can be read with [`scsyn_last_error`]. Handles are opaque and
//! must be released with their matching `*_free` function.
//!
//! Controllers work in plant coordinates: the steady-state shift recorded in
//! the bundle is removed from measured states and re-added to inputs.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scsyn::bundle::{read_bundle, BundleError};
use scsyn::config::{Config, ConfigError};
use scsyn::linalg::Vect;
use scsyn::pipeline::{run, Overrides, PipelineError};
use scsyn::runtime::{Controller, ControllerState, RuntimeError};
use scsyn::speclang::{parse_scltl, translate_spec, Dfa, SpecError, MAX_APS};
use scsyn::synthesis::SynthesisError;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsynStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Spec = 4,
    Infeasible = 5,
    NonConvergence = 6,
    VersionMismatch = 7,
    Dimension = 8,
    MissingNoise = 9,
    Io = 10,
    Internal = 11,
    Panic = 12,
}

/// Translated scLTL specification.
pub struct ScsynDfa {
    dfa: Dfa,
}

/// Refined controller loaded from a bundle or synthesized from a config.
pub struct ScsynController {
    inner: Arc<Controller>,
}

/// Closed-loop run of a controller: DFA state, reduced state and the last
/// measurement.
pub struct ScsynSession {
    controller: Arc<Controller>,
    state: ControllerState,
    last: Option<(Vect, Vect)>,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: ScsynStatus, msg: impl Into<String>) -> ScsynStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> ScsynStatus) -> ScsynStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(ScsynStatus::Panic, "internal panic"),
    }
}

fn pipeline_status(e: &PipelineError) -> ScsynStatus {
    match e {
        PipelineError::Config(ConfigError::Io { .. }) | PipelineError::Io(_) | PipelineError::Bundle(BundleError::Io(_)) => {
            ScsynStatus::Io
        }
        PipelineError::Config(_) | PipelineError::Model(_) | PipelineError::Pwa(_) => ScsynStatus::Config,
        PipelineError::Spec(_) => ScsynStatus::Spec,
        PipelineError::Similarity(_) | PipelineError::Runtime(RuntimeError::BudgetViolation { .. }) => {
            ScsynStatus::Infeasible
        }
        PipelineError::Synthesis(SynthesisError::NonConvergence { .. }) => ScsynStatus::NonConvergence,
        PipelineError::Bundle(BundleError::Version { .. }) => ScsynStatus::VersionMismatch,
        _ => ScsynStatus::Internal,
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, ScsynStatus> {
    if p.is_null() {
        return Err(fail(ScsynStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(ScsynStatus::InvalidUtf8, "argument is not valid UTF-8"))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, expected: usize) -> Result<&'a [f64], ScsynStatus> {
    if n != expected {
        return Err(fail(ScsynStatus::Dimension, format!("expected {expected} values, got {n}")));
    }
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(ScsynStatus::NullPointer, "null array argument"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn to_local(c: &Controller, x: &[f64]) -> Vec<f64> {
    match &c.shift {
        Some(s) => x.iter().zip(s.x_ss.iter()).map(|(a, b)| a - b).collect(),
        None => x.to_vec(),
    }
}

fn state_dim(c: &Controller) -> usize {
    c.c.ncols()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scsyn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Translates `formula` over the atomic propositions `aps[0..n_aps]`.
/// Letters passed to [`scsyn_dfa_step`] have bit `i` set when `aps[i]` holds.
///
/// # Safety
/// `formula` and each `aps[i]` must be NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_dfa_new(
    formula: *const c_char,
    aps: *const *const c_char,
    n_aps: usize,
    out: *mut *mut ScsynDfa,
) -> ScsynStatus {
    guard(|| {
        if out.is_null() || (aps.is_null() && n_aps > 0) {
            return fail(ScsynStatus::NullPointer, "null argument");
        }
        let text = match str_arg(formula) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let mut names = Vec::with_capacity(n_aps);
        for i in 0..n_aps {
            match str_arg(*aps.add(i)) {
                Ok(s) => names.push(s),
                Err(s) => return s,
            }
        }
        let f = match parse_scltl(text, &names) {
            Ok(f) => f,
            Err(e) => return fail(ScsynStatus::Spec, e.to_string()),
        };
        *out = Box::into_raw(Box::new(ScsynDfa { dfa: translate_spec(&f) }));
        ScsynStatus::Ok
    })
}

/// Loads a DFA from its JSON export.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_dfa_from_json(json: *const c_char, out: *mut *mut ScsynDfa) -> ScsynStatus {
    guard(|| {
        if out.is_null() {
            return fail(ScsynStatus::NullPointer, "null output");
        }
        let text = match str_arg(json) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match scsyn::speclang::export::from_json(text) {
            Ok(dfa) if dfa.aps.len() <= MAX_APS => {
                *out = Box::into_raw(Box::new(ScsynDfa { dfa }));
                ScsynStatus::Ok
            }
            Ok(dfa) => fail(ScsynStatus::Spec, SpecError::TooManyPropositions(dfa.aps.len()).to_string()),
            Err(e) => fail(ScsynStatus::Spec, e.to_string()),
        }
    })
}

/// # Safety
/// `dfa` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scsyn_dfa_free(dfa: *mut ScsynDfa) {
    if !dfa.is_null() {
        drop(Box::from_raw(dfa));
    }
}

/// Number of states, initial state and number of atomic propositions.
///
/// # Safety
/// `dfa` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_dfa_info(
    dfa: *const ScsynDfa,
    num_states: *mut usize,
    initial: *mut usize,
    num_aps: *mut usize,
) -> ScsynStatus {
    let Some(d) = dfa.as_ref() else { return fail(ScsynStatus::NullPointer, "null handle") };
    if !num_states.is_null() {
        *num_states = d.dfa.num_states;
    }
    if !initial.is_null() {
        *initial = d.dfa.initial;
    }
    if !num_aps.is_null() {
        *num_aps = d.dfa.aps.len();
    }
    ScsynStatus::Ok
}

/// Successor of state `q` on `letter`.
///
/// # Safety
/// `dfa` must be a live handle; `next` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_dfa_step(dfa: *const ScsynDfa, q: usize, letter: u32, next: *mut usize) -> ScsynStatus {
    let Some(d) = dfa.as_ref() else { return fail(ScsynStatus::NullPointer, "null handle") };
    if next.is_null() {
        return fail(ScsynStatus::NullPointer, "null output");
    }
    if q >= d.dfa.num_states || letter as usize >= d.dfa.num_letters() {
        return fail(ScsynStatus::Dimension, "state or letter out of range");
    }
    *next = d.dfa.step(q, letter);
    ScsynStatus::Ok
}

/// 1 if `q` is accepting, 0 if not, -1 on a bad handle or state.
///
/// # Safety
/// `dfa` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn scsyn_dfa_is_accepting(dfa: *const ScsynDfa, q: usize) -> c_int {
    match dfa.as_ref() {
        Some(d) if q < d.dfa.num_states => c_int::from(d.dfa.is_accepting(q)),
        _ => -1,
    }
}

/// Reads a controller bundle written by `scsyn synthesize`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_controller_load(path: *const c_char, out: *mut *mut ScsynController) -> ScsynStatus {
    guard(|| {
        if out.is_null() {
            return fail(ScsynStatus::NullPointer, "null output");
        }
        let p = match str_arg(path) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let file = match std::fs::File::open(Path::new(p)) {
            Ok(f) => f,
            Err(e) => return fail(ScsynStatus::Io, format!("{p}: {e}")),
        };
        match read_bundle(std::io::BufReader::new(file)) {
            Ok((_, c)) => {
                *out = Box::into_raw(Box::new(ScsynController { inner: Arc::new(c) }));
                ScsynStatus::Ok
            }
            Err(e) => {
                let e = PipelineError::from(e);
                fail(pipeline_status(&e), e.to_string())
            }
        }
    })
}

/// Runs the synthesis pipeline on a TOML config, without deployment runs.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_controller_synthesize(
    config_toml: *const c_char,
    out: *mut *mut ScsynController,
) -> ScsynStatus {
    guard(|| {
        if out.is_null() {
            return fail(ScsynStatus::NullPointer, "null output");
        }
        let text = match str_arg(config_toml) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let result = Config::from_toml(text)
            .map_err(PipelineError::from)
            .and_then(|cfg| run(&cfg, &Overrides { skip_simulation: true, ..Overrides::default() }));
        match result {
            Ok(o) => {
                *out = Box::into_raw(Box::new(ScsynController { inner: Arc::new(o.controller) }));
                ScsynStatus::Ok
            }
            Err(e) => fail(pipeline_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `c` must come from this library and not be used afterwards. Sessions
/// keep their own reference and stay valid.
#[no_mangle]
pub unsafe extern "C" fn scsyn_controller_free(c: *mut ScsynController) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// State, input and noise dimensions of the controlled plant. The noise
/// dimension is 0 unless the controller tracks a reduced-order model.
///
/// # Safety
/// `c` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_controller_dims(
    c: *const ScsynController,
    n_x: *mut usize,
    n_u: *mut usize,
    n_w: *mut usize,
) -> ScsynStatus {
    let Some(c) = c.as_ref() else { return fail(ScsynStatus::NullPointer, "null handle") };
    let c = &c.inner;
    if !n_x.is_null() {
        *n_x = state_dim(c);
    }
    if !n_u.is_null() {
        *n_u = c.u_space.dim();
    }
    if !n_w.is_null() {
        *n_w = c.reduced.as_ref().map_or(0, |r| r.bw.ncols());
    }
    ScsynStatus::Ok
}

/// Robust lower bound on the satisfaction probability from `x0`.
///
/// # Safety
/// `c` must be a live handle, `x0` must hold `n` values and `value` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_controller_value_at(
    c: *const ScsynController,
    x0: *const f64,
    n: usize,
    value: *mut f64,
) -> ScsynStatus {
    guard(|| {
        let Some(c) = c.as_ref() else { return fail(ScsynStatus::NullPointer, "null handle") };
        if value.is_null() {
            return fail(ScsynStatus::NullPointer, "null output");
        }
        let x = match slice_arg(x0, n, state_dim(&c.inner)) {
            Ok(x) => x,
            Err(s) => return s,
        };
        *value = c.inner.value_at(&to_local(&c.inner, x));
        ScsynStatus::Ok
    })
}

/// Starts a run at `x0`. `seed` drives the noise coupling of reduced-order
/// controllers.
///
/// # Safety
/// `c` must be a live handle, `x0` must hold `n` values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_session_new(
    c: *const ScsynController,
    x0: *const f64,
    n: usize,
    seed: u64,
    out: *mut *mut ScsynSession,
) -> ScsynStatus {
    guard(|| {
        let Some(c) = c.as_ref() else { return fail(ScsynStatus::NullPointer, "null handle") };
        if out.is_null() {
            return fail(ScsynStatus::NullPointer, "null output");
        }
        let x = match slice_arg(x0, n, state_dim(&c.inner)) {
            Ok(x) => x,
            Err(s) => return s,
        };
        let state = c.inner.reset(&to_local(&c.inner, x));
        *out = Box::into_raw(Box::new(ScsynSession {
            controller: Arc::clone(&c.inner),
            state,
            last: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }));
        ScsynStatus::Ok
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scsyn_session_free(s: *mut ScsynSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Input for the measured state `x`, written to `u[0..m]`. `clamped` is set
/// to 1 when the input had to be clipped to the input box.
///
/// # Safety
/// `s` must be a live handle, `x` must hold `n` values and `u` room for `m`.
#[no_mangle]
pub unsafe extern "C" fn scsyn_session_input(
    s: *mut ScsynSession,
    x: *const f64,
    n: usize,
    u: *mut f64,
    m: usize,
    clamped: *mut c_int,
) -> ScsynStatus {
    guard(|| {
        let Some(s) = s.as_mut() else { return fail(ScsynStatus::NullPointer, "null handle") };
        let c = Arc::clone(&s.controller);
        let x = match slice_arg(x, n, state_dim(&c)) {
            Ok(x) => to_local(&c, x),
            Err(st) => return st,
        };
        let nu = c.u_space.dim();
        if m != nu {
            return fail(ScsynStatus::Dimension, format!("expected {nu} inputs, got {m}"));
        }
        if u.is_null() {
            return fail(ScsynStatus::NullPointer, "null output");
        }
        let o = c.step(&mut s.state, &x);
        let out = std::slice::from_raw_parts_mut(u, m);
        for (j, v) in out.iter_mut().enumerate() {
            *v = o.u[j] + c.shift.as_ref().map_or(0.0, |r| r.u_ss[j]);
        }
        if !clamped.is_null() {
            *clamped = c_int::from(o.clamped);
        }
        s.last = Some((Vect::from_vec(x), o.u_r));
        ScsynStatus::Ok
    })
}

/// Advances the session on the next measured state. Reduced-order
/// controllers also need the normalized (standard normal) disturbance `w`
/// that drove the step; others accept a null `w` with `n_w = 0`.
///
/// # Safety
/// `s` must be a live handle, `x_next` must hold `n` values and `w` `n_w`.
#[no_mangle]
pub unsafe extern "C" fn scsyn_session_observe(
    s: *mut ScsynSession,
    x_next: *const f64,
    n: usize,
    w: *const f64,
    n_w: usize,
) -> ScsynStatus {
    guard(|| {
        let Some(s) = s.as_mut() else { return fail(ScsynStatus::NullPointer, "null handle") };
        let c = Arc::clone(&s.controller);
        let x_next = match slice_arg(x_next, n, state_dim(&c)) {
            Ok(x) => to_local(&c, x),
            Err(st) => return st,
        };
        if let Some(red) = &c.reduced {
            let w = match slice_arg(w, n_w, red.bw.ncols()) {
                Ok(w) => Vect::from_column_slice(w),
                Err(_) => return fail(ScsynStatus::MissingNoise, "reduced-order controller needs the disturbance sample"),
            };
            let Some((x, u_r)) = s.last.take() else {
                return fail(ScsynStatus::Internal, "observe called before input");
            };
            c.advance_reduced(&mut s.state, x.as_slice(), &u_r, &w, &mut s.rng);
        } else {
            s.last = None;
        }
        c.observe(&mut s.state, &x_next);
        ScsynStatus::Ok
    })
}

/// Current DFA state and flags: `accepting` once the specification holds,
/// `breach` once the simulation relation was left.
///
/// # Safety
/// `s` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn scsyn_session_status(
    s: *const ScsynSession,
    q: *mut usize,
    accepting: *mut c_int,
    breach: *mut c_int,
) -> ScsynStatus {
    let Some(s) = s.as_ref() else { return fail(ScsynStatus::NullPointer, "null handle") };
    if !q.is_null() {
        *q = s.state.q;
    }
    if !accepting.is_null() {
        *accepting = c_int::from(s.controller.is_accepting(&s.state));
    }
    if !breach.is_null() {
        *breach = c_int::from(s.state.breach);
    }
    ScsynStatus::Ok
}
