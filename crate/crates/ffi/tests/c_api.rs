use std::ffi::{CStr, CString};
use std::ptr;

use scsyn::config::preset;
use scsyn_ffi::*;

fn small_carpark() -> CString {
    let mut cfg = preset("carpark").unwrap();
    cfg.simulation = None;
    CString::new(cfg.to_toml().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = scsyn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn dfa_handle_runs_reach_avoid() {
    let f = CString::new("!p2 U p1").unwrap();
    let names = [CString::new("p1").unwrap(), CString::new("p2").unwrap()];
    let aps: Vec<*const i8> = names.iter().map(|s| s.as_ptr()).collect();
    let mut dfa = ptr::null_mut();
    unsafe {
        assert_eq!(scsyn_dfa_new(f.as_ptr(), aps.as_ptr(), 2, &mut dfa), ScsynStatus::Ok);
        let (mut n, mut q0, mut k) = (0, 0, 0);
        assert_eq!(scsyn_dfa_info(dfa, &mut n, &mut q0, &mut k), ScsynStatus::Ok);
        assert_eq!((n, k), (3, 2));
        let mut q = 0;
        assert_eq!(scsyn_dfa_step(dfa, q0, 0b01, &mut q), ScsynStatus::Ok);
        assert_eq!(scsyn_dfa_is_accepting(dfa, q), 1);
        assert_eq!(scsyn_dfa_step(dfa, q0, 0b10, &mut q), ScsynStatus::Ok);
        assert_eq!(scsyn_dfa_is_accepting(dfa, q), 0);
        assert_eq!(scsyn_dfa_step(dfa, q0, 4, &mut q), ScsynStatus::Dimension);
        assert_eq!(scsyn_dfa_is_accepting(dfa, 99), -1);
        scsyn_dfa_free(dfa);
    }
}

#[test]
fn parse_errors_set_the_message() {
    let f = CString::new("p1 U").unwrap();
    let names = [CString::new("p1").unwrap()];
    let aps: Vec<*const i8> = names.iter().map(|s| s.as_ptr()).collect();
    let mut dfa = ptr::null_mut();
    let st = unsafe { scsyn_dfa_new(f.as_ptr(), aps.as_ptr(), 1, &mut dfa) };
    assert_eq!(st, ScsynStatus::Spec);
    assert!(dfa.is_null());
    assert!(last_error().contains("syntax"));
    let st = unsafe { scsyn_dfa_new(ptr::null(), aps.as_ptr(), 1, &mut dfa) };
    assert_eq!(st, ScsynStatus::NullPointer);
}

#[test]
fn missing_bundle_is_an_io_error() {
    let p = CString::new("/nonexistent/controller.json").unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { scsyn_controller_load(p.as_ptr(), &mut c) }, ScsynStatus::Io);
    assert!(c.is_null());
}

#[test]
fn bad_config_maps_to_config_status() {
    let text = CString::new("name = \"x\"").unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { scsyn_controller_synthesize(text.as_ptr(), &mut c) }, ScsynStatus::Config);
}

#[test]
fn zero_epsilon_is_infeasible() {
    let mut cfg = preset("carpark").unwrap();
    cfg.abstraction.cells = vec![20, 20];
    cfg.similarity.epsilon = 1e-9;
    let text = CString::new(cfg.to_toml().unwrap()).unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { scsyn_controller_synthesize(text.as_ptr(), &mut c) }, ScsynStatus::Infeasible);
}

#[test]
fn session_drives_carpark_to_target() {
    let text = small_carpark();
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(scsyn_controller_synthesize(text.as_ptr(), &mut c), ScsynStatus::Ok, "{}", last_error());
        let (mut nx, mut nu, mut nw) = (0, 0, 9);
        scsyn_controller_dims(c, &mut nx, &mut nu, &mut nw);
        assert_eq!((nx, nu, nw), (2, 2, 0));
        let x0 = [-4.0, -5.0];
        let mut v = 0.0;
        assert_eq!(scsyn_controller_value_at(c, x0.as_ptr(), 2, &mut v), ScsynStatus::Ok);
        assert!(v > 0.5 && v <= 1.0, "{v}");
        assert_eq!(scsyn_controller_value_at(c, x0.as_ptr(), 3, &mut v), ScsynStatus::Dimension);

        let mut s = ptr::null_mut();
        assert_eq!(scsyn_session_new(c, x0.as_ptr(), 2, 7, &mut s), ScsynStatus::Ok);
        // The handle may be released while a session is alive.
        scsyn_controller_free(c);
        // Noiseless closed loop x⁺ = 0.9x + 0.7u.
        let mut x = x0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut u = [0.0; 2];
            let mut clamped = 0;
            assert_eq!(scsyn_session_input(s, x.as_ptr(), 2, u.as_mut_ptr(), 2, &mut clamped), ScsynStatus::Ok);
            assert!(u.iter().all(|v| v.abs() <= 1.0 + 1e-12));
            x = [0.9 * x[0] + 0.7 * u[0], 0.9 * x[1] + 0.7 * u[1]];
            assert_eq!(scsyn_session_observe(s, x.as_ptr(), 2, ptr::null(), 0), ScsynStatus::Ok);
            let (mut q, mut acc, mut breach) = (0, 0, 0);
            scsyn_session_status(s, &mut q, &mut acc, &mut breach);
            assert_eq!(breach, 0);
            if acc == 1 {
                accepted = true;
                break;
            }
        }
        assert!(accepted);
        scsyn_session_free(s);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/scsyn.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|r| r.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct ScsynSession ScsynSession;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"scsyn.h\"\nint main(void) { return scsyn_last_error() == 0 ? 0 : 1; }\n").unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
