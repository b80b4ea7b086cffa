use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ddmpc_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ddmpc_last_error_message()) }.to_string_lossy().into_owned()
}

fn experiment(toml: &str) -> *mut DdmpcExperiment {
    let text = CString::new(toml).unwrap();
    let mut exp = ptr::null_mut();
    assert_eq!(ddmpc_experiment_from_toml(text.as_ptr(), &mut exp), DdmpcStatus::Ok, "{}", last_error());
    exp
}

const SCALAR: &str = "[scenario]\nname = \"scalar\"\nsteps = 20\n";

#[test]
fn scalar_controller_runs_until_static() {
    let exp = experiment(SCALAR);
    let (mut n, mut m) = (0, 0);
    assert_eq!(ddmpc_experiment_dims(exp, &mut n, &mut m), DdmpcStatus::Ok);
    assert_eq!((n, m), (1, 1));

    let mut data = ptr::null_mut();
    assert_eq!(ddmpc_data_collect(exp, &mut data), DdmpcStatus::Ok);
    let mut len = 0;
    assert_eq!(ddmpc_data_len(data, &mut len), DdmpcStatus::Ok);
    assert_eq!(len, 20);

    let mut ctrl = ptr::null_mut();
    assert_eq!(ddmpc_controller_new(exp, data, DdmpcScheme::Robust, &mut ctrl), DdmpcStatus::Ok, "{}", last_error());
    let mut gamma = 0.0;
    assert_eq!(ddmpc_controller_gamma(ctrl, &mut gamma), DdmpcStatus::InvalidArgument);

    let mut x = [0.0];
    assert_eq!(ddmpc_experiment_x0(exp, x.as_mut_ptr(), 1), DdmpcStatus::Ok);
    let mut mode = DdmpcMode::Receding;
    for _ in 0..20 {
        let mut u = [0.0];
        assert_eq!(ddmpc_controller_step(ctrl, x.as_ptr(), 1, u.as_mut_ptr(), 1), DdmpcStatus::Ok, "{}", last_error());
        assert!(u[0].abs() <= 2.0 + 1e-6, "input {u:?} outside |u| <= 2");
        let mut next = [0.0];
        assert_eq!(ddmpc_experiment_plant_step(exp, x.as_ptr(), u.as_ptr(), ptr::null(), next.as_mut_ptr()), DdmpcStatus::Ok);
        x = next;
        assert_eq!(ddmpc_controller_mode(ctrl, &mut mode), DdmpcStatus::Ok);
    }
    assert_eq!(mode, DdmpcMode::Static);
    assert!(x[0].abs() < 1.0);
    assert_eq!(ddmpc_controller_gamma(ctrl, &mut gamma), DdmpcStatus::Ok);
    assert!(gamma > 0.0);
    let mut steps = 0;
    assert_eq!(ddmpc_controller_steps(ctrl, &mut steps), DdmpcStatus::Ok);
    assert_eq!(steps, 20);

    ddmpc_controller_free(ctrl);
    ddmpc_data_free(data);
    ddmpc_experiment_free(exp);
}

#[test]
fn consistency_set_contains_true_model_and_shrinks() {
    // x1 = 1.1·1 + 0.5·1 exactly, noise bound 0.01.
    let (u, x, g) = ([1.0], [1.0, 1.6], [1e4]);
    let mut data = ptr::null_mut();
    assert_eq!(ddmpc_data_new(1, 1, 1, u.as_ptr(), x.as_ptr(), g.as_ptr(), &mut data), DdmpcStatus::Ok);
    let mut set = ptr::null_mut();
    assert_eq!(ddmpc_set_new(data, DdmpcMultiplierMode::Full, &mut set), DdmpcStatus::Ok);
    let mut inside = false;
    assert_eq!(ddmpc_set_contains(set, [1.1].as_ptr(), [0.5].as_ptr(), &mut inside), DdmpcStatus::Ok);
    assert!(inside);
    // (1.6, 0) explains the first sample but not x⁺ = 1.1·(-1) + 0.5·1 = -0.6
    assert_eq!(ddmpc_set_contains(set, [1.6].as_ptr(), [0.0].as_ptr(), &mut inside), DdmpcStatus::Ok);
    assert!(inside);
    assert_eq!(ddmpc_set_push(set, [-1.0].as_ptr(), [1.0].as_ptr(), [-0.6].as_ptr()), DdmpcStatus::Ok);
    assert_eq!(ddmpc_set_contains(set, [1.6].as_ptr(), [0.0].as_ptr(), &mut inside), DdmpcStatus::Ok);
    assert!(!inside);
    assert_eq!(ddmpc_set_contains(set, [1.1].as_ptr(), [0.5].as_ptr(), &mut inside), DdmpcStatus::Ok);
    assert!(inside);
    ddmpc_set_free(set);
    ddmpc_data_free(data);
}

#[test]
fn errors_set_codes_and_messages() {
    let mut exp = ptr::null_mut();
    assert_eq!(ddmpc_experiment_builtin(ptr::null(), &mut exp), DdmpcStatus::NullPointer);
    assert!(last_error().contains("name"));
    assert!(exp.is_null());

    let bad = CString::new("pendulum").unwrap();
    assert_eq!(ddmpc_experiment_builtin(bad.as_ptr(), &mut exp), DdmpcStatus::ConfigError);
    assert!(last_error().contains("pendulum"), "{}", last_error());

    let text = CString::new("[mpc]\nhorizon = 3\n").unwrap();
    assert_eq!(ddmpc_experiment_from_toml(text.as_ptr(), &mut exp), DdmpcStatus::ConfigError);

    // c below λ_min(Q) cannot be feasible
    let low = CString::new("[scenario]\nname = \"scalar\"\n[mpc]\nc = 0.5\n").unwrap();
    assert_eq!(ddmpc_experiment_from_toml(low.as_ptr(), &mut exp), DdmpcStatus::InitialInfeasible);

    let g = [0.0];
    let mut data = ptr::null_mut();
    assert_eq!(ddmpc_data_new(1, 1, 1, [1.0].as_ptr(), [0.0, 1.0].as_ptr(), g.as_ptr(), &mut data), DdmpcStatus::InvalidMatrix);
    assert_eq!(ddmpc_data_new(1, 1, 0, ptr::null(), ptr::null(), ptr::null(), &mut data), DdmpcStatus::InvalidArgument);

    let exp = experiment(SCALAR);
    let mut x0 = [0.0; 2];
    assert_eq!(ddmpc_experiment_x0(exp, x0.as_mut_ptr(), 2), DdmpcStatus::DimensionMismatch);
    assert!(last_error().contains("1 states"));
    assert_eq!(ddmpc_experiment_x0(exp, x0.as_mut_ptr(), 1), DdmpcStatus::Ok);
    assert_eq!(last_error(), "");
    ddmpc_experiment_free(exp);

    // freeing null is a no-op
    ddmpc_experiment_free(ptr::null_mut());
    ddmpc_controller_free(ptr::null_mut());
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ddmpc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ddmpc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.strip_prefix("pub extern \"C\" fn "))
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for f in &exports {
        assert!(text.contains(&format!("{f}(")), "{f} missing from the header");
    }
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&header).output()
        else {
            eprintln!("{compiler} not available; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
