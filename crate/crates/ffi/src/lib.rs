//! C ABI for the `ddmpc` toolkit.
//!
//! Every object is an opaque heap handle created by a `*_new`-style function
//! and released with the matching `*_free`. Every fallible function returns a
//! [`DdmpcStatus`]; on failure a description is available from
//! [`ddmpc_last_error_message`] on the same thread. Matrices are passed as
//! row-major `double` arrays with explicit dimensions.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ddmpc::cli::{self, Experiment, ExperimentConfig};
use ddmpc::consistency::{ConsistencySet, MultiplierMode, MEMBER_TOL};
use ddmpc::controller::{self, ControllerState, Mode, Scheme};
use ddmpc::numerics::SymMatrix;
use ddmpc::plant::DataRecord;
use ddmpc::Error;
use nalgebra::{DMatrix, DVector};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdmpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    InvalidMatrix = 4,
    ConfigError = 5,
    InitialInfeasible = 6,
    SolverFailed = 7,
    Diverged = 8,
    Io = 9,
    Panic = 10,
}

/// Multiplier structure of a consistency set.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdmpcMultiplierMode {
    /// One multiplier per sample.
    Full = 0,
    /// One multiplier shared by all offline samples.
    Common = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdmpcScheme {
    Robust = 0,
    Adaptive = 1,
    StaticFromT0 = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdmpcMode {
    Receding = 0,
    Static = 1,
}

/// Resolved experiment: plant, weights, constraints and controller settings.
pub struct DdmpcExperiment(Experiment);

/// Offline input-state record.
pub struct DdmpcData(DataRecord);

/// Set of models consistent with the data.
pub struct DdmpcSet(ConsistencySet);

/// Receding-horizon controller bound to one experiment and data set.
pub struct DdmpcController {
    state: Option<ControllerState>,
    exp: Experiment,
    scheme: Scheme,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DdmpcStatus {
    match e {
        Error::DimError(_) => DdmpcStatus::DimensionMismatch,
        Error::InvalidMatrix(_) | Error::NotPsd { .. } => DdmpcStatus::InvalidMatrix,
        Error::ConfigError(_) | Error::Parse(_) => DdmpcStatus::ConfigError,
        Error::InitialInfeasible { .. } => DdmpcStatus::InitialInfeasible,
        Error::SolverFailed { .. } | Error::NoSolution(_) | Error::InvalidProblem(_) | Error::NotStabilizable { .. } => {
            DdmpcStatus::SolverFailed
        }
        Error::Diverged { .. } => DdmpcStatus::Diverged,
        Error::Io(_) => DdmpcStatus::Io,
        Error::NotInSet => DdmpcStatus::InvalidArgument,
    }
}

struct Failure(DdmpcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: DdmpcStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any error or panic, and converts it to a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DdmpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DdmpcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            DdmpcStatus::Panic
        }
    }
}

fn reference<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller passes either null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| fail(DdmpcStatus::NullPointer, format!("{name} is null")))
}

fn reference_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: as in `reference`, and the caller does not alias the handle.
    unsafe { p.as_mut() }.ok_or_else(|| fail(DdmpcStatus::NullPointer, format!("{name} is null")))
}

fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(DdmpcStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and NUL-terminated by contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(DdmpcStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DdmpcStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and at least `len` readable doubles by contract.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(fail(DdmpcStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: non-null and at least `len` writable doubles by contract.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn matrix(p: *const f64, rows: usize, cols: usize, name: &str) -> Result<DMatrix<f64>, Failure> {
    Ok(DMatrix::from_row_slice(rows, cols, slice(p, rows * cols, name)?))
}

fn out_ptr<'a, T>(out: *mut *mut T) -> Result<&'a mut *mut T, Failure> {
    // SAFETY: the caller passes a writable location for the new handle.
    unsafe { out.as_mut() }.ok_or_else(|| fail(DdmpcStatus::NullPointer, "output pointer is null"))
}

fn give<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    *out_ptr(out)? = Box::into_raw(Box::new(value));
    Ok(())
}

fn release<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn ddmpc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ddmpc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Built-in experiment (`"suspension"` or `"scalar"`) with default settings.
#[no_mangle]
pub extern "C" fn ddmpc_experiment_builtin(name: *const c_char, out: *mut *mut DdmpcExperiment) -> DdmpcStatus {
    guard(|| {
        out_ptr(out)?;
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.name = string(name, "name")?.to_string();
        give(out, DdmpcExperiment(cfg.resolve()?))
    })
}

/// Experiment from the text of a TOML configuration file.
#[no_mangle]
pub extern "C" fn ddmpc_experiment_from_toml(toml: *const c_char, out: *mut *mut DdmpcExperiment) -> DdmpcStatus {
    guard(|| {
        out_ptr(out)?;
        let cfg = ExperimentConfig::parse(string(toml, "toml")?)?;
        give(out, DdmpcExperiment(cfg.resolve()?))
    })
}

/// State and input dimensions of the experiment's plant.
#[no_mangle]
pub extern "C" fn ddmpc_experiment_dims(exp: *const DdmpcExperiment, n: *mut usize, m: *mut usize) -> DdmpcStatus {
    guard(|| {
        let exp = &reference(exp, "experiment")?.0;
        *reference_mut(n, "n")? = exp.scenario.plant.n();
        *reference_mut(m, "m")? = exp.scenario.plant.m();
        Ok(())
    })
}

/// Initial state of the experiment, written to `x0[0..n]`.
#[no_mangle]
pub extern "C" fn ddmpc_experiment_x0(exp: *const DdmpcExperiment, x0: *mut f64, n: usize) -> DdmpcStatus {
    guard(|| {
        let exp = &reference(exp, "experiment")?.0;
        let want = exp.scenario.plant.n();
        if n != want {
            return Err(fail(DdmpcStatus::DimensionMismatch, format!("x0 buffer has length {n}, the plant has {want} states")));
        }
        slice_mut(x0, n, "x0")?.copy_from_slice(exp.scenario.x0.as_slice());
        Ok(())
    })
}

/// Simulates the true plant to get one state update. `w` may be null for
/// zero noise.
#[no_mangle]
pub extern "C" fn ddmpc_experiment_plant_step(
    exp: *const DdmpcExperiment,
    x: *const f64,
    u: *const f64,
    w: *const f64,
    x_next: *mut f64,
) -> DdmpcStatus {
    guard(|| {
        let plant = &reference(exp, "experiment")?.0.scenario.plant;
        let (n, m) = (plant.n(), plant.m());
        let x = DVector::from_column_slice(slice(x, n, "x")?);
        let u = DVector::from_column_slice(slice(u, m, "u")?);
        let w = if w.is_null() { DVector::zeros(n) } else { DVector::from_column_slice(slice(w, n, "w")?) };
        slice_mut(x_next, n, "x_next")?.copy_from_slice(plant.step(&x, &u, &w).as_slice());
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn ddmpc_experiment_free(exp: *mut DdmpcExperiment) {
    release(exp);
}

/// Offline record generated from the experiment's plant and seed.
#[no_mangle]
pub extern "C" fn ddmpc_data_collect(exp: *const DdmpcExperiment, out: *mut *mut DdmpcData) -> DdmpcStatus {
    guard(|| {
        out_ptr(out)?;
        let exp = &reference(exp, "experiment")?.0;
        give(out, DdmpcData(cli::collect(exp)?))
    })
}

/// Record from measured data: `u` is m×t, `x` is n×(t+1) and `g` is the n×n
/// noise bound, all row-major.
#[no_mangle]
pub extern "C" fn ddmpc_data_new(
    n: usize,
    m: usize,
    t: usize,
    u: *const f64,
    x: *const f64,
    g: *const f64,
    out: *mut *mut DdmpcData,
) -> DdmpcStatus {
    guard(|| {
        out_ptr(out)?;
        if n == 0 || m == 0 || t == 0 {
            return Err(fail(DdmpcStatus::InvalidArgument, "n, m and t must be positive"));
        }
        let u = matrix(u, m, t, "u")?;
        let x = matrix(x, n, t + 1, "x")?;
        let g = SymMatrix::new(matrix(g, n, n, "g")?)?;
        give(out, DdmpcData(DataRecord::new(u, x, g)?))
    })
}

/// Number of samples `t` in the record.
#[no_mangle]
pub extern "C" fn ddmpc_data_len(data: *const DdmpcData, len: *mut usize) -> DdmpcStatus {
    guard(|| {
        *reference_mut(len, "len")? = reference(data, "data")?.0.len();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn ddmpc_data_free(data: *mut DdmpcData) {
    release(data);
}

/// Consistency set of all models that explain the record.
#[no_mangle]
pub extern "C" fn ddmpc_set_new(data: *const DdmpcData, mode: DdmpcMultiplierMode, out: *mut *mut DdmpcSet) -> DdmpcStatus {
    guard(|| {
        out_ptr(out)?;
        let mode = match mode {
            DdmpcMultiplierMode::Full => MultiplierMode::Full,
            DdmpcMultiplierMode::Common => MultiplierMode::Common,
        };
        give(out, DdmpcSet(ConsistencySet::build_offline(&reference(data, "data")?.0, mode)?))
    })
}

/// Whether the model `(A, B)` (row-major n×n and n×m) lies in the set.
#[no_mangle]
pub extern "C" fn ddmpc_set_contains(set: *const DdmpcSet, a: *const f64, b: *const f64, member: *mut bool) -> DdmpcStatus {
    guard(|| {
        let set = &reference(set, "set")?.0;
        let (n, m) = (set.n(), set.m());
        let inside = set.is_member(&matrix(a, n, n, "a")?, &matrix(b, n, m, "b")?, MEMBER_TOL)?;
        *reference_mut(member, "member")? = inside;
        Ok(())
    })
}

/// Adds the online sample `(x, u, x_next)`; the set can only shrink.
#[no_mangle]
pub extern "C" fn ddmpc_set_push(set: *mut DdmpcSet, x: *const f64, u: *const f64, x_next: *const f64) -> DdmpcStatus {
    guard(|| {
        let set = &mut reference_mut(set, "set")?.0;
        let (n, m) = (set.n(), set.m());
        let x = DVector::from_column_slice(slice(x, n, "x")?);
        let u = DVector::from_column_slice(slice(u, m, "u")?);
        let xn = DVector::from_column_slice(slice(x_next, n, "x_next")?);
        *set = set.push_online(&x, &u, &xn)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn ddmpc_set_free(set: *mut DdmpcSet) {
    release(set);
}

/// Controller for `exp` on the offline record `data`, using the experiment's
/// multiplier mode.
#[no_mangle]
pub extern "C" fn ddmpc_controller_new(
    exp: *const DdmpcExperiment,
    data: *const DdmpcData,
    scheme: DdmpcScheme,
    out: *mut *mut DdmpcController,
) -> DdmpcStatus {
    guard(|| {
        out_ptr(out)?;
        let exp = reference(exp, "experiment")?.0.clone();
        let set = ConsistencySet::build_offline(&reference(data, "data")?.0, exp.mpc.multiplier_mode)?;
        let scheme = match scheme {
            DdmpcScheme::Robust => Scheme::Robust,
            DdmpcScheme::Adaptive => Scheme::Adaptive,
            DdmpcScheme::StaticFromT0 => Scheme::StaticFromT0,
        };
        give(out, DdmpcController { state: Some(ControllerState::new(set)), exp, scheme })
    })
}

/// Computes the input `u[0..m]` for the measured state `x[0..n]`. A failed
/// solve leaves the controller unusable; later calls report that.
#[no_mangle]
pub extern "C" fn ddmpc_controller_step(
    ctrl: *mut DdmpcController,
    x: *const f64,
    n: usize,
    u: *mut f64,
    m: usize,
) -> DdmpcStatus {
    guard(|| {
        let ctrl = reference_mut(ctrl, "controller")?;
        let (pn, pm) = (ctrl.exp.scenario.plant.n(), ctrl.exp.scenario.plant.m());
        if n != pn || m != pm {
            return Err(fail(
                DdmpcStatus::DimensionMismatch,
                format!("buffers are {n} states / {m} inputs, the plant has {pn} / {pm}"),
            ));
        }
        let x = DVector::from_column_slice(slice(x, n, "x")?);
        let out = slice_mut(u, m, "u")?;
        let state = ctrl.state.take().ok_or_else(|| fail(DdmpcStatus::InvalidArgument, "controller failed earlier"))?;
        let (input, next) = controller::step(ctrl.scheme, state, &x, &ctrl.exp.mpc)?;
        out.copy_from_slice(input.as_slice());
        ctrl.state = Some(next);
        Ok(())
    })
}

/// Current mode of the controller.
#[no_mangle]
pub extern "C" fn ddmpc_controller_mode(ctrl: *const DdmpcController, mode: *mut DdmpcMode) -> DdmpcStatus {
    guard(|| {
        let state = controller_state(ctrl)?;
        *reference_mut(mode, "mode")? = match state.mode {
            Mode::Receding => DdmpcMode::Receding,
            Mode::Static => DdmpcMode::Static,
        };
        Ok(())
    })
}

/// Cost bound `γ` of the most recent solve. Fails with `InvalidArgument` if
/// no program has been solved yet.
#[no_mangle]
pub extern "C" fn ddmpc_controller_gamma(ctrl: *const DdmpcController, gamma: *mut f64) -> DdmpcStatus {
    guard(|| {
        let state = controller_state(ctrl)?;
        let g = state
            .last_certificate
            .as_ref()
            .map(|c| c.gamma)
            .ok_or_else(|| fail(DdmpcStatus::InvalidArgument, "no program solved yet"))?;
        *reference_mut(gamma, "gamma")? = g;
        Ok(())
    })
}

/// Number of controller steps taken so far.
#[no_mangle]
pub extern "C" fn ddmpc_controller_steps(ctrl: *const DdmpcController, steps: *mut usize) -> DdmpcStatus {
    guard(|| {
        *reference_mut(steps, "steps")? = controller_state(ctrl)?.step;
        Ok(())
    })
}

fn controller_state<'a>(ctrl: *const DdmpcController) -> Result<&'a ControllerState, Failure> {
    reference(ctrl, "controller")?
        .state
        .as_ref()
        .ok_or_else(|| fail(DdmpcStatus::InvalidArgument, "controller failed earlier"))
}

#[no_mangle]
pub extern "C" fn ddmpc_controller_free(ctrl: *mut DdmpcController) {
    release(ctrl);
}
