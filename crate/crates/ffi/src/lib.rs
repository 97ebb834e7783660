//! C ABI over the shepherd library: opaque configuration, run and problem
//! handles, integer status codes and a thread-local last-error message.
//!
//! Every function returning `int32_t` reports one of the `SHEPHERD_*` codes.
//! Handles are created by `*_new`/`*_from_*` functions and released with the
//! matching `*_free`; passing a freed handle is undefined behaviour.
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the stated length: strings
//! NUL-terminated, buffers of `len` doubles, handles from this library.
//! Null is reported as `SHEPHERD_NULL_POINTER`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use shepherd::harness::config::apply_override;
use shepherd::harness::run::{control_layout, execute, initial_density, sample_particles, RunOutcome};
use shepherd::harness::{run_experiment, Level, RunConfig};
use shepherd::meanfield::{MfConfig, MfProblem};
use shepherd::micro::MicroProblem;
use shepherd::model::{moments, ControlSchedule, CostQuadrature};
use shepherd::optimize::ReducedProblem;
use shepherd::Error;

pub const SHEPHERD_OK: i32 = 0;
pub const SHEPHERD_NULL_POINTER: i32 = 1;
pub const SHEPHERD_INVALID_ARGUMENT: i32 = 2;
pub const SHEPHERD_CONFIG: i32 = 3;
pub const SHEPHERD_CFL: i32 = 4;
pub const SHEPHERD_NUMERICAL: i32 = 5;
pub const SHEPHERD_BUDGET: i32 = 6;
pub const SHEPHERD_IO: i32 = 7;
pub const SHEPHERD_BUFFER_TOO_SMALL: i32 = 8;
pub const SHEPHERD_PANIC: i32 = 9;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::Config(_) => SHEPHERD_CONFIG,
        Error::Cfl(_) => SHEPHERD_CFL,
        Error::InvalidInput(_) | Error::Shape(_) => SHEPHERD_INVALID_ARGUMENT,
        Error::NonFinite { .. } | Error::NegativeMass { .. } => SHEPHERD_NUMERICAL,
        Error::Budget { .. } => SHEPHERD_BUDGET,
        Error::Record(_) | Error::Snapshot { .. } | Error::Io(_) | Error::Json(_) => SHEPHERD_IO,
    }
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(code_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SHEPHERD_NULL_POINTER, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SHEPHERD_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SHEPHERD_PANIC
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SHEPHERD_INVALID_ARGUMENT, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies `src` into `dst` when it fits; `needed` always receives the length.
unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize, needed: *mut usize) -> Result<(), Failure> {
    if !needed.is_null() {
        *needed = src.len();
    }
    if dst.is_null() {
        return if len == 0 { Ok(()) } else { Err(null("buffer")) };
    }
    if len < src.len() {
        return Err(Failure(
            SHEPHERD_BUFFER_TOO_SMALL,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn shepherd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn shepherd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Resolved run configuration.
pub struct ShepherdConfig(RunConfig);

/// Default configuration.
#[no_mangle]
pub unsafe extern "C" fn shepherd_config_new(out: *mut *mut ShepherdConfig) -> i32 {
    guard(|| put(out, ShepherdConfig(RunConfig::load(None, &[])?)))
}

/// Configuration parsed from TOML text; unknown keys are an error.
#[no_mangle]
pub unsafe extern "C" fn shepherd_config_from_toml(toml_text: *const c_char, out: *mut *mut ShepherdConfig) -> i32 {
    guard(|| {
        let t = text(toml_text, "toml_text")?;
        put(out, ShepherdConfig(RunConfig::from_toml(t)?.resolved()?))
    })
}

/// Applies one `section.key=value` assignment; the handle is unchanged when
/// the result does not validate.
#[no_mangle]
pub unsafe extern "C" fn shepherd_config_set(config: *mut ShepherdConfig, assignment: *const c_char) -> i32 {
    guard(|| {
        let c = handle_mut(config, "config")?;
        let a = text(assignment, "assignment")?;
        let mut table: toml::Table = toml::from_str(&c.0.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        apply_override(&mut table, a)?;
        c.0 = RunConfig::from_table(table)?.resolved()?;
        Ok(())
    })
}

/// Resolved configuration as TOML; release with `shepherd_string_free`.
#[no_mangle]
pub unsafe extern "C" fn shepherd_config_to_toml(config: *const ShepherdConfig, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let c = handle(config, "config")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = CString::new(c.0.to_toml())
            .map_err(|e| Failure(SHEPHERD_INVALID_ARGUMENT, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shepherd_config_free(config: *mut ShepherdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

#[no_mangle]
pub unsafe extern "C" fn shepherd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Finished experiment.
pub struct ShepherdRun(RunOutcome);

/// Moments and cost parts at one solver node.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ShepherdNode {
    pub t: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub variance: f64,
    pub mass: f64,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
}

/// Runs the configured experiment in memory. When `output_dir` is not null
/// the artifacts and manifest are written there as well.
#[no_mangle]
pub unsafe extern "C" fn shepherd_run(
    config: *const ShepherdConfig,
    output_dir: *const c_char,
    out: *mut *mut ShepherdRun,
) -> i32 {
    guard(|| {
        let c = handle(config, "config")?;
        let outcome = if output_dir.is_null() {
            execute(&c.0, &mut |_| Ok(()))?
        } else {
            run_experiment(&c.0, Path::new(text(output_dir, "output_dir")?))?.1
        };
        put(out, ShepherdRun(outcome))
    })
}

#[no_mangle]
pub unsafe extern "C" fn shepherd_run_node_count(run: *const ShepherdRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.nodes.len())
}

#[no_mangle]
pub unsafe extern "C" fn shepherd_run_node(run: *const ShepherdRun, index: usize, out: *mut ShepherdNode) -> i32 {
    guard(|| {
        let r = handle(run, "run")?;
        let n = r.0.nodes.get(index).ok_or_else(|| {
            Failure(
                SHEPHERD_INVALID_ARGUMENT,
                format!("node {index} out of range ({} nodes)", r.0.nodes.len()),
            )
        })?;
        let o = handle_mut(out, "out")?;
        *o = ShepherdNode {
            t: n.t,
            mean_x: n.mean[0],
            mean_y: n.mean[1],
            variance: n.variance,
            mass: n.mass,
            j1: n.parts.j1,
            j2: n.parts.j2,
            j3: n.parts.j3,
        };
        Ok(())
    })
}

/// Glued control, flat `slices × agents × 2`. Call with a null buffer to
/// query the length through `needed`.
#[no_mangle]
pub unsafe extern "C" fn shepherd_run_control(
    run: *const ShepherdRun,
    buffer: *mut f64,
    len: usize,
    needed: *mut usize,
) -> i32 {
    guard(|| copy_out(handle(run, "run")?.0.control.values(), buffer, len, needed))
}

#[no_mangle]
pub unsafe extern "C" fn shepherd_run_free(run: *mut ShepherdRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

enum Inner {
    Micro(MicroProblem),
    Meanfield(MfProblem),
}

/// Reduced cost over the full horizon of a configuration, for driving an
/// external optimizer.
pub struct ShepherdProblem {
    inner: Inner,
    layout: ControlSchedule,
}

impl ShepherdProblem {
    fn reduced(&mut self) -> &mut dyn ReducedProblem {
        match &mut self.inner {
            Inner::Micro(p) => p,
            Inner::Meanfield(p) => p,
        }
    }

    fn control(&self, values: *const f64, len: usize) -> Result<ControlSchedule, Failure> {
        if values.is_null() {
            return Err(null("control"));
        }
        let want = self.layout.values().len();
        if len != want {
            return Err(Failure(
                SHEPHERD_INVALID_ARGUMENT,
                format!("control has {len} values, {want} expected"),
            ));
        }
        let v = unsafe { std::slice::from_raw_parts(values, len) }.to_vec();
        Ok(self.layout.with_values(v)?)
    }
}

#[no_mangle]
pub unsafe extern "C" fn shepherd_problem_new(config: *const ShepherdConfig, out: *mut *mut ShepherdProblem) -> i32 {
    guard(|| {
        let c = &handle(config, "config")?.0;
        c.validate()?;
        let layout = control_layout(c)?;
        let inner = match c.run.level {
            Level::Micro => {
                let s = sample_particles(c)?;
                let (_, v0) = moments(&s.positions, 2);
                Inner::Micro(MicroProblem::new(
                    s,
                    c.model(),
                    c.weights(v0),
                    layout.clone(),
                    c.micro.steps_per_slice,
                    CostQuadrature::Trapezoid,
                )?)
            }
            Level::Meanfield => {
                let s = initial_density(c)?;
                let v0 = s.field.moments().variance;
                let mut mf = MfConfig::new(c.grid()?, c.model());
                mf.steps_per_slice = c.meanfield.steps_per_slice;
                mf.storage = c.storage();
                mf.transport = c.meanfield.transport;
                Inner::Meanfield(MfProblem::new(
                    s,
                    mf,
                    c.weights(v0),
                    layout.clone(),
                    CostQuadrature::Trapezoid,
                )?)
            }
        };
        put(out, ShepherdProblem { inner, layout })
    })
}

/// Number of control values, `slices × agents × 2`.
#[no_mangle]
pub unsafe extern "C" fn shepherd_problem_control_len(problem: *const ShepherdProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.layout.values().len())
}

/// `Ĵ(u)` for a control of exactly `shepherd_problem_control_len` values.
#[no_mangle]
pub unsafe extern "C" fn shepherd_problem_cost(
    problem: *mut ShepherdProblem,
    control: *const f64,
    len: usize,
    cost: *mut f64,
) -> i32 {
    guard(|| {
        let p = handle_mut(problem, "problem")?;
        let u = p.control(control, len)?;
        let j = p.reduced().cost(&u)?.total();
        *handle_mut(cost, "cost")? = j;
        Ok(())
    })
}

/// Adjoint gradient of `Ĵ` at `control`, written into `gradient` (same length).
/// Entries are the partial derivatives with respect to the buffer entries,
/// so `Σ gradient[i]·d[i]` is the directional derivative along `d`.
#[no_mangle]
pub unsafe extern "C" fn shepherd_problem_gradient(
    problem: *mut ShepherdProblem,
    control: *const f64,
    len: usize,
    gradient: *mut f64,
) -> i32 {
    guard(|| {
        let p = handle_mut(problem, "problem")?;
        let u = p.control(control, len)?;
        let g = p.reduced().gradient(&u)?;
        let w = g.agents() * g.dim();
        let partials: Vec<f64> = g.values().iter().enumerate().map(|(i, v)| v * g.slice_len(i / w)).collect();
        copy_out(&partials, gradient, len, ptr::null_mut())
    })
}

#[no_mangle]
pub unsafe extern "C" fn shepherd_problem_free(problem: *mut ShepherdProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}
