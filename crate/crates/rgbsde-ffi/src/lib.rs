//! C ABI over the solver: catalog lookup, TOML-configured problems, solves,
//! and summary statistics, all behind opaque handles.
//!
//! Conventions:
//!
//! * Every fallible call returns [`RgbsdeStatus`]; `RGBSDE_STATUS_OK` is 0.
//! * On failure a thread-local message is set; fetch it with
//!   [`rgbsde_last_error`].
//! * Handles are created and released by this library only (`_free` calls
//!   accept null). Strings are NUL-terminated UTF-8.
//! * A solve is deterministic in (problem, params) for a fixed build.

use std::cell::RefCell;
use std::ffi::CStr;
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rgbsde::catalog::{self, CatalogProblem};
use rgbsde::cli::CliError;
use rgbsde::config::parse_config;
use rgbsde::estimates::audit_skorokhod;
use rgbsde::forward_sde::{simulate_reflected, ReflectionScheme};
use rgbsde::models::TimeGrid;
use rgbsde::solver::{solve, SolutionBundle, SolveMethod, SolveOptions};
use rgbsde::util;

/// Status code for every fallible entry point.
#[repr(u32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RgbsdeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The named problem is not in the catalog.
    UnknownProblem = 3,
    /// Configuration or parameters failed validation.
    InvalidArgument = 4,
    /// The solve started but broke down numerically.
    NumericFailure = 5,
    /// The caller's buffer cannot hold the result.
    BufferTooSmall = 6,
    /// An index was outside the stored solution.
    OutOfRange = 7,
    /// An internal invariant failed; the handle state is unspecified.
    Panic = 8,
}

/// Solve method selector; store the value in
/// [`RgbsdeSolveParams::method`].
#[repr(u32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RgbsdeMethod {
    /// Hard projection onto the obstacle at every step.
    Reflected = 0,
    /// Penalization with strength [`RgbsdeSolveParams::penalty`].
    Penalized = 1,
}

/// Solve parameters. Zero `paths` or `steps` means the problem default.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct RgbsdeSolveParams {
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    /// One of the `RgbsdeMethod` values.
    pub method: u32,
    /// Penalty strength; only read when `method` selects penalization.
    pub penalty: f64,
}

/// Summary of a solved problem.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct RgbsdeStats {
    /// Mean initial value across paths.
    pub y0_mean: f64,
    /// Regression-residual standard error of `y0_mean`.
    pub y0_se: f64,
    /// Mean accumulated push `K_T`.
    pub k_t_mean: f64,
    /// Worst pathwise `|sum (Y - S) dK|`; 0 exactly for hard reflection.
    pub skorokhod_score: f64,
    pub paths: usize,
    pub steps: usize,
}

/// Opaque problem handle.
pub struct RgbsdeProblem {
    inner: CatalogProblem,
}

/// Opaque solution handle.
pub struct RgbsdeSolution {
    inner: SolutionBundle,
    stats: RgbsdeStats,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(msg: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg.into());
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().clear());
}

/// Copies the last error message for the calling thread into `buf` as a
/// NUL-terminated string (truncating if needed) and returns the full length
/// in bytes including the terminator; 0 means no pending error. `buf` may be
/// null to query the length alone.
#[no_mangle]
pub extern "C" fn rgbsde_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        if msg.is_empty() {
            return 0;
        }
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        msg.len() + 1
    })
}

fn guard(body: impl FnOnce() -> RgbsdeStatus) -> RgbsdeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            RgbsdeStatus::Panic
        }
    }
}

/// Classifies an error by the same rule the command line uses for its exit
/// codes, after recording its message.
fn classify(e: impl Into<CliError> + std::fmt::Display) -> RgbsdeStatus {
    set_last_error(format!("{e}"));
    match e.into() {
        CliError::Validation(_) => RgbsdeStatus::InvalidArgument,
        _ => RgbsdeStatus::NumericFailure,
    }
}

fn copy_str(s: &str, buf: *mut c_char, cap: usize) -> RgbsdeStatus {
    if buf.is_null() {
        set_last_error("output buffer is null");
        return RgbsdeStatus::NullArgument;
    }
    if cap < s.len() + 1 {
        set_last_error(format!("buffer of {cap} bytes cannot hold {} + NUL", s.len()));
        return RgbsdeStatus::BufferTooSmall;
    }
    unsafe {
        std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
        *buf.add(s.len()) = 0;
    }
    RgbsdeStatus::Ok
}

unsafe fn read_cstr<'a>(p: *const c_char) -> Result<&'a str, RgbsdeStatus> {
    if p.is_null() {
        set_last_error("string argument is null");
        return Err(RgbsdeStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_last_error("string argument is not valid UTF-8");
        RgbsdeStatus::InvalidUtf8
    })
}

/// Number of named problems in the catalog.
#[no_mangle]
pub extern "C" fn rgbsde_catalog_count() -> usize {
    catalog::all().len()
}

/// Copies the name of catalog entry `index` into `buf` (NUL-terminated).
#[no_mangle]
pub extern "C" fn rgbsde_catalog_name(
    index: usize,
    buf: *mut c_char,
    cap: usize,
) -> RgbsdeStatus {
    guard(|| {
        clear_last_error();
        let entries = catalog::all();
        match entries.get(index) {
            Some(p) => copy_str(p.name, buf, cap),
            None => {
                set_last_error(format!(
                    "catalog index {index} out of range ({} entries)",
                    entries.len()
                ));
                RgbsdeStatus::OutOfRange
            }
        }
    })
}

/// Opens a catalog problem by name.
#[no_mangle]
pub extern "C" fn rgbsde_problem_open(
    name: *const c_char,
    out: *mut *mut RgbsdeProblem,
) -> RgbsdeStatus {
    guard(|| {
        clear_last_error();
        if out.is_null() {
            set_last_error("output handle pointer is null");
            return RgbsdeStatus::NullArgument;
        }
        let name = match unsafe { read_cstr(name) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match catalog::by_name(name) {
            Some(inner) => {
                unsafe { *out = Box::into_raw(Box::new(RgbsdeProblem { inner })) };
                RgbsdeStatus::Ok
            }
            None => {
                set_last_error(format!("unknown catalog problem '{name}'"));
                RgbsdeStatus::UnknownProblem
            }
        }
    })
}

/// Builds a problem from configuration text (the same TOML format the
/// command line reads; the `[run]` section is ignored here).
#[no_mangle]
pub extern "C" fn rgbsde_problem_from_toml(
    text: *const c_char,
    out: *mut *mut RgbsdeProblem,
) -> RgbsdeStatus {
    guard(|| {
        clear_last_error();
        if out.is_null() {
            set_last_error("output handle pointer is null");
            return RgbsdeStatus::NullArgument;
        }
        let text = match unsafe { read_cstr(text) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let file = match parse_config(text) {
            Ok(f) => f,
            Err(e) => return classify(e),
        };
        match file.build_problem() {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(RgbsdeProblem { inner })) };
                RgbsdeStatus::Ok
            }
            Err(e) => classify(e),
        }
    })
}

/// Releases a problem handle; null is a no-op.
#[no_mangle]
pub extern "C" fn rgbsde_problem_free(problem: *mut RgbsdeProblem) {
    if !problem.is_null() {
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// Default parameters: seed 42, problem-default paths and steps, hard
/// reflection.
#[no_mangle]
pub extern "C" fn rgbsde_solve_params_default() -> RgbsdeSolveParams {
    RgbsdeSolveParams {
        seed: 42,
        paths: 0,
        steps: 0,
        method: RgbsdeMethod::Reflected as u32,
        penalty: 100.0,
    }
}

/// Simulates the forward paths and runs the backward solve. `params` may be
/// null for defaults.
#[no_mangle]
pub extern "C" fn rgbsde_solve(
    problem: *const RgbsdeProblem,
    params: *const RgbsdeSolveParams,
    out: *mut *mut RgbsdeSolution,
) -> RgbsdeStatus {
    guard(|| {
        clear_last_error();
        if problem.is_null() || out.is_null() {
            set_last_error("problem and output pointers must be non-null");
            return RgbsdeStatus::NullArgument;
        }
        let p = unsafe { &(*problem).inner };
        let params = if params.is_null() {
            rgbsde_solve_params_default()
        } else {
            unsafe { *params }
        };

        let method = match params.method {
            m if m == RgbsdeMethod::Reflected as u32 => SolveMethod::Reflected,
            m if m == RgbsdeMethod::Penalized as u32 => {
                SolveMethod::Penalized { strength: params.penalty }
            }
            other => {
                set_last_error(format!("unknown method selector {other}"));
                return RgbsdeStatus::InvalidArgument;
            }
        };
        let grid = if params.steps == 0 {
            p.grid
        } else {
            match TimeGrid::new(p.grid.t_max, params.steps) {
                Ok(g) => g,
                Err(e) => return classify(e),
            }
        };
        let paths = if params.paths == 0 { p.default_paths } else { params.paths };

        let bundle = match simulate_reflected(
            &p.domain,
            &p.drift,
            &p.diffusion,
            &p.x0,
            &grid,
            paths,
            util::subseed(params.seed, "forward"),
            ReflectionScheme::Projection,
        ) {
            Ok(b) => b,
            Err(e) => return classify(e),
        };
        let sol = match solve(&bundle, &p.driver, &p.obstacle, method, &SolveOptions::default())
        {
            Ok(s) => s,
            Err(e) => return classify(e),
        };
        let stats = RgbsdeStats {
            y0_mean: sol.y0_mean,
            y0_se: sol.y0_se,
            k_t_mean: sol.k_t_mean(),
            skorokhod_score: audit_skorokhod(&sol).score,
            paths: sol.paths,
            steps: sol.grid.steps,
        };
        let handle = RgbsdeSolution { inner: sol, stats };
        unsafe { *out = Box::into_raw(Box::new(handle)) };
        RgbsdeStatus::Ok
    })
}

/// Copies the solve summary into `out`.
#[no_mangle]
pub extern "C" fn rgbsde_solution_stats(
    solution: *const RgbsdeSolution,
    out: *mut RgbsdeStats,
) -> RgbsdeStatus {
    guard(|| {
        clear_last_error();
        if solution.is_null() || out.is_null() {
            set_last_error("solution and output pointers must be non-null");
            return RgbsdeStatus::NullArgument;
        }
        unsafe { *out = (*solution).stats };
        RgbsdeStatus::Ok
    })
}

/// Value surface lookup: `Y` for `path` at time node `node`
/// (0 <= node <= steps).
#[no_mangle]
pub extern "C" fn rgbsde_solution_value(
    solution: *const RgbsdeSolution,
    path: usize,
    node: usize,
    out: *mut f64,
) -> RgbsdeStatus {
    guard(|| {
        clear_last_error();
        if solution.is_null() || out.is_null() {
            set_last_error("solution and output pointers must be non-null");
            return RgbsdeStatus::NullArgument;
        }
        let sol = unsafe { &(*solution).inner };
        if path >= sol.paths || node > sol.grid.steps {
            set_last_error(format!(
                "position (path {path}, node {node}) outside {} paths x {} nodes",
                sol.paths,
                sol.grid.steps + 1
            ));
            return RgbsdeStatus::OutOfRange;
        }
        unsafe { *out = sol.y_at(path, node) };
        RgbsdeStatus::Ok
    })
}

/// Releases a solution handle; null is a no-op.
#[no_mangle]
pub extern "C" fn rgbsde_solution_free(solution: *mut RgbsdeSolution) {
    if !solution.is_null() {
        drop(unsafe { Box::from_raw(solution) });
    }
}
