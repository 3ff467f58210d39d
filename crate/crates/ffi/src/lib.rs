//! C ABI for `acll`.
//!
//! Every function returns an [`AcllStatus`]; on failure the message is kept
//! per thread and read with [`acll_last_error_message`]. Objects are opaque
//! handles created by `*_new`/`*_load` and released by the matching `*_free`.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use acll::boopt::{BoBudget, EvalCache, Evaluation};
use acll::config::{load_config, run_experiment, validate_config, ConfigError};
use acll::dual::DualSearchConfig;
use acll::net::{predict_labels, Matrix, Network, WeightMask};
use acll::AcllError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcllStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidSpec = 3,
    Shape = 4,
    InvalidTask = 5,
    Evaluation = 6,
    Conditioning = 7,
    Io = 8,
    Format = 9,
    Config = 10,
    Runtime = 11,
    Panic = 12,
}

impl From<&AcllError> for AcllStatus {
    fn from(e: &AcllError) -> Self {
        match e {
            AcllError::InvalidSpec(_) | AcllError::InvalidMultiplier(_) => AcllStatus::InvalidSpec,
            AcllError::Shape(_) => AcllStatus::Shape,
            AcllError::InvalidTask { .. } | AcllError::Sequencing(_) => AcllStatus::InvalidTask,
            AcllError::Evaluation { .. } | AcllError::External(_) => AcllStatus::Evaluation,
            AcllError::Conditioning { .. } => AcllStatus::Conditioning,
            AcllError::Io(_) => AcllStatus::Io,
            AcllError::Format(_) | AcllError::Json(_) => AcllStatus::Format,
            _ => AcllStatus::Runtime,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs were replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(status: AcllStatus, msg: impl AsRef<str>) -> AcllStatus {
    set_last_error(msg.as_ref());
    status
}

fn from_core(e: AcllError) -> AcllStatus {
    fail(AcllStatus::from(&e), e.to_string())
}

/// Runs `body`, converting panics into [`AcllStatus::Panic`].
fn guard(body: impl FnOnce() -> AcllStatus) -> AcllStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(AcllStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// Message of the last failure on this thread, or NULL if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn acll_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, AcllStatus> {
    if p.is_null() {
        return Err(fail(AcllStatus::NullPointer, format!("{what} is NULL")));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(AcllStatus::InvalidArgument, format!("{what} is not valid UTF-8"))),
    }
}

macro_rules! non_null {
    ($p:expr, $name:literal) => {
        if $p.is_null() {
            return fail(AcllStatus::NullPointer, concat!($name, " is NULL"));
        }
    };
}

// ---------------------------------------------------------------- network

/// Opaque network handle.
pub struct AcllNetwork(Network);

/// Creates a network with `layer_dims = [input, hidden.., classes]`.
///
/// # Safety
/// `dims` must point to `n_dims` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acll_network_new(
    dims: *const usize,
    n_dims: usize,
    seed: u64,
    out: *mut *mut AcllNetwork,
) -> AcllStatus {
    guard(|| {
        non_null!(dims, "dims");
        non_null!(out, "out");
        let dims = std::slice::from_raw_parts(dims, n_dims);
        match Network::new(dims, seed) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(AcllNetwork(net)));
                AcllStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// # Safety
/// `net` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn acll_network_free(net: *mut AcllNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acll_network_weight_count(net: *const AcllNetwork, out: *mut usize) -> AcllStatus {
    guard(|| {
        non_null!(net, "net");
        non_null!(out, "out");
        *out = (*net).0.len();
        AcllStatus::Ok
    })
}

/// Registers an extra output head for `task`.
///
/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn acll_network_register_head(net: *mut AcllNetwork, task: u32, class_count: usize) -> AcllStatus {
    guard(|| {
        non_null!(net, "net");
        match (*net).0.register_head(task, class_count) {
            Ok(_) => AcllStatus::Ok,
            Err(e) => from_core(e),
        }
    })
}

/// Writes the bit-exact binary form.
///
/// # Safety
/// `net` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn acll_network_save(net: *const AcllNetwork, path: *const c_char) -> AcllStatus {
    guard(|| {
        non_null!(net, "net");
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match std::fs::write(&path, (*net).0.to_bytes()) {
            Ok(()) => AcllStatus::Ok,
            Err(e) => fail(AcllStatus::Io, format!("{}: {e}", path.display())),
        }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acll_network_load(path: *const c_char, out: *mut *mut AcllNetwork) -> AcllStatus {
    guard(|| {
        non_null!(out, "out");
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => return fail(AcllStatus::Io, format!("{}: {e}", path.display())),
        };
        match Network::from_bytes(&bytes) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(AcllNetwork(net)));
                AcllStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Predicts labels for `rows` row-major inputs of width `cols` with every
/// weight active.
///
/// # Safety
/// `inputs` must hold `rows * cols` values and `out_labels` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn acll_network_predict(
    net: *const AcllNetwork,
    task: u32,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    out_labels: *mut usize,
) -> AcllStatus {
    guard(|| {
        non_null!(net, "net");
        non_null!(inputs, "inputs");
        non_null!(out_labels, "out_labels");
        let Some(len) = rows.checked_mul(cols) else {
            return fail(AcllStatus::InvalidArgument, "rows * cols overflows");
        };
        let net = &(*net).0;
        let batch = Matrix::from_vec(rows, cols, std::slice::from_raw_parts(inputs, len).to_vec());
        match predict_labels(net, &WeightMask::ones(net.len()), task, &batch) {
            Ok(labels) => {
                std::slice::from_raw_parts_mut(out_labels, rows).copy_from_slice(&labels);
                AcllStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

// ------------------------------------------------------------------ cache

/// Opaque evaluation cache handle.
pub struct AcllEvalCache(EvalCache);

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acll_eval_cache_new(out: *mut *mut AcllEvalCache) -> AcllStatus {
    guard(|| {
        non_null!(out, "out");
        *out = Box::into_raw(Box::new(AcllEvalCache(EvalCache::new())));
        AcllStatus::Ok
    })
}

/// # Safety
/// `cache` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn acll_eval_cache_free(cache: *mut AcllEvalCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// # Safety
/// `cache` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acll_eval_cache_len(cache: *const AcllEvalCache, out: *mut usize) -> AcllStatus {
    guard(|| {
        non_null!(cache, "cache");
        non_null!(out, "out");
        *out = (*cache).0.len();
        AcllStatus::Ok
    })
}

/// Writes one JSON object per entry, in evaluation order.
///
/// # Safety
/// `cache` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn acll_eval_cache_write_jsonl(cache: *const AcllEvalCache, path: *const c_char) -> AcllStatus {
    guard(|| {
        non_null!(cache, "cache");
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let file = match std::fs::File::create(&path) {
            Ok(f) => f,
            Err(e) => return fail(AcllStatus::Io, format!("{}: {e}", path.display())),
        };
        match (*cache).0.write_jsonl(std::io::BufWriter::new(file)) {
            Ok(()) => AcllStatus::Ok,
            Err(e) => from_core(e),
        }
    })
}

// ------------------------------------------------------------ dual search

/// Search settings; obtain defaults from [`acll_dual_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AcllDualConfig {
    pub epsilon: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub lambda_tol: f64,
    pub max_rounds: u32,
    pub n_init: u32,
    pub n_iter: u32,
    pub bo_seed: u64,
    pub ei_tolerance: f64,
    /// 0 selects the default cap of `8 * (n_init + n_iter)`.
    pub max_evaluations: u32,
}

impl From<&AcllDualConfig> for DualSearchConfig {
    fn from(c: &AcllDualConfig) -> Self {
        DualSearchConfig {
            epsilon: c.epsilon,
            lambda_lo: c.lambda_lo,
            lambda_hi: c.lambda_hi,
            lambda_tol: c.lambda_tol,
            max_rounds: c.max_rounds as usize,
            bo_budget: BoBudget {
                n_init: c.n_init as usize,
                n_iter: c.n_iter as usize,
                seed: c.bo_seed,
                ei_tolerance: c.ei_tolerance,
            },
            max_evaluations: (c.max_evaluations > 0).then_some(c.max_evaluations as usize),
        }
    }
}

#[no_mangle]
pub extern "C" fn acll_dual_config_default() -> AcllDualConfig {
    let d = DualSearchConfig::default();
    AcllDualConfig {
        epsilon: d.epsilon,
        lambda_lo: d.lambda_lo,
        lambda_hi: d.lambda_hi,
        lambda_tol: d.lambda_tol,
        max_rounds: d.max_rounds as u32,
        n_init: d.bo_budget.n_init as u32,
        n_iter: d.bo_budget.n_iter as u32,
        bo_seed: d.bo_budget.seed,
        ei_tolerance: d.bo_budget.ei_tolerance,
        max_evaluations: 0,
    }
}

/// Outcome of [`acll_select`] besides the chosen theta.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AcllSelectionInfo {
    pub size: f64,
    pub risk: f64,
    pub lambda_final: f64,
    /// 1 when no evaluated point met the constraint (theta is then all zeros).
    pub infeasible: c_int,
    pub converged: c_int,
    pub rounds: usize,
    pub evaluations: usize,
}

/// Measures `(size, risk)` at `theta[0..dim]`; returns 0 on success.
pub type AcllEvaluateFn = Option<
    unsafe extern "C" fn(user: *mut c_void, theta: *const f64, dim: usize, out_size: *mut f64, out_risk: *mut f64) -> c_int,
>;

/// Chooses the most compressed theta whose risk stays within
/// `reference_risk + epsilon`. `cache` may be NULL; when given, it is reused
/// and extended. `out_theta` receives `dim` values.
///
/// # Safety
/// Pointers must be valid for the documented sizes; `evaluate` is called
/// with `user` on the calling thread only.
#[no_mangle]
pub unsafe extern "C" fn acll_select(
    cfg: *const AcllDualConfig,
    reference_risk: f64,
    dim: usize,
    evaluate: AcllEvaluateFn,
    user: *mut c_void,
    cache: *mut AcllEvalCache,
    out_theta: *mut f64,
    out_info: *mut AcllSelectionInfo,
) -> AcllStatus {
    guard(|| {
        non_null!(cfg, "cfg");
        non_null!(out_theta, "out_theta");
        non_null!(out_info, "out_info");
        let Some(callback) = evaluate else {
            return fail(AcllStatus::NullPointer, "evaluate is NULL");
        };
        let cfg = DualSearchConfig::from(&*cfg);
        let mut local = EvalCache::new();
        let cache = if cache.is_null() { &mut local } else { &mut (*cache).0 };
        let mut eval = |theta: &[f64]| {
            let (mut size, mut risk) = (f64::NAN, f64::NAN);
            let code = callback(user, theta.as_ptr(), theta.len(), &mut size, &mut risk);
            if code != 0 {
                return Err(AcllError::External(format!("callback returned {code}")));
            }
            Ok(Evaluation { size, risk })
        };
        match acll::dual::acll_select(&mut eval, reference_risk, &cfg, cache, dim) {
            Ok(sel) => {
                std::slice::from_raw_parts_mut(out_theta, dim).copy_from_slice(&sel.theta);
                *out_info = AcllSelectionInfo {
                    size: sel.size,
                    risk: sel.risk,
                    lambda_final: sel.lambda_final,
                    infeasible: c_int::from(sel.infeasible),
                    converged: c_int::from(sel.state.converged),
                    rounds: sel.state.trail.len(),
                    evaluations: sel.evaluations,
                };
                AcllStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

// ------------------------------------------------------------ experiments

/// Checks a config file. Returns `Ok` with `*out_count = 0` when valid, or
/// `Config` with the diagnostics (one per line) as the last error message.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_count` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn acll_validate_config(path: *const c_char, out_count: *mut usize) -> AcllStatus {
    guard(|| {
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match validate_config(&path) {
            Ok(diags) => {
                if !out_count.is_null() {
                    *out_count = diags.len();
                }
                if diags.is_empty() {
                    AcllStatus::Ok
                } else {
                    let text: Vec<String> = diags.iter().map(ToString::to_string).collect();
                    fail(AcllStatus::Config, text.join("\n"))
                }
            }
            Err(e) => fail(AcllStatus::Io, e.to_string()),
        }
    })
}

/// Runs a config file. `out_dir` (nullable) overrides the output directory;
/// `seed` is used instead of the configured seed when `override_seed` is 1.
///
/// # Safety
/// `path` and a non-NULL `out_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn acll_run_experiment(
    path: *const c_char,
    out_dir: *const c_char,
    override_seed: c_int,
    seed: u64,
) -> AcllStatus {
    guard(|| {
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let mut cfg = match load_config(&path) {
            Ok(c) => c,
            Err(ConfigError::Io(e)) => return fail(AcllStatus::Io, format!("{}: {e}", path.display())),
            Err(e) => return fail(AcllStatus::Config, e.to_string()),
        };
        if !out_dir.is_null() {
            match path_arg(out_dir, "out_dir") {
                Ok(p) => cfg.out_dir = p,
                Err(s) => return s,
            }
        }
        if override_seed != 0 {
            cfg.seed = seed;
        }
        match run_experiment(&cfg) {
            Ok(_) => AcllStatus::Ok,
            Err(e) => fail(AcllStatus::Runtime, e.to_string()),
        }
    })
}
