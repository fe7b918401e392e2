//! C ABI over `sts-core`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every entry point returns an [`StsStatus`];
//! on failure, [`sts_last_error_message`] describes what went wrong on the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nalgebra::DMatrix;
use sts_core::episode::run_episode;
use sts_core::error::{ErrorClass, StsError};
use sts_core::storage::{load_manifest, write_bundle, Bundle};
use sts_core::{AdaptConfig, CoefficientMode, OptimizerConfig, PrototypeSet, RankSpec, SteeringBasis, ViewBatch};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StsStatus {
    Ok = 0,
    NullPointer = 1,
    Validation = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StsMode {
    Shared = 0,
    PerClass = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StsRankMethod {
    GavishDonoho = 0,
    Energy = 1,
    Fixed = 2,
}

/// Adaptation settings. Fill with [`sts_config_default`] before editing.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct StsConfig {
    pub rho: f64,
    pub lambda_reg: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u32,
    pub mode: StsMode,
    pub rank_method: StsRankMethod,
    /// Used when `rank_method` is energy.
    pub energy_fraction: f64,
    /// Used when `rank_method` is fixed.
    pub fixed_k: u32,
    pub center: bool,
    pub include_original: bool,
    /// Values ≤ 0 keep the prototypes' own scale.
    pub logit_scale_override: f64,
    pub seed: u64,
}

/// Prototypes, steering basis and settings, ready to adapt samples.
pub struct StsEngine {
    proto: PrototypeSet,
    basis: SteeringBasis,
    cfg: AdaptConfig,
}

/// A decoded bundle.
pub struct StsBundle {
    inner: Bundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &StsError) -> StsStatus {
    match e.class() {
        ErrorClass::Validation => StsStatus::Validation,
        ErrorClass::Numerical => StsStatus::Numerical,
        ErrorClass::Io => StsStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Engine(StsError),
}

impl From<StsError> for Failure {
    fn from(e: StsError) -> Self {
        Failure::Engine(e)
    }
}

fn guard<F>(f: F) -> StsStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StsStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer passed for `{what}`"));
            StsStatus::NullPointer
        }
        Ok(Err(Failure::Engine(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            StsStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer to a live `T`.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null, NUL-terminated per the C contract.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| StsError::InvalidInput(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn matrix_arg(data: *const f32, rows: usize, cols: usize, what: &'static str) -> Result<DMatrix<f64>, Failure> {
    if data.is_null() {
        return Err(Failure::Null(what));
    }
    if rows == 0 || cols == 0 {
        return Err(StsError::InvalidInput(format!("`{what}` is {rows}x{cols}")).into());
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| StsError::InvalidInput(format!("`{what}` size overflows")))?;
    // SAFETY: the caller guarantees `rows * cols` readable floats.
    let slice = unsafe { std::slice::from_raw_parts(data, len) };
    Ok(DMatrix::from_row_iterator(rows, cols, slice.iter().map(|&x| x as f64)))
}

fn to_core(cfg: &StsConfig) -> AdaptConfig {
    AdaptConfig {
        rho: cfg.rho,
        lambda_reg: cfg.lambda_reg,
        mode: match cfg.mode {
            StsMode::Shared => CoefficientMode::Shared,
            StsMode::PerClass => CoefficientMode::PerClass,
        },
        rank: match cfg.rank_method {
            StsRankMethod::GavishDonoho => RankSpec::GavishDonoho,
            StsRankMethod::Energy => RankSpec::Energy { fraction: cfg.energy_fraction },
            StsRankMethod::Fixed => RankSpec::Fixed { k: cfg.fixed_k as usize },
        },
        center: cfg.center,
        optimizer: OptimizerConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            steps: cfg.steps as usize,
            ..Default::default()
        },
        logit_scale_override: (cfg.logit_scale_override > 0.0).then_some(cfg.logit_scale_override),
        seed: cfg.seed,
        include_original: cfg.include_original,
        refilter_each_step: false,
    }
}

fn engine_out(proto: PrototypeSet, cfg: &StsConfig, out: *mut *mut StsEngine) -> Result<(), Failure> {
    let cfg = to_core(cfg);
    cfg.validate()?;
    let basis = cfg.build_basis(&proto)?;
    let engine = Box::new(StsEngine { proto, basis, cfg });
    // SAFETY: `out` was checked non-null by the caller of this helper.
    unsafe { *out = Box::into_raw(engine) };
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn sts_config_default(out: *mut StsConfig) -> StsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let d = AdaptConfig::default();
        let cfg = StsConfig {
            rho: d.rho,
            lambda_reg: d.lambda_reg,
            lr: d.optimizer.lr,
            weight_decay: d.optimizer.weight_decay,
            steps: d.optimizer.steps as u32,
            mode: StsMode::Shared,
            rank_method: StsRankMethod::GavishDonoho,
            energy_fraction: 0.98,
            fixed_k: 1,
            center: d.center,
            include_original: d.include_original,
            logit_scale_override: 0.0,
            seed: d.seed,
        };
        // SAFETY: checked non-null above.
        unsafe { *out = cfg };
        Ok(())
    })
}

/// Builds an engine from a row-major `rows × cols` matrix of unit-norm
/// prototypes. Classes are named `class_0`, `class_1`, ...
///
/// # Safety
/// `prototypes` must point to `rows * cols` floats; `cfg` and `out` must be
/// valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sts_engine_new(
    prototypes: *const f32,
    rows: usize,
    cols: usize,
    logit_scale: f64,
    cfg: *const StsConfig,
    out: *mut *mut StsEngine,
) -> StsStatus {
    guard(|| {
        let cfg = non_null(cfg, "cfg")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let z = matrix_arg(prototypes, rows, cols, "prototypes")?;
        let names = (0..rows).map(|i| format!("class_{i}")).collect();
        let proto = PrototypeSet::new(names, z, 1, logit_scale)?;
        engine_out(proto, cfg, out)
    })
}

/// Builds an engine from the prototypes referenced by a manifest.
///
/// # Safety
/// `manifest_path` must be NUL-terminated; `cfg` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sts_engine_from_manifest(
    manifest_path: *const c_char,
    cfg: *const StsConfig,
    out: *mut *mut StsEngine,
) -> StsStatus {
    guard(|| {
        let path = path_arg(manifest_path, "manifest_path")?;
        let cfg = non_null(cfg, "cfg")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let proto = load_manifest(&path)?.load_prototypes()?;
        engine_out(proto, cfg, out)
    })
}

/// # Safety
/// `engine` must be null or a pointer returned by an `sts_engine_*`
/// constructor that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sts_engine_free(engine: *mut StsEngine) {
    if !engine.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(engine) });
    }
}

/// Writes the number of classes, embedding width and steering rank.
///
/// # Safety
/// `engine` must be live; each out pointer may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn sts_engine_shape(
    engine: *const StsEngine,
    num_classes: *mut usize,
    dim: *mut usize,
    rank: *mut usize,
) -> StsStatus {
    guard(|| {
        let e = non_null(engine, "engine")?;
        for (p, v) in [(num_classes, e.proto.num_classes()), (dim, e.proto.dim()), (rank, e.basis.k_t())] {
            if !p.is_null() {
                // SAFETY: non-null out pointer supplied by the caller.
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

/// Copies the steering basis, row-major `dim × rank`, into `out`.
///
/// # Safety
/// `out` must have room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sts_engine_basis(engine: *const StsEngine, out: *mut f64, out_len: usize) -> StsStatus {
    guard(|| {
        let e = non_null(engine, "engine")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let b = &e.basis.b;
        if out_len < b.len() {
            return Err(StsError::InvalidInput(format!("basis needs {} doubles, got {out_len}", b.len())).into());
        }
        // SAFETY: bounds checked above.
        let dst = unsafe { std::slice::from_raw_parts_mut(out, b.len()) };
        for r in 0..b.nrows() {
            for c in 0..b.ncols() {
                dst[r * b.ncols() + c] = b[(r, c)];
            }
        }
        Ok(())
    })
}

/// Adapts to one sample's views and predicts. `probs` receives the
/// adapted marginal distribution (`probs_len` ≥ number of classes).
///
/// # Safety
/// `views` must point to `n_views * dim` floats; `probs` to `probs_len`
/// doubles; `predicted` to one `size_t`.
#[no_mangle]
pub unsafe extern "C" fn sts_engine_adapt(
    engine: *const StsEngine,
    views: *const f32,
    n_views: usize,
    dim: usize,
    original_index: usize,
    probs: *mut f64,
    probs_len: usize,
    predicted: *mut usize,
) -> StsStatus {
    guard(|| {
        let e = non_null(engine, "engine")?;
        if probs.is_null() {
            return Err(Failure::Null("probs"));
        }
        if predicted.is_null() {
            return Err(Failure::Null("predicted"));
        }
        let c = e.proto.num_classes();
        if probs_len < c {
            return Err(StsError::InvalidInput(format!("probs needs {c} doubles, got {probs_len}")).into());
        }
        let v = matrix_arg(views, n_views, dim, "views")?;
        let batch = ViewBatch::new("ffi", v, original_index)?;
        let r = run_episode(&e.proto, &e.basis, &batch, &e.cfg)?;
        // SAFETY: bounds checked above.
        let dst = unsafe { std::slice::from_raw_parts_mut(probs, c) };
        dst.copy_from_slice(&r.marginal_probs_after);
        // SAFETY: checked non-null above.
        unsafe { *predicted = r.predicted_class };
        Ok(())
    })
}

/// Reads and strictly validates a bundle file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sts_bundle_read(path: *const c_char, out: *mut *mut StsBundle) -> StsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let bytes = std::fs::read(&path).map_err(|source| StsError::Io { path: path.clone(), source })?;
        let inner = Bundle::decode(&bytes)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(StsBundle { inner })) };
        Ok(())
    })
}

/// Writes a row-major `rows × cols` matrix as a bundle.
///
/// # Safety
/// `path` must be NUL-terminated; `data` must hold `rows * cols` floats.
#[no_mangle]
pub unsafe extern "C" fn sts_bundle_write(path: *const c_char, data: *const f32, rows: usize, cols: usize) -> StsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let m = matrix_arg(data, rows, cols, "data")?;
        write_bundle(&m, &path)?;
        Ok(())
    })
}

/// # Safety
/// `bundle` must be live.
#[no_mangle]
pub unsafe extern "C" fn sts_bundle_rows(bundle: *const StsBundle) -> usize {
    // SAFETY: per the contract above.
    unsafe { bundle.as_ref() }.map_or(0, |b| b.inner.rows)
}

/// # Safety
/// `bundle` must be live.
#[no_mangle]
pub unsafe extern "C" fn sts_bundle_cols(bundle: *const StsBundle) -> usize {
    // SAFETY: per the contract above.
    unsafe { bundle.as_ref() }.map_or(0, |b| b.inner.cols)
}

/// Row-major payload, valid while the bundle lives.
///
/// # Safety
/// `bundle` must be live.
#[no_mangle]
pub unsafe extern "C" fn sts_bundle_data(bundle: *const StsBundle) -> *const f32 {
    // SAFETY: per the contract above.
    unsafe { bundle.as_ref() }.map_or(ptr::null(), |b| b.inner.data.as_ptr())
}

/// # Safety
/// `bundle` must be null or a live pointer from [`sts_bundle_read`].
#[no_mangle]
pub unsafe extern "C" fn sts_bundle_free(bundle: *mut StsBundle) {
    if !bundle.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(bundle) });
    }
}
