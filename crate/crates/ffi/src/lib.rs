//! C interface to `hamfit`.
//!
//! Handles are opaque and owned by the caller, who must release them with
//! the matching `*_free`. Every fallible call returns a [`HamfitStatus`];
//! on failure `hamfit_last_error` describes the problem for the calling
//! thread. Panics are caught at the boundary and reported as
//! `HAMFIT_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hamfit::balance::Balance;
use hamfit::checkpoint::{checkpoint_read, checkpoint_write};
use hamfit::dataset::{dataset_read, dataset_write};
use hamfit::eval::{evaluate_mse, EvalConfig};
use hamfit::objective::{NoiseModel, TermSet};
use hamfit::ode::Field;
use hamfit::rff::{hamiltonian, ModelField, ModelParams};
use hamfit::systems::{generate_dataset, GenConfig, SystemName, SystemSpec};
use hamfit::train::{train, TrainConfig};
use hamfit::types::ObservedDataset;
use hamfit::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HamfitStatus {
    Ok = 0,
    InvalidArgument = 1,
    NullPointer = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HamfitBalance {
    Equal = 0,
    Gda = 1,
    GdaAdam = 2,
    MtAdam = 3,
    Jd = 4,
    Jd2 = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamfitTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub lr_lambda: f64,
    pub balance: HamfitBalance,
    pub use_lyapunov: bool,
    pub use_energy: bool,
    pub use_volume: bool,
    pub num_bases: usize,
    /// Train with known noise `noise_sigma` instead of learning it.
    pub noise_prior: bool,
    pub noise_sigma: f64,
    pub substeps: usize,
    pub seed: u64,
}

/// Opaque dataset handle.
pub struct HamfitDataset(ObservedDataset);

/// Opaque model handle.
pub struct HamfitModel(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HamfitStatus {
    match e {
        Error::Dimension { .. } => HamfitStatus::DimensionMismatch,
        Error::Io(_) => HamfitStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Csv(_) => HamfitStatus::Format,
        e if e.is_numerical() => HamfitStatus::Numerical,
        _ => HamfitStatus::InvalidArgument,
    }
}

struct Fail(HamfitStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HamfitStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HamfitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HamfitStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            HamfitStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(HamfitStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn href<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn hamfit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn hamfit_status_string(status: HamfitStatus) -> *const c_char {
    let s: &'static CStr = match status {
        HamfitStatus::Ok => c"ok",
        HamfitStatus::InvalidArgument => c"invalid argument",
        HamfitStatus::NullPointer => c"null pointer",
        HamfitStatus::DimensionMismatch => c"dimension mismatch",
        HamfitStatus::Numerical => c"numerical failure",
        HamfitStatus::Io => c"i/o error",
        HamfitStatus::Format => c"malformed file",
        HamfitStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Simulates a benchmark system (`"P"`, `"S"`, `"HH"`, `"DP"`, ...).
#[no_mangle]
pub unsafe extern "C" fn hamfit_dataset_generate(
    system: *const c_char,
    trajectories: usize,
    steps: usize,
    t_end: f64,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut HamfitDataset,
) -> HamfitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name: SystemName = cstr(system, "system")?.parse()?;
        let gen = GenConfig {
            trajectories,
            steps,
            t_end,
            noise_sigma,
            seed,
            ..GenConfig::preset(name)
        };
        let ds = generate_dataset(&SystemSpec::preset(name), &gen)?;
        put(out, HamfitDataset(ds));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hamfit_dataset_load(path: *const c_char, out: *mut *mut HamfitDataset) -> HamfitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = dataset_read(cstr(path, "path")?)?;
        put(out, HamfitDataset(ds));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hamfit_dataset_save(ds: *const HamfitDataset, path: *const c_char) -> HamfitStatus {
    guard(|| {
        let ds = href(ds, "ds")?;
        dataset_write(cstr(path, "path")?, &ds.0)?;
        Ok(())
    })
}

/// Frees a dataset; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn hamfit_dataset_free(ds: *mut HamfitDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Writes trajectory count, time points per trajectory and `d`.
#[no_mangle]
pub unsafe extern "C" fn hamfit_dataset_shape(
    ds: *const HamfitDataset,
    trajectories: *mut usize,
    steps: *mut usize,
    d: *mut usize,
) -> HamfitStatus {
    guard(|| {
        let ds = &href(ds, "ds")?.0;
        if trajectories.is_null() || steps.is_null() || d.is_null() {
            return Err(null("shape output"));
        }
        *trajectories = ds.num_trajectories();
        *steps = ds.times.len();
        *d = ds.d;
        Ok(())
    })
}

/// Copies trajectory `index` as `steps × 2d` row-major states into `out`,
/// which must hold `len = steps · 2d` values.
#[no_mangle]
pub unsafe extern "C" fn hamfit_dataset_trajectory(
    ds: *const HamfitDataset,
    index: usize,
    out: *mut f64,
    len: usize,
) -> HamfitStatus {
    guard(|| {
        let ds = &href(ds, "ds")?.0;
        if index >= ds.num_trajectories() {
            return Err(Fail(
                HamfitStatus::InvalidArgument,
                format!("trajectory {index} out of range ({} trajectories)", ds.num_trajectories()),
            ));
        }
        let need = ds.times.len() * 2 * ds.d;
        if len != need {
            return Err(Error::Dimension {
                context: "trajectory buffer".into(),
                expected: need,
                found: len,
            }
            .into());
        }
        let out = slice_mut(out, len, "out")?;
        for (chunk, s) in out.chunks_exact_mut(2 * ds.d).zip(&ds.observations[index]) {
            chunk.copy_from_slice(s.as_slice());
        }
        Ok(())
    })
}

/// Library defaults: 5000 epochs, lr 1e-3, equal weights, all regularizers, M = 100.
#[no_mangle]
pub extern "C" fn hamfit_train_options_default() -> HamfitTrainOptions {
    let d = TrainConfig::default();
    HamfitTrainOptions {
        epochs: d.epochs,
        lr: d.lr,
        lr_lambda: d.lr_lambda,
        balance: HamfitBalance::Equal,
        use_lyapunov: true,
        use_energy: true,
        use_volume: true,
        num_bases: d.init.num_bases,
        noise_prior: false,
        noise_sigma: 0.0,
        substeps: d.objective.integration.substeps,
        seed: d.seed,
    }
}

fn train_config(o: &HamfitTrainOptions) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: o.epochs,
        lr: o.lr,
        lr_lambda: o.lr_lambda,
        balance: match o.balance {
            HamfitBalance::Equal => Balance::Equal,
            HamfitBalance::Gda => Balance::Gda,
            HamfitBalance::GdaAdam => Balance::GdaAdam,
            HamfitBalance::MtAdam => Balance::MtAdam,
            HamfitBalance::Jd => Balance::Jd,
            HamfitBalance::Jd2 => Balance::Jd2,
        },
        seed: o.seed,
        ..TrainConfig::default()
    };
    cfg.init.num_bases = o.num_bases;
    cfg.objective.terms = TermSet {
        lyap: o.use_lyapunov,
        energy: o.use_energy,
        vol: o.use_volume,
    };
    cfg.objective.integration.substeps = o.substeps;
    if o.noise_prior {
        cfg.objective.noise = NoiseModel::Known { sigma: o.noise_sigma };
    }
    cfg
}

/// Trains a model. On divergence returns `HAMFIT_STATUS_NUMERICAL` and
/// still stores the last good model in `out`.
#[no_mangle]
pub unsafe extern "C" fn hamfit_train(
    ds: *const HamfitDataset,
    options: *const HamfitTrainOptions,
    out: *mut *mut HamfitModel,
) -> HamfitStatus {
    guard(|| {
        let ds = &href(ds, "ds")?.0;
        let opts = href(options, "options")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let result = train(ds, &train_config(opts))?;
        let diverged = result.diverged_at;
        put(out, HamfitModel(result.model));
        match diverged {
            Some(epoch) => Err(Error::Diverged { epoch }.into()),
            None => Ok(()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn hamfit_model_load(path: *const c_char, out: *mut *mut HamfitModel) -> HamfitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = checkpoint_read(cstr(path, "path")?)?;
        put(out, HamfitModel(params));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hamfit_model_save(model: *const HamfitModel, path: *const c_char) -> HamfitStatus {
    guard(|| {
        let m = href(model, "model")?;
        checkpoint_write(cstr(path, "path")?, &m.0)?;
        Ok(())
    })
}

/// Frees a model; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn hamfit_model_free(model: *mut HamfitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn hamfit_model_dim(model: *const HamfitModel, d: *mut usize) -> HamfitStatus {
    guard(|| {
        let m = href(model, "model")?;
        if d.is_null() {
            return Err(null("d"));
        }
        *d = m.0.d;
        Ok(())
    })
}

fn check_len(m: &ModelParams, len: usize, what: &str) -> Result<(), Fail> {
    if len != 2 * m.d {
        return Err(Error::Dimension {
            context: what.into(),
            expected: 2 * m.d,
            found: len,
        }
        .into());
    }
    Ok(())
}

/// Mean-model Hamiltonian at `x` (length `2d`).
#[no_mangle]
pub unsafe extern "C" fn hamfit_model_hamiltonian(
    model: *const HamfitModel,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> HamfitStatus {
    guard(|| {
        let m = &href(model, "model")?.0;
        check_len(m, len, "state")?;
        let x = slice(x, len, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = hamiltonian(&m.mean_sample(), x);
        Ok(())
    })
}

/// Mean-model vector field at `(x, t)`; `x` and `out` have length `2d`.
#[no_mangle]
pub unsafe extern "C" fn hamfit_model_vector_field(
    model: *const HamfitModel,
    x: *const f64,
    len: usize,
    t: f64,
    out: *mut f64,
) -> HamfitStatus {
    guard(|| {
        let m = &href(model, "model")?.0;
        check_len(m, len, "state")?;
        let x = slice(x, len, "x")?;
        let out = slice_mut(out, len, "out")?;
        let sample = m.mean_sample();
        ModelField::new(m, &sample).eval(x, t, out);
        Ok(())
    })
}

/// Mean and std of per-trajectory test MSE under the mean model.
#[no_mangle]
pub unsafe extern "C" fn hamfit_evaluate_mse(
    model: *const HamfitModel,
    ds: *const HamfitDataset,
    mean: *mut f64,
    std: *mut f64,
) -> HamfitStatus {
    guard(|| {
        let m = &href(model, "model")?.0;
        let ds = &href(ds, "ds")?.0;
        if mean.is_null() || std.is_null() {
            return Err(null("mean/std"));
        }
        let r = evaluate_mse(m, ds, &EvalConfig::default())?;
        *mean = r.mean;
        *std = r.std;
        Ok(())
    })
}
