//! C ABI over trained deep-bayo models.
//!
//! Every function returns a [`DbStatus`]. On failure the message is kept per
//! thread and can be read with [`db_last_error`]. Models are opaque handles
//! created by [`db_model_load`] and released with [`db_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use deep_bayo::network::{file, DeepOnet};
use deep_bayo::rng::{substream, Stream};
use deep_bayo::variational::{kl_normal, posterior_param_samples, predict_with_uq};
use deep_bayo::Error;
use ndarray::ArrayView2;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    ModelFile = 4,
    Internal = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct DbModel {
    inner: DeepOnet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DbStatus {
    match e {
        Error::Io { .. } => DbStatus::Io,
        Error::ModelFile { .. } => DbStatus::ModelFile,
        Error::InvalidArgument(_) | Error::Dimension { .. } | Error::Config(_) => DbStatus::InvalidArgument,
        _ => DbStatus::Internal,
    }
}

fn guard<F: FnOnce() -> Result<(), (DbStatus, String)>>(f: F) -> DbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DbStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("panic inside deep-bayo");
            DbStatus::Panic
        }
    }
}

fn fail(e: Error) -> (DbStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DbStatus, String) {
    (DbStatus::NullPointer, format!("{what} is null"))
}

fn model<'a>(m: *const DbModel) -> Result<&'a DeepOnet, (DbStatus, String)> {
    // SAFETY: the caller passes a handle from db_model_load that has not been freed.
    unsafe { m.as_ref() }.map(|m| &m.inner).ok_or_else(|| null("model"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn db_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn db_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn db_model_load(path: *const c_char, out: *mut *mut DbModel) -> DbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (DbStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = file::load(Path::new(p)).map_err(fail)?;
        *out = Box::into_raw(Box::new(DbModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `m` must come from `db_model_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn db_model_free(m: *mut DbModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Shape of a model: trainable scalars, coordinate dimension, latent
/// dimension and number of physical parameters. Any output may be null.
///
/// # Safety
/// `m` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn db_model_shape(
    m: *const DbModel,
    param_count: *mut usize,
    coord_dim: *mut usize,
    latent_dim: *mut usize,
    n_physical: *mut usize,
) -> DbStatus {
    guard(|| {
        let m = model(m)?;
        let put = |p: *mut usize, v: usize| {
            if !p.is_null() {
                *p = v;
            }
        };
        put(param_count, m.param_count());
        put(coord_dim, m.spec.coord_dim);
        put(latent_dim, m.spec.latent_dim);
        put(n_physical, m.spec.n_params());
        Ok(())
    })
}

/// Predictive mean and epistemic/aleatoric variances at `n_points` points
/// (row-major, `n_points * coord_dim` values) from `n_latent >= 2` draws.
/// Each output holds `n_points` values; the variance outputs may be null.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn db_model_predict(
    m: *const DbModel,
    points: *const f64,
    n_points: usize,
    n_latent: usize,
    seed: u64,
    mean: *mut f64,
    epistemic_var: *mut f64,
    aleatoric_var: *mut f64,
) -> DbStatus {
    guard(|| {
        let m = model(m)?;
        if points.is_null() && n_points > 0 {
            return Err(null("points"));
        }
        if mean.is_null() {
            return Err(null("mean"));
        }
        if n_points == 0 {
            return Ok(());
        }
        let d = m.spec.coord_dim;
        let x = ArrayView2::from_shape_ptr((n_points, d), points);
        let uq = predict_with_uq(m, x, n_latent, &mut substream(seed, Stream::Analysis)).map_err(fail)?;
        let copy = |dst: *mut f64, src: &ndarray::Array1<f64>| {
            if !dst.is_null() {
                for (i, v) in src.iter().enumerate() {
                    *dst.add(i) = *v;
                }
            }
        };
        copy(mean, &uq.mean);
        copy(epistemic_var, &uq.epistemic_var);
        copy(aleatoric_var, &uq.aleatoric_var);
        Ok(())
    })
}

/// `n` posterior samples of the physical parameters, written row-major
/// into `out` (`n * n_physical` values).
///
/// # Safety
/// `out` must be valid for `n * n_physical` values.
#[no_mangle]
pub unsafe extern "C" fn db_model_posterior_samples(m: *const DbModel, n: usize, seed: u64, out: *mut f64) -> DbStatus {
    guard(|| {
        let m = model(m)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = posterior_param_samples(m, n, &mut substream(seed, Stream::Analysis)).map_err(fail)?;
        for (i, v) in s.iter().enumerate() {
            *out.add(i) = *v;
        }
        Ok(())
    })
}

/// KL(N(mu, sigma^2) || N(0, 1)).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn db_kl_normal(mu: f64, sigma: f64, out: *mut f64) -> DbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = kl_normal(mu, sigma).map_err(fail)?;
        Ok(())
    })
}
