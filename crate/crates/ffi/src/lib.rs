//! C ABI over the erasure-lab core.
//!
//! Every function returns an [`ElStatus`]; on failure the message is
//! available from [`el_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use erasure_lab::latent::{compute_kappa, gen_disentangled, GenConfig, LatentDataset};
use erasure_lab::maxmargin::{train, TrainSettings};
use erasure_lab::metrics::spuriousness_main;
use erasure_lab::{Error, LinearClassifier};
use nalgebra::DVector;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotSeparable = 3,
    Numerical = 4,
    Io = 5,
    BufferTooSmall = 6,
    /// The requested quantity is undefined (e.g. empty minority group).
    Undefined = 7,
    Internal = 8,
    Panic = 9,
}

/// Which label a classifier is trained on.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElTask {
    Main = 0,
    Concept = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct ElGenConfig {
    pub n_points: usize,
    pub d_m: usize,
    pub d_p: usize,
    pub kappa_target: f64,
    pub class_separation: f64,
    pub feature_noise_sd: f64,
    pub label_noise_rate: f64,
    pub seed: u64,
}

pub struct ElDataset(LatentDataset);

pub struct ElClassifier(LinearClassifier);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ElStatus {
    match e {
        Error::InvalidArgument(_) | Error::Assumption(_) | Error::Infeasible(_) | Error::Parse { .. } => ElStatus::InvalidArgument,
        Error::NotSeparable => ElStatus::NotSeparable,
        Error::Numerical { .. } => ElStatus::Numerical,
        Error::Io { .. } | Error::Csv(_) => ElStatus::Io,
        Error::Lp(_) => ElStatus::Internal,
    }
}

struct Fail(ElStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ElStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ElStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ElStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("panic inside erasure-lab");
            ElStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn el_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fills `cfg` with the library defaults.
///
/// # Safety
/// `cfg` must be null or point to writable memory for one `ElGenConfig`.
#[no_mangle]
pub unsafe extern "C" fn el_gen_config_default(cfg: *mut ElGenConfig) -> ElStatus {
    guard(|| {
        let d = GenConfig::default();
        *out(cfg, "cfg")? = ElGenConfig {
            n_points: d.n_points,
            d_m: d.d_m,
            d_p: d.d_p,
            kappa_target: d.kappa_target,
            class_separation: d.class_separation,
            feature_noise_sd: d.feature_noise_sd,
            label_noise_rate: d.label_noise_rate,
            seed: d.seed,
        };
        Ok(())
    })
}

/// # Safety
/// `cfg` must point to a valid config and `ds_out` to writable storage for a pointer.
#[no_mangle]
pub unsafe extern "C" fn el_dataset_generate(cfg: *const ElGenConfig, ds_out: *mut *mut ElDataset) -> ElStatus {
    guard(|| {
        let c = borrow(cfg, "cfg")?;
        let slot = out(ds_out, "ds_out")?;
        *slot = ptr::null_mut();
        let ds = gen_disentangled(&GenConfig {
            n_points: c.n_points,
            d_m: c.d_m,
            d_p: c.d_p,
            kappa_target: c.kappa_target,
            class_separation: c.class_separation,
            feature_noise_sd: c.feature_noise_sd,
            label_noise_rate: c.label_noise_rate,
            seed: c.seed,
        })?;
        *slot = Box::into_raw(Box::new(ElDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from `el_dataset_generate` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn el_dataset_free(ds: *mut ElDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; each out pointer must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn el_dataset_shape(ds: *const ElDataset, n: *mut usize, d_m: *mut usize, d_p: *mut usize) -> ElStatus {
    guard(|| {
        let ds = &borrow(ds, "ds")?.0;
        for (p, v) in [(n, ds.n()), (d_m, ds.d_m), (d_p, ds.d_p)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `kappa` writable.
#[no_mangle]
pub unsafe extern "C" fn el_dataset_kappa(ds: *const ElDataset, kappa: *mut f64) -> ElStatus {
    guard(|| {
        let ds = &borrow(ds, "ds")?.0;
        *out(kappa, "kappa")? = ds.kappa_realized;
        Ok(())
    })
}

/// Copies the points row-major into `buf`, which must hold `n * (d_m + d_p)` values.
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn el_dataset_copy_points(ds: *const ElDataset, buf: *mut f64, len: usize) -> ElStatus {
    guard(|| {
        let ds = &borrow(ds, "ds")?.0;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let (n, d) = (ds.n(), ds.dim());
        if len < n * d {
            return Err(Fail(ElStatus::BufferTooSmall, format!("need {} values, got {len}", n * d)));
        }
        let dst = std::slice::from_raw_parts_mut(buf, n * d);
        for i in 0..n {
            for j in 0..d {
                dst[i * d + j] = ds.points[(i, j)];
            }
        }
        Ok(())
    })
}

/// Copies both label vectors; either buffer may be null.
///
/// # Safety
/// Non-null buffers must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn el_dataset_copy_labels(ds: *const ElDataset, y_main: *mut i8, y_concept: *mut i8, len: usize) -> ElStatus {
    guard(|| {
        let ds = &borrow(ds, "ds")?.0;
        if len < ds.n() {
            return Err(Fail(ElStatus::BufferTooSmall, format!("need {} labels, got {len}", ds.n())));
        }
        for (p, src) in [(y_main, &ds.y_main), (y_concept, &ds.y_concept)] {
            if !p.is_null() {
                std::slice::from_raw_parts_mut(p, src.len()).copy_from_slice(src);
            }
        }
        Ok(())
    })
}

/// Writes the dataset CSV plus its `.meta` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn el_dataset_save_csv(ds: *const ElDataset, path: *const c_char) -> ElStatus {
    guard(|| {
        let ds = &borrow(ds, "ds")?.0;
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(ElStatus::InvalidArgument, "path is not UTF-8".into()))?;
        ds.save(Path::new(p))?;
        Ok(())
    })
}

unsafe fn train_with(ds: *const ElDataset, task: ElTask, settings: TrainSettings, clf_out: *mut *mut ElClassifier) -> ElStatus {
    guard(|| {
        let ds = &borrow(ds, "ds")?.0;
        let slot = out(clf_out, "clf_out")?;
        *slot = ptr::null_mut();
        let y = match task {
            ElTask::Main => &ds.y_main,
            ElTask::Concept => &ds.y_concept,
        };
        let clf = train(&ds.points, y, &settings.with_bias(!ds.zero_centered))?;
        *slot = Box::into_raw(Box::new(ElClassifier(clf)));
        Ok(())
    })
}

/// Hard-margin classifier on all features. Fails with `NotSeparable` when no
/// separator exists.
///
/// # Safety
/// `ds` must be a live handle and `clf_out` writable.
#[no_mangle]
pub unsafe extern "C" fn el_train_max_margin(ds: *const ElDataset, task: ElTask, clf_out: *mut *mut ElClassifier) -> ElStatus {
    train_with(ds, task, TrainSettings::hard_margin(), clf_out)
}

/// Full-batch logistic regression on all features.
///
/// # Safety
/// `ds` must be a live handle and `clf_out` writable.
#[no_mangle]
pub unsafe extern "C" fn el_train_logistic(ds: *const ElDataset, task: ElTask, seed: u64, clf_out: *mut *mut ElClassifier) -> ElStatus {
    train_with(ds, task, TrainSettings::logistic().with_seed(seed), clf_out)
}

/// # Safety
/// `clf` must be null or a live classifier handle.
#[no_mangle]
pub unsafe extern "C" fn el_classifier_free(clf: *mut ElClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

/// # Safety
/// `clf` must be a live handle and `dim` writable.
#[no_mangle]
pub unsafe extern "C" fn el_classifier_dim(clf: *const ElClassifier, dim: *mut usize) -> ElStatus {
    guard(|| {
        *out(dim, "dim")? = borrow(clf, "clf")?.0.dim();
        Ok(())
    })
}

/// # Safety
/// `clf` must be a live handle and `bias` writable.
#[no_mangle]
pub unsafe extern "C" fn el_classifier_bias(clf: *const ElClassifier, bias: *mut f64) -> ElStatus {
    guard(|| {
        *out(bias, "bias")? = borrow(clf, "clf")?.0.bias;
        Ok(())
    })
}

/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn el_classifier_copy_weights(clf: *const ElClassifier, buf: *mut f64, len: usize) -> ElStatus {
    guard(|| {
        let w = &borrow(clf, "clf")?.0.weights;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < w.len() {
            return Err(Fail(ElStatus::BufferTooSmall, format!("need {} values, got {len}", w.len())));
        }
        std::slice::from_raw_parts_mut(buf, w.len()).copy_from_slice(w.as_slice());
        Ok(())
    })
}

/// `I - w w^T / |w|^2` for a nonzero `w` of length `d`, row-major into `out_buf` (`d * d` values).
///
/// # Safety
/// `w` must be valid for `d` reads and `out_buf` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn el_projection_matrix(w: *const f64, d: usize, out_buf: *mut f64, len: usize) -> ElStatus {
    guard(|| {
        if w.is_null() {
            return Err(null("w"));
        }
        if out_buf.is_null() {
            return Err(null("out"));
        }
        if len < d * d {
            return Err(Fail(ElStatus::BufferTooSmall, format!("need {} values, got {len}", d * d)));
        }
        let v = DVector::from_column_slice(std::slice::from_raw_parts(w, d));
        let p = erasure_lab::inlp::projection_matrix(&v)?;
        let dst = std::slice::from_raw_parts_mut(out_buf, d * d);
        for i in 0..d {
            for j in 0..d {
                dst[i * d + j] = p[(i, j)];
            }
        }
        Ok(())
    })
}

/// Main-task spuriousness of `f` against `clean` on `ds`. Returns `Undefined`
/// when the minority group is empty or the clean classifier misses all of it.
///
/// # Safety
/// All handles must be live and `psi` writable.
#[no_mangle]
pub unsafe extern "C" fn el_spuriousness_main(
    f: *const ElClassifier,
    ds: *const ElDataset,
    clean: *const ElClassifier,
    psi: *mut f64,
) -> ElStatus {
    guard(|| {
        let f = &borrow(f, "f")?.0;
        let ds = &borrow(ds, "ds")?.0;
        let clean = &borrow(clean, "clean")?.0;
        let psi = out(psi, "psi")?;
        if f.dim() != ds.dim() || clean.dim() != ds.dim() {
            return Err(Fail(ElStatus::InvalidArgument, "classifier dimension differs from the data".into()));
        }
        match spuriousness_main(f, &ds.points, ds, clean).psi {
            Some(v) => {
                *psi = v;
                Ok(())
            }
            None => {
                *psi = f64::NAN;
                Err(Fail(ElStatus::Undefined, "spuriousness undefined: empty minority group or clean accuracy 0".into()))
            }
        }
    })
}

/// Fraction of agreeing label pairs.
///
/// # Safety
/// Both label arrays must be valid for `n` reads.
#[no_mangle]
pub unsafe extern "C" fn el_compute_kappa(y_main: *const i8, y_concept: *const i8, n: usize, kappa: *mut f64) -> ElStatus {
    guard(|| {
        if y_main.is_null() || y_concept.is_null() {
            return Err(null("labels"));
        }
        let a = std::slice::from_raw_parts(y_main, n);
        let b = std::slice::from_raw_parts(y_concept, n);
        *out(kappa, "kappa")? = compute_kappa(a, b)?;
        Ok(())
    })
}
