//! C interface to the NSI estimator.
//!
//! Every entry point returns an [`NsiStatus`]; values are written through out
//! pointers. Datasets and estimates are opaque handles that must be released
//! with their matching `*_free` function. After a non-`Ok` status the message
//! of the most recent failure on the calling thread is available through
//! [`nsi_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nsi_core::basis::BasisKind;
use nsi_core::data::{load_csv, ColumnRoles, Dataset};
use nsi_core::estimator::{estimate_nsi, NsiConfig, NsiResult};
use nsi_core::gmm::Weighting;
use nsi_core::{gmm, score, NsiError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NsiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Csv = 4,
    Role = 5,
    Validation = 6,
    InsufficientData = 7,
    Numerical = 8,
    WeakInstrument = 9,
    Config = 10,
    Schema = 11,
    /// The estimate has no value for the requested quantity.
    Unavailable = 12,
    Panic = 99,
}

/// Family of sieve dictionaries used for both the bridge and the instruments.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NsiBasisKind {
    Series = 0,
    Kernel = 1,
    Tree = 2,
}

impl From<NsiBasisKind> for BasisKind {
    fn from(kind: NsiBasisKind) -> Self {
        match kind {
            NsiBasisKind::Series => BasisKind::Polynomial,
            NsiBasisKind::Kernel => BasisKind::KernelNystrom,
            NsiBasisKind::Tree => BasisKind::TreeLeaf,
        }
    }
}

/// Opaque validated dataset.
pub struct NsiDataset {
    inner: Dataset,
}

/// Opaque fitted NSI estimate.
pub struct NsiEstimate {
    inner: NsiResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &NsiError) -> NsiStatus {
    match err.root() {
        NsiError::Io { .. } => NsiStatus::Io,
        NsiError::Csv(_) => NsiStatus::Csv,
        NsiError::Role(_) => NsiStatus::Role,
        NsiError::Validation(_)
        | NsiError::DegenerateData(_)
        | NsiError::Standardization { .. } => NsiStatus::Validation,
        NsiError::InsufficientData(_) => NsiStatus::InsufficientData,
        NsiError::WeakInstrument(_) => NsiStatus::WeakInstrument,
        NsiError::InvalidArgument(_) | NsiError::DimensionMismatch { .. } => {
            NsiStatus::InvalidArgument
        }
        NsiError::Config(_) => NsiStatus::Config,
        NsiError::Schema(_) => NsiStatus::Schema,
        _ => NsiStatus::Numerical,
    }
}

struct Failure(NsiStatus, String);

impl From<NsiError> for Failure {
    fn from(err: NsiError) -> Self {
        Failure(status_of(&err), err.to_string())
    }
}

fn null_pointer(what: &str) -> Failure {
    Failure(NsiStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> NsiStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => NsiStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            NsiStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null_pointer(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            NsiStatus::InvalidArgument,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn read_str_array(
    p: *const *const c_char,
    len: usize,
    what: &str,
) -> Result<Vec<String>, Failure> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null_pointer(what));
    }
    std::slice::from_raw_parts(p, len)
        .iter()
        .map(|&s| read_str(s, what).map(str::to_string))
        .collect()
}

unsafe fn read_f64s<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null_pointer(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null_pointer(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null_pointer(what))
}

unsafe fn roles_from(
    benchmark: *const c_char,
    measurements: *const *const c_char,
    n_measurements: usize,
    treatments: *const *const c_char,
    n_treatments: usize,
) -> Result<ColumnRoles, Failure> {
    let benchmark = read_str(benchmark, "benchmark")?;
    let measurements = read_str_array(measurements, n_measurements, "measurements")?;
    let treatments = read_str_array(treatments, n_treatments, "treatments")?;
    Ok(ColumnRoles::new(benchmark)
        .with_measurements(&measurements)
        .with_treatments(&treatments))
}

/// Message describing the most recent failure on this thread, or null if
/// none occurred. The pointer stays valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn nsi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nsi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a CSV file with a header row. Rows with missing values in any role
/// column are dropped.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; the arrays must
/// hold `n_measurements` / `n_treatments` such pointers; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn nsi_dataset_load_csv(
    path: *const c_char,
    benchmark: *const c_char,
    measurements: *const *const c_char,
    n_measurements: usize,
    treatments: *const *const c_char,
    n_treatments: usize,
    out: *mut *mut NsiDataset,
) -> NsiStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        let roles = roles_from(
            benchmark,
            measurements,
            n_measurements,
            treatments,
            n_treatments,
        )?;
        let inner = load_csv(path, &roles)?;
        write_out(out, Box::into_raw(Box::new(NsiDataset { inner })), "out")
    })
}

/// Builds a dataset from `n_columns` named columns of `n_rows` values each,
/// stored column after column in `values`.
///
/// # Safety
/// `names` must hold `n_columns` valid strings and `values` must hold
/// `n_columns * n_rows` doubles; role arguments as in
/// [`nsi_dataset_load_csv`].
#[no_mangle]
pub unsafe extern "C" fn nsi_dataset_from_columns(
    names: *const *const c_char,
    values: *const f64,
    n_columns: usize,
    n_rows: usize,
    benchmark: *const c_char,
    measurements: *const *const c_char,
    n_measurements: usize,
    treatments: *const *const c_char,
    n_treatments: usize,
    out: *mut *mut NsiDataset,
) -> NsiStatus {
    guard(|| {
        let names = read_str_array(names, n_columns, "names")?;
        let total = n_columns
            .checked_mul(n_rows)
            .ok_or_else(|| Failure(NsiStatus::InvalidArgument, "table size overflows".into()))?;
        let values = read_f64s(values, total, "values")?;
        let columns = if n_rows == 0 {
            vec![Vec::new(); n_columns]
        } else {
            values.chunks(n_rows).map(<[f64]>::to_vec).collect()
        };
        let roles = roles_from(
            benchmark,
            measurements,
            n_measurements,
            treatments,
            n_treatments,
        )?;
        let inner = Dataset::from_columns(names, columns, roles)?;
        write_out(out, Box::into_raw(Box::new(NsiDataset { inner })), "out")
    })
}

/// Number of units retained after validation.
///
/// # Safety
/// `dataset` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nsi_dataset_n(dataset: *const NsiDataset, out: *mut usize) -> NsiStatus {
    guard(|| write_out(out, borrow(dataset, "dataset")?.inner.n(), "out"))
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nsi_dataset_free(dataset: *mut NsiDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Cross-fitted NSI estimate with `folds` folds using the given dictionary
/// family. `efficient` selects efficient (non-zero) or identity (zero) GMM
/// weighting.
///
/// # Safety
/// `dataset` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nsi_estimate(
    dataset: *const NsiDataset,
    basis: NsiBasisKind,
    folds: usize,
    seed: u64,
    efficient: i32,
    out: *mut *mut NsiEstimate,
) -> NsiStatus {
    guard(|| {
        let ds = &borrow(dataset, "dataset")?.inner;
        let mut cfg = NsiConfig::new(basis.into())
            .with_folds(folds)
            .with_seed(seed);
        cfg.weighting = if efficient != 0 {
            Weighting::Efficient
        } else {
            Weighting::Identity
        };
        let inner = estimate_nsi(ds, &cfg)?;
        write_out(out, Box::into_raw(Box::new(NsiEstimate { inner })), "out")
    })
}

/// Number of pooled coefficients.
///
/// # Safety
/// `estimate` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nsi_estimate_n_coefficients(
    estimate: *const NsiEstimate,
    out: *mut usize,
) -> NsiStatus {
    guard(|| {
        let est = &borrow(estimate, "estimate")?.inner.estimate;
        write_out(out, est.beta_hat.len(), "out")
    })
}

/// Point estimate and standard error of coefficient `index`.
///
/// # Safety
/// `estimate` must be a live handle; `out_value` and `out_se` writable.
#[no_mangle]
pub unsafe extern "C" fn nsi_estimate_coefficient(
    estimate: *const NsiEstimate,
    index: usize,
    out_value: *mut f64,
    out_se: *mut f64,
) -> NsiStatus {
    guard(|| {
        let est = &borrow(estimate, "estimate")?.inner.estimate;
        if index >= est.beta_hat.len() {
            return Err(Failure(
                NsiStatus::InvalidArgument,
                format!(
                    "coefficient index {index} out of range 0..{}",
                    est.beta_hat.len()
                ),
            ));
        }
        write_out(out_value, est.beta_hat[index], "out_value")?;
        write_out(out_se, est.se[index], "out_se")
    })
}

/// Overidentification statistic and its degrees of freedom. Returns
/// `Unavailable` when the estimate was pooled with identity weighting.
///
/// # Safety
/// `estimate` must be a live handle; `out_stat` and `out_df` writable.
#[no_mangle]
pub unsafe extern "C" fn nsi_estimate_j_stat(
    estimate: *const NsiEstimate,
    out_stat: *mut f64,
    out_df: *mut usize,
) -> NsiStatus {
    guard(|| {
        let est = &borrow(estimate, "estimate")?.inner.estimate;
        let stat = est.j_stat.ok_or_else(|| {
            Failure(
                NsiStatus::Unavailable,
                "J statistic is only defined under efficient weighting".into(),
            )
        })?;
        write_out(out_stat, stat, "out_stat")?;
        write_out(out_df, est.j_df, "out_df")
    })
}

/// Pooled estimate serialized as JSON. Release with [`nsi_string_free`].
///
/// # Safety
/// `estimate` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nsi_estimate_to_json(
    estimate: *const NsiEstimate,
    out: *mut *mut c_char,
) -> NsiStatus {
    guard(|| {
        let est = &borrow(estimate, "estimate")?.inner;
        let json = serde_json::json!({
            "target": est.target,
            "estimate": est.estimate,
            "diagnostics": est.diagnostics,
        });
        let text = CString::new(json.to_string())
            .map_err(|e| Failure(NsiStatus::Numerical, e.to_string()))?;
        write_out(out, text.into_raw(), "out")
    })
}

/// Releases an estimate. Null is ignored.
///
/// # Safety
/// `estimate` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nsi_estimate_free(estimate: *mut NsiEstimate) {
    if !estimate.is_null() {
        drop(Box::from_raw(estimate));
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nsi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Horvitz–Thompson transform of `n` treatment indicators into `out`.
///
/// # Safety
/// `z` must hold `n` readable doubles and `out` `n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn nsi_ht_transform(
    z: *const f64,
    n: usize,
    pi: f64,
    out: *mut f64,
) -> NsiStatus {
    guard(|| {
        let z = read_f64s(z, n, "z")?;
        let s = score::ht_transform(z, pi)?;
        if n > 0 {
            if out.is_null() {
                return Err(null_pointer("out"));
            }
            ptr::copy_nonoverlapping(s.as_ptr(), out, n);
        }
        Ok(())
    })
}

/// Wald test that two independent estimates are equal; writes the
/// chi-square(1) statistic and its p-value.
///
/// # Safety
/// `out_stat` and `out_p_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nsi_wald_equality(
    tau_a: f64,
    se_a: f64,
    tau_b: f64,
    se_b: f64,
    out_stat: *mut f64,
    out_p_value: *mut f64,
) -> NsiStatus {
    guard(|| {
        let test = gmm::wald_equality(tau_a, se_a, tau_b, se_b)?;
        write_out(out_stat, test.stat, "out_stat")?;
        write_out(out_p_value, test.p_value, "out_p_value")
    })
}
