//! C ABI over the core library.
//!
//! Every fallible function returns an [`RtfStatus`]; on failure a message is
//! available from [`rtf_last_error`] on the same thread. Complex arrays are
//! passed as [`RtfComplex`] (two doubles, real first). Matrices are row-major
//! and stacked bin after bin; spectra are bin-major (`bins x mics`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use rtfgraph::beamformer::mvdr_weights;
use rtfgraph::error::Error;
use rtfgraph::gcn::{infer, load_checkpoint, CheckpointMeta, GcnParams};
use rtfgraph::graph::{attach_query, FeatureBank};
use rtfgraph::linalg::{CMatrix, HermitianMatrix};
use rtfgraph::rtf::{feature_to_rtf, rtf_from_pencils, rtf_to_feature, RtfFeature, RtfSpectrum};
use rtfgraph::signal::C64;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numerical = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RtfComplex {
    pub re: f64,
    pub im: f64,
}

/// Shape of a feature: `mics - 1` rows of `l_uncausal + l_causal` lags.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtfFeatureLayout {
    pub l_uncausal: usize,
    pub l_causal: usize,
    pub mics: usize,
    pub ref_index: usize,
}

impl RtfFeatureLayout {
    fn len(&self) -> usize {
        self.mics.saturating_sub(1) * (self.l_uncausal + self.l_causal)
    }
}

/// Trained network loaded from a checkpoint.
pub struct RtfModel {
    params: GcnParams,
    meta: CheckpointMeta,
}

/// Clean training features the network attaches queries to.
pub struct RtfBank {
    bank: FeatureBank,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RtfStatus {
    match e {
        Error::InvalidInput(_)
        | Error::NotPowerOfTwo(_)
        | Error::TooShort { .. }
        | Error::OutsideRoom(_)
        | Error::InvalidT60 { .. }
        | Error::UnknownPosition(_) => RtfStatus::InvalidArgument,
        Error::Shape(_) => RtfStatus::Shape,
        Error::NotPositiveDefinite { .. }
        | Error::NoConvergence(_)
        | Error::EmptyFrameClass(_)
        | Error::ZeroReference
        | Error::DoubleBackward
        | Error::NonFiniteLoss(_) => RtfStatus::Numerical,
        Error::Io { .. } => RtfStatus::Io,
        Error::Format(_) | Error::Wav(_) | Error::Json(_) => RtfStatus::Format,
    }
}

struct Fail(RtfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RtfStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RtfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RtfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside the library".into());
            RtfStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn view<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn view_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn to_c64(v: &[RtfComplex]) -> Vec<C64> {
    v.iter().map(|c| C64::new(c.re, c.im)).collect()
}

fn write_complex(out: &mut [RtfComplex], v: &[C64]) {
    for (o, c) in out.iter_mut().zip(v) {
        *o = RtfComplex { re: c.re, im: c.im };
    }
}

fn matrices(v: &[RtfComplex], bins: usize, mics: usize) -> Result<Vec<HermitianMatrix>, Fail> {
    let mm = mics * mics;
    (0..bins)
        .map(|k| Ok(HermitianMatrix::new(CMatrix::from_vec(mics, mics, to_c64(&v[k * mm..(k + 1) * mm]))?)?))
        .collect()
}

fn check_dims(bins: usize, mics: usize, ref_index: usize) -> Result<(), Fail> {
    if bins == 0 || mics == 0 || ref_index >= mics {
        return Err(Fail(
            RtfStatus::InvalidArgument,
            format!("bins {bins}, mics {mics}, reference {ref_index}"),
        ));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn rtf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Per-bin RTF from the principal generalized eigenvector of
/// `(phi_rr, phi_vv)`, normalized to the reference microphone. A null
/// `phi_vv` means identity (the clean-signal estimate).
///
/// `phi_rr` and `phi_vv` hold `bins * mics * mics` values; `out_h` receives
/// `bins * mics`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn rtf_gevd_estimate(
    phi_rr: *const RtfComplex,
    phi_vv: *const RtfComplex,
    bins: usize,
    mics: usize,
    ref_index: usize,
    out_h: *mut RtfComplex,
) -> RtfStatus {
    guard(|| {
        check_dims(bins, mics, ref_index)?;
        let n = bins * mics * mics;
        let rr = matrices(view(phi_rr, n, "phi_rr")?, bins, mics)?;
        let vv = if phi_vv.is_null() {
            None
        } else {
            Some(matrices(view(phi_vv, n, "phi_vv")?, bins, mics)?)
        };
        let out = view_mut(out_h, bins * mics, "out_h")?;
        let h = rtf_from_pencils(&rr, vv.as_deref(), ref_index)?;
        write_complex(out, h.data());
        Ok(())
    })
}

/// MVDR weights `phi_vv^-1 h / (h^H phi_vv^-1 h)` per bin. Bins where the
/// denominator vanishes get the reference selector and a 1 in
/// `out_fallback` (which may be null).
///
/// # Safety
/// Pointers must be valid for the stated lengths: `h` and `out_w` hold
/// `bins * mics`, `phi_vv` holds `bins * mics * mics`, `out_fallback` holds
/// `bins`.
#[no_mangle]
pub unsafe extern "C" fn rtf_mvdr_weights(
    h: *const RtfComplex,
    phi_vv: *const RtfComplex,
    bins: usize,
    mics: usize,
    ref_index: usize,
    out_w: *mut RtfComplex,
    out_fallback: *mut u8,
) -> RtfStatus {
    guard(|| {
        check_dims(bins, mics, ref_index)?;
        let spec = RtfSpectrum::new(bins, mics, ref_index, to_c64(view(h, bins * mics, "h")?))?;
        let vv = matrices(view(phi_vv, bins * mics * mics, "phi_vv")?, bins, mics)?;
        let out = view_mut(out_w, bins * mics, "out_w")?;
        let w = mvdr_weights(&spec, &vv)?;
        write_complex(out, w.data());
        if !out_fallback.is_null() {
            let fb = slice::from_raw_parts_mut(out_fallback, bins);
            for (o, f) in fb.iter_mut().zip(w.fallback()) {
                *o = u8::from(*f);
            }
        }
        Ok(())
    })
}

/// Time-domain feature of a spectrum: `layout.mics - 1` rows of
/// `l_uncausal + l_causal` lags, reference row dropped.
///
/// # Safety
/// `h` holds `bins * layout.mics` values; `out` holds the layout's length.
#[no_mangle]
pub unsafe extern "C" fn rtf_spectrum_to_feature(
    h: *const RtfComplex,
    bins: usize,
    layout: RtfFeatureLayout,
    out: *mut f64,
) -> RtfStatus {
    guard(|| {
        check_dims(bins, layout.mics, layout.ref_index)?;
        let spec = RtfSpectrum::new(bins, layout.mics, layout.ref_index, to_c64(view(h, bins * layout.mics, "h")?))?;
        let f = rtf_to_feature(&spec, layout.l_uncausal, layout.l_causal)?;
        view_mut(out, layout.len(), "out")?.copy_from_slice(f.data());
        Ok(())
    })
}

/// Inverse of [`rtf_spectrum_to_feature`] onto `bins` bins.
///
/// # Safety
/// `feature` holds the layout's length; `out_h` holds `bins * layout.mics`.
#[no_mangle]
pub unsafe extern "C" fn rtf_feature_to_spectrum(
    feature: *const f64,
    layout: RtfFeatureLayout,
    bins: usize,
    out_h: *mut RtfComplex,
) -> RtfStatus {
    guard(|| {
        check_dims(bins, layout.mics, layout.ref_index)?;
        let f = feature_of(feature, layout)?;
        let h = feature_to_rtf(&f, bins)?;
        write_complex(view_mut(out_h, bins * layout.mics, "out_h")?, h.data());
        Ok(())
    })
}

unsafe fn feature_of(p: *const f64, layout: RtfFeatureLayout) -> Result<RtfFeature, Fail> {
    if layout.mics < 2 || layout.ref_index >= layout.mics {
        return Err(Fail(RtfStatus::InvalidArgument, "layout needs at least two mics".into()));
    }
    let data = view(p, layout.len(), "feature")?.to_vec();
    Ok(RtfFeature::new(layout.l_uncausal, layout.l_causal, layout.mics, layout.ref_index, data)?)
}

/// Loads a checkpoint written by the training stage.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtf_model_load(path: *const c_char, out: *mut *mut RtfModel) -> RtfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(RtfStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (params, meta) = load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(RtfModel { params, meta }));
        Ok(())
    })
}

/// Feature dimension `d` of the model, or 0 for null.
///
/// # Safety
/// `model` must be null or come from [`rtf_model_load`].
#[no_mangle]
pub unsafe extern "C" fn rtf_model_dim(model: *const RtfModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.dim())
}

/// Number of neighbors the model was trained with, or 0 for null.
///
/// # Safety
/// `model` must be null or come from [`rtf_model_load`].
#[no_mangle]
pub unsafe extern "C" fn rtf_model_neighbors(model: *const RtfModel) -> usize {
    model.as_ref().map_or(0, |m| m.meta.k)
}

/// # Safety
/// `model` must be null or come from [`rtf_model_load`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn rtf_model_free(model: *mut RtfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Bank of `n` features with `rows` rows of `dim` values each, stored node
/// after node. `ids` must be distinct.
///
/// # Safety
/// `ids` holds `n` values, `data` holds `n * rows * dim`; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn rtf_bank_new(
    ids: *const usize,
    n: usize,
    rows: usize,
    dim: usize,
    data: *const f64,
    out: *mut *mut RtfBank,
) -> RtfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ids = view(ids, n, "ids")?.to_vec();
        let data = view(data, n * rows * dim, "data")?.to_vec();
        let bank = FeatureBank::from_raw(ids, rows, dim, data)?;
        *out = Box::into_raw(Box::new(RtfBank { bank }));
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or come from [`rtf_bank_new`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn rtf_bank_free(bank: *mut RtfBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Attaches a noisy feature to its `k` nearest bank entries per row and
/// writes the network's refined feature to `out`.
///
/// # Safety
/// `model` and `bank` must be live handles; `query` and `out` hold the
/// layout's length.
#[no_mangle]
pub unsafe extern "C" fn rtf_model_infer(
    model: *const RtfModel,
    bank: *const RtfBank,
    query: *const f64,
    layout: RtfFeatureLayout,
    k: usize,
    out: *mut f64,
) -> RtfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let bank = bank.as_ref().ok_or_else(|| null("bank"))?;
        let q = feature_of(query, layout)?;
        if q.dim() != model.params.dim() {
            return Err(Fail(
                RtfStatus::Shape,
                format!("feature dimension {} for a d = {} model", q.dim(), model.params.dim()),
            ));
        }
        let att = attach_query(&bank.bank, &q, k)?;
        let f = infer(&model.params, &bank.bank, &att)?;
        view_mut(out, layout.len(), "out")?.copy_from_slice(f.data());
        Ok(())
    })
}
