//! C interface to the picanet crate.
//!
//! Every function returns a [`PicanetStatus`]; on failure the message is
//! available from [`picanet_last_error`] on the same thread. Buffers are
//! `float` arrays in NHWC order owned by the caller. Models are opaque
//! handles created by `picanet_model_load` or `picanet_model_new` and
//! released with `picanet_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use picanet::attention::{attend_conv, attend_pool, AttentionField, AttentionKind, ContextGrid};
use picanet::metrics::{image_pr, mae, max_f_measure, s_measure, SaliencyMap, BETA2};
use picanet::model::{ModelConfig, SaliencyModel};
use picanet::pipeline::checkpoint;
use picanet::{Error, Graph, Shape, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PicanetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PicanetGridMode {
    Global = 0,
    Local = 1,
}

/// Opaque model handle.
pub struct PicanetModel {
    inner: SaliencyModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PicanetStatus {
    match e {
        Error::Shape { .. } | Error::DataLength { .. } => PicanetStatus::ShapeMismatch,
        Error::Io { .. } | Error::Image { .. } => PicanetStatus::Io,
        Error::Format(_) | Error::Json(_) => PicanetStatus::Format,
        Error::Config(_) => PicanetStatus::Config,
        _ => PicanetStatus::InvalidArgument,
    }
}

struct Fail(PicanetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PicanetStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PicanetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PicanetStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PicanetStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            PicanetStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

unsafe fn slice<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f32, len: usize, what: &str) -> Result<&'a mut [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn tensor(data: &[f32], shape: Shape) -> Result<Tensor<f32>, Fail> {
    Ok(Tensor::new(shape, data.to_vec())?)
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn picanet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn picanet_model_load(
    path: *const c_char,
    out: *mut *mut PicanetModel,
) -> PicanetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let (inner, _) = checkpoint::load::<f32>(Path::new(path))?;
        *out = Box::into_raw(Box::new(PicanetModel { inner }));
        Ok(())
    })
}

/// Builds a freshly initialized model with the default desk-scale widths.
///
/// # Safety
/// `preset` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn picanet_model_new(
    preset: *const c_char,
    seed: u64,
    out: *mut *mut PicanetModel,
) -> PicanetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ModelConfig::default().with_preset(c_str(preset, "preset")?)?;
        let inner = SaliencyModel::new(cfg, seed)?;
        *out = Box::into_raw(Box::new(PicanetModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn picanet_model_free(model: *mut PicanetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square input the model expects, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn picanet_model_input_size(model: *const PicanetModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().input_size)
}

/// Saliency for `n` images of `size × size × 3` values in `[0, 1]`; writes
/// `n × size × size` values to `out`.
///
/// # Safety
/// `images` must hold `n·size·size·3` floats and `out` `n·size·size`.
#[no_mangle]
pub unsafe extern "C" fn picanet_model_predict(
    model: *const PicanetModel,
    images: *const f32,
    n: usize,
    size: usize,
    out: *mut f32,
) -> PicanetStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let shape = Shape::new(n, size, size, 3);
        let x = tensor(slice(images, shape.len(), "images")?, shape)?;
        let pred = model.inner.predict(&x)?;
        let out = slice_mut(out, n * size * size, "out")?;
        out.copy_from_slice(pred.side[0].data());
        Ok(())
    })
}

fn grid_of(mode: PicanetGridMode, grid: usize, dilation: usize) -> Result<ContextGrid, Fail> {
    Ok(match mode {
        PicanetGridMode::Global => ContextGrid::global(grid, dilation)?,
        PicanetGridMode::Local => ContextGrid::local(grid, dilation)?,
    })
}

/// Attention pooling of features `(n, h, w, c)` with weights
/// `(n, h, w, grid²)`; writes `(n, h, w, c)` to `out`.
///
/// # Safety
/// Every buffer must hold the number of floats its shape implies.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn picanet_attend_pool(
    features: *const f32,
    weights: *const f32,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    mode: PicanetGridMode,
    grid: usize,
    dilation: usize,
    out: *mut f32,
) -> PicanetStatus {
    guard(|| {
        let grid = grid_of(mode, grid, dilation)?;
        let fs = Shape::new(n, h, w, c);
        let ws = fs.with_c(grid.len());
        let mut g = Graph::new();
        let f = g.constant(tensor(slice(features, fs.len(), "features")?, fs)?);
        let a = g.constant(tensor(slice(weights, ws.len(), "weights")?, ws)?);
        let att = AttentionField::new(&g, a, grid, AttentionKind::Softmax)?;
        let y = attend_pool(&mut g, f, &att)?;
        slice_mut(out, fs.len(), "out")?.copy_from_slice(g.value(y).data());
        Ok(())
    })
}

/// Attention convolution with a local `k × k` grid: gates `(n, h, w, k²)`,
/// kernel `(k, k, c_in, c_out)`, bias `c_out`; writes `(n, h, w, c_out)`.
///
/// # Safety
/// Every buffer must hold the number of floats its shape implies.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn picanet_attend_conv(
    features: *const f32,
    gates: *const f32,
    n: usize,
    h: usize,
    w: usize,
    c_in: usize,
    k: usize,
    dilation: usize,
    kernel: *const f32,
    bias: *const f32,
    c_out: usize,
    out: *mut f32,
) -> PicanetStatus {
    guard(|| {
        let grid = ContextGrid::local(k, dilation)?;
        let fs = Shape::new(n, h, w, c_in);
        let gs = fs.with_c(grid.len());
        let ks = Shape::new(k, k, c_in, c_out);
        let mut g = Graph::new();
        let f = g.constant(tensor(slice(features, fs.len(), "features")?, fs)?);
        let gv = g.constant(tensor(slice(gates, gs.len(), "gates")?, gs)?);
        let wv = g.constant(tensor(slice(kernel, ks.len(), "kernel")?, ks)?);
        let bv = g.constant(tensor(slice(bias, c_out, "bias")?, Shape::vector(c_out))?);
        let att = AttentionField::new(&g, gv, grid, AttentionKind::Sigmoid)?;
        let y = attend_conv(&mut g, f, &att, wv, bv)?;
        slice_mut(out, n * h * w * c_out, "out")?.copy_from_slice(g.value(y).data());
        Ok(())
    })
}

unsafe fn maps(
    pred: *const f32,
    gt: *const f32,
    h: usize,
    w: usize,
) -> Result<(SaliencyMap, SaliencyMap), Fail> {
    let to_map = |p: &[f32]| SaliencyMap::new(h, w, p.iter().map(|&v| v as f64).collect());
    Ok((
        to_map(slice(pred, h * w, "pred")?)?,
        to_map(slice(gt, h * w, "gt")?)?,
    ))
}

/// Which single-image metric [`picanet_metric`] computes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PicanetMetric {
    Mae = 0,
    MaxF = 1,
    SMeasure = 2,
}

/// One metric of an `h × w` prediction against its ground truth, both in
/// `[0, 1]`.
///
/// # Safety
/// `pred` and `gt` must hold `h·w` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn picanet_metric(
    metric: PicanetMetric,
    pred: *const f32,
    gt: *const f32,
    h: usize,
    w: usize,
    out: *mut f64,
) -> PicanetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, g) = maps(pred, gt, h, w)?;
        *out = match metric {
            PicanetMetric::Mae => mae(&p, &g)?,
            PicanetMetric::MaxF => max_f_measure(&image_pr(&p, &g)?, BETA2),
            PicanetMetric::SMeasure => s_measure(&p, &g)?,
        };
        Ok(())
    })
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn picanet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
