//! C ABI over the flowreg translator and image metrics.
//!
//! Every fallible function returns a [`FlowregStatus`]; on failure the
//! message is available from [`flowreg_last_error`] on the same thread.
//! Images cross the boundary as row-major `f32` buffers on the `[-1, 1]`
//! scale, `batch * height * width` values long.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use flowreg::data::Image;
use flowreg::metrics;
use flowreg::tensor::{DType, Real, Tensor};
use flowreg::train::{load_models, sidecar_path, Direction, Models, TrainConfig};
use flowreg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowregStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Shape = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowregDirection {
    A2b = 0,
    B2a = 1,
}

enum Typed {
    F32(Models<f32>),
    F64(Models<f64>),
}

/// Trained generators loaded from a checkpoint. Opaque to C.
pub struct FlowregTranslator {
    models: Typed,
    image_size: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> FlowregStatus {
    match err {
        Error::Io { .. } | Error::Image { .. } | Error::Manifest { .. } | Error::MissingCounterpart(_) => FlowregStatus::Io,
        Error::Checkpoint(_) => FlowregStatus::Checkpoint,
        Error::Config(_) | Error::Json(_) => FlowregStatus::Config,
        Error::ShapeMismatch { .. } | Error::ChannelMismatch { .. } | Error::DataLength { .. } => FlowregStatus::Shape,
        _ => FlowregStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (FlowregStatus, String)>) -> FlowregStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FlowregStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FlowregStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FlowregStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FlowregStatus, String) {
    (FlowregStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (FlowregStatus, String) {
    (FlowregStatus::InvalidArgument, msg.into())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next flowreg call on the same thread.
#[no_mangle]
pub extern "C" fn flowreg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn flowreg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint (and the configuration stored next to it).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowreg_translator_open(path: *const c_char, out: *mut *mut FlowregTranslator) -> FlowregStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?);
        let config = TrainConfig::load(&sidecar_path(&path)).map_err(lib_err)?;
        let models = match config.precision {
            DType::F32 => Typed::F32(load_models::<f32>(&path).map_err(lib_err)?.1),
            DType::F64 => Typed::F64(load_models::<f64>(&path).map_err(lib_err)?.1),
        };
        let t = FlowregTranslator {
            models,
            image_size: config.image_size,
        };
        *out = Box::into_raw(Box::new(t));
        Ok(())
    })
}

/// Image side length the checkpoint was trained at.
///
/// # Safety
/// `t` must come from [`flowreg_translator_open`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowreg_translator_image_size(t: *const FlowregTranslator, out: *mut usize) -> FlowregStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("translator"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = t.image_size;
        Ok(())
    })
}

fn run_typed<T: Real>(models: &Models<T>, dir: Direction, shape: [usize; 4], input: &[f32], output: &mut [f32]) -> flowreg::Result<()> {
    let x = Tensor::<T>::from_fn(shape.to_vec(), |i| T::of(input[i] as f64));
    let y = models.gens.translate(&x, dir)?;
    for (o, v) in output.iter_mut().zip(y.data()) {
        *o = v.as_f64() as f32;
    }
    Ok(())
}

/// Translates `batch` single-channel images. `height` and `width` must be even.
///
/// # Safety
/// `input` and `output` must each hold `batch * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn flowreg_translator_translate(
    t: *const FlowregTranslator,
    direction: FlowregDirection,
    input: *const f32,
    batch: usize,
    height: usize,
    width: usize,
    output: *mut f32,
) -> FlowregStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("translator"))?;
        if input.is_null() || output.is_null() {
            return Err(null("image buffer"));
        }
        if batch == 0 || height == 0 || width == 0 || height % 2 != 0 || width % 2 != 0 {
            return Err(invalid(format!("need a non-empty batch of even-sized images, got {batch}x{height}x{width}")));
        }
        let n = batch
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| invalid("image buffer size overflows"))?;
        let input = std::slice::from_raw_parts(input, n);
        let output = std::slice::from_raw_parts_mut(output, n);
        let dir = match direction {
            FlowregDirection::A2b => Direction::A2B,
            FlowregDirection::B2a => Direction::B2A,
        };
        let shape = [batch, 1, height, width];
        match &t.models {
            Typed::F32(m) => run_typed(m, dir, shape, input, output),
            Typed::F64(m) => run_typed(m, dir, shape, input, output),
        }
        .map_err(lib_err)
    })
}

/// Releases a translator. Null is ignored.
///
/// # Safety
/// `t` must come from [`flowreg_translator_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn flowreg_translator_free(t: *mut FlowregTranslator) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

unsafe fn image(ptr: *const f32, height: usize, width: usize) -> Result<Image, (FlowregStatus, String)> {
    if ptr.is_null() {
        return Err(null("image"));
    }
    let n = height.checked_mul(width).ok_or_else(|| invalid("image size overflows"))?;
    let px = std::slice::from_raw_parts(ptr, n).iter().map(|&v| v as f64).collect();
    Image::new(height, width, px).map_err(lib_err)
}

unsafe fn write(out: *mut f64, v: f64) -> Result<(), (FlowregStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = v;
    Ok(())
}

/// Mean squared error of two `height x width` images.
///
/// # Safety
/// `a` and `b` must hold `height * width` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowreg_mse(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> FlowregStatus {
    guard(|| {
        let v = metrics::mse(&image(a, height, width)?, &image(b, height, width)?).map_err(lib_err)?;
        write(out, v)
    })
}

/// `10 log10(peak^2 / mse)`, capped for `mse == 0`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowreg_psnr(mse: f64, peak: f64, out: *mut f64) -> FlowregStatus {
    guard(|| write(out, metrics::psnr(mse, peak).map_err(lib_err)?))
}

/// Gaussian-window SSIM (11 taps, sigma 1.5). Images must be at least 11x11.
///
/// # Safety
/// `a` and `b` must hold `height * width` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flowreg_ssim(a: *const f32, b: *const f32, height: usize, width: usize, peak: f64, out: *mut f64) -> FlowregStatus {
    guard(|| {
        let v = metrics::ssim(&image(a, height, width)?, &image(b, height, width)?, peak).map_err(lib_err)?;
        write(out, v)
    })
}
