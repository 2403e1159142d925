//! C ABI over `advdepth`.
//!
//! Every fallible function returns an [`AdvdepthStatus`]; on failure the
//! message is kept per thread and read with [`advdepth_last_error`]. Models
//! and scenes are opaque handles owned by the caller and released with the
//! matching `_free` function. Images are planar `[3,H,W]` `float` buffers
//! in `[0,1]`, depth maps `[H,W]` in meters.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use advdepth::attack::{craft, AttackConfig};
use advdepth::depth_net::{Architecture, DepthModel, DepthRange};
use advdepth::scenegen::{generate, Scene, SceneParams};
use advdepth::targets::scale_target;
use advdepth::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvdepthStatus {
    Ok = 0,
    ShapeError = 2,
    NumericsError = 3,
    ConfigError = 4,
    DataError = 5,
    FormatError = 6,
    IoError = 7,
    NullPointer = 8,
    InvalidUtf8 = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvdepthArchitecture {
    ModelA = 0,
    ModelB = 1,
}

/// Opaque trained or freshly initialised depth model.
pub struct AdvdepthModel(DepthModel);

/// Opaque synthetic scene.
pub struct AdvdepthScene(Scene);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AdvdepthStatus {
    match e {
        Error::Shape(_) => AdvdepthStatus::ShapeError,
        Error::Numerics(_) => AdvdepthStatus::NumericsError,
        Error::Config(_) => AdvdepthStatus::ConfigError,
        Error::Data(_) => AdvdepthStatus::DataError,
        Error::Format { .. } => AdvdepthStatus::FormatError,
        Error::Io { .. } => AdvdepthStatus::IoError,
    }
}

struct Fail(AdvdepthStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AdvdepthStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AdvdepthStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdvdepthStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AdvdepthStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    // SAFETY: caller passes a nul-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(AdvdepthStatus::InvalidUtf8, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn model_ref<'a>(m: *const AdvdepthModel) -> Result<&'a DepthModel, Fail> {
    // SAFETY: non-null handles come from this library.
    unsafe { m.as_ref() }.map(|m| &m.0).ok_or_else(|| null("model"))
}

unsafe fn image_arg(image: *const f32, height: usize, width: usize) -> Result<Tensor, Fail> {
    let data = unsafe { slice(image, 3 * height * width, "image") }?;
    Ok(Tensor::new(vec![3, height, width], data.to_vec())?)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn advdepth_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn advdepth_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Seeded untrained model with the default 1 to 80 m range. `arch` is an
/// [`AdvdepthArchitecture`] value; anything else is a config error.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn advdepth_model_new(
    arch: u32,
    seed: u64,
    out: *mut *mut AdvdepthModel,
) -> AdvdepthStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let arch = match arch {
            a if a == AdvdepthArchitecture::ModelA as u32 => Architecture::ModelA,
            a if a == AdvdepthArchitecture::ModelB as u32 => Architecture::ModelB,
            a => return Err(Error::Config(format!("unknown architecture {a}")).into()),
        };
        *out = Box::into_raw(Box::new(AdvdepthModel(DepthModel::new(arch, DepthRange::default(), seed))));
        Ok(())
    })
}

/// Loads a model directory written by `advdepth train`.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn advdepth_model_load(dir: *const c_char, out: *mut *mut AdvdepthModel) -> AdvdepthStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let dir = unsafe { path_arg(dir) }?;
        *out = Box::into_raw(Box::new(AdvdepthModel(DepthModel::load(dir)?)));
        Ok(())
    })
}

/// Writes the model to `dir`.
///
/// # Safety
/// `model` must be a live handle and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn advdepth_model_save(model: *const AdvdepthModel, dir: *const c_char) -> AdvdepthStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        m.save(unsafe { path_arg(dir) }?)?;
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advdepth_model_free(model: *mut AdvdepthModel) {
    if !model.is_null() {
        // SAFETY: the handle was created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Predicts depth for one image. `depth_out` receives `height * width`
/// values.
///
/// # Safety
/// `image` must hold `3 * height * width` floats and `depth_out`
/// `height * width`.
#[no_mangle]
pub unsafe extern "C" fn advdepth_model_predict(
    model: *const AdvdepthModel,
    image: *const f32,
    height: usize,
    width: usize,
    depth_out: *mut f32,
) -> AdvdepthStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let x = unsafe { image_arg(image, height, width) }?;
        let out = unsafe { slice_mut(depth_out, height * width, "depth_out") }?;
        out.copy_from_slice(m.predict(&x)?.data());
        Ok(())
    })
}

/// Crafts a perturbation driving the prediction toward `(1 + alpha)` times
/// the clean prediction. A negative `eta` picks the default step size for
/// `xi`. `v_out` receives `3 * height * width` values.
///
/// # Safety
/// Buffers must have the sizes above; `final_loss` may be null.
#[no_mangle]
pub unsafe extern "C" fn advdepth_craft_scale(
    model: *const AdvdepthModel,
    image: *const f32,
    height: usize,
    width: usize,
    alpha: f64,
    xi: f64,
    eta: f64,
    steps: usize,
    v_out: *mut f32,
    final_loss: *mut f64,
) -> AdvdepthStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let x = unsafe { image_arg(image, height, width) }?;
        let out = unsafe { slice_mut(v_out, x.len(), "v_out") }?;
        let target = scale_target(&m.predict(&x)?, alpha, m.range())?;
        let mut cfg = AttackConfig::new(xi);
        if eta >= 0.0 {
            cfg.eta = eta;
        }
        cfg.steps = steps;
        let p = craft(m, &x, &target, &cfg)?;
        out.copy_from_slice(p.v.data());
        if let Some(l) = unsafe { final_loss.as_mut() } {
            *l = p.final_loss;
        }
        Ok(())
    })
}

/// `mean(|pred - target| / target)` over `len` values.
///
/// # Safety
/// `pred` and `target` must hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdepth_are(pred: *const f32, target: *const f32, len: usize, out: *mut f64) -> AdvdepthStatus {
    guard(|| {
        let p = unsafe { slice(pred, len, "pred") }?;
        let t = unsafe { slice(target, len, "target") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let shape = vec![1, 1, len];
        *out = advdepth::eval_metrics::are(&Tensor::new(shape.clone(), p.to_vec())?, &Tensor::new(shape, t.to_vec())?)?;
        Ok(())
    })
}

/// Generates the scene for `seed` at `height` x `width` with default
/// parameters otherwise.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdepth_scene_generate(
    seed: u64,
    height: usize,
    width: usize,
    out: *mut *mut AdvdepthScene,
) -> AdvdepthStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let params = SceneParams {
            height,
            width,
            ..SceneParams::default()
        };
        *out = Box::into_raw(Box::new(AdvdepthScene(generate(seed, &params)?)));
        Ok(())
    })
}

/// Copies the scene image (`3 * H * W` floats) and ground-truth depth
/// (`H * W` floats); either destination may be null. `len_image` and
/// `len_depth` give the buffer capacities.
///
/// # Safety
/// Non-null buffers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn advdepth_scene_copy(
    scene: *const AdvdepthScene,
    image_out: *mut f32,
    len_image: usize,
    depth_out: *mut f32,
    len_depth: usize,
) -> AdvdepthStatus {
    guard(|| {
        let s = unsafe { scene.as_ref() }.map(|s| &s.0).ok_or_else(|| null("scene"))?;
        for (src, dst, cap) in [(&s.image, image_out, len_image), (&s.depth, depth_out, len_depth)] {
            if dst.is_null() {
                continue;
            }
            if cap != src.len() {
                return Err(Error::Shape(format!("buffer holds {cap} values, scene needs {}", src.len())).into());
            }
            unsafe { slice_mut(dst, cap, "buffer") }?.copy_from_slice(src.data());
        }
        Ok(())
    })
}

/// Releases a scene handle; null is ignored.
///
/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advdepth_scene_free(scene: *mut AdvdepthScene) {
    if !scene.is_null() {
        // SAFETY: the handle was created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(scene) });
    }
}
