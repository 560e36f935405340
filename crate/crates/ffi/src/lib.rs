//! C ABI over `vaekit`.
//!
//! Every function returns a [`VaekitStatus`]; on failure a human-readable
//! message is available from [`vaekit_last_error`] on the same thread.
//! Models and datasets are opaque handles created by `*_load`/`*_init`/`gen_*`
//! functions and released with the matching `*_free`. Array arguments are
//! row-major `double` buffers whose lengths are implied by the size arguments.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use vaekit::analysis::{fit_glm, FitQuality, Link};
use vaekit::datasets::{gen_factor_images, load_dataset, save_dataset, LabeledDataset};
use vaekit::hypersphere::{ball_volume, shell_ratio};
use vaekit::networks::{ArchitectureSpec, VaeModel};
use vaekit::objective::{default_bandwidths, kl_per_dim, mmd_rbf_value, ssim_value, SsimParams};
use vaekit::trainer::load_checkpoint;
use vaekit::{Error, Tensor};

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VaekitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Domain = 4,
    Contract = 5,
    Spec = 6,
    Format = 7,
    Integrity = 8,
    NonFinite = 9,
    Singular = 10,
    Config = 11,
    Io = 12,
    Panic = 13,
}

/// Opaque trained or freshly initialized model.
pub struct VaekitModel {
    inner: VaeModel,
}

/// Opaque dataset.
pub struct VaekitDataset {
    inner: LabeledDataset,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VaekitShellResult {
    pub n: u32,
    pub radius: f64,
    pub epsilon: f64,
    pub ratio_exact: f64,
    pub ratio_approx: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(VaekitStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => VaekitStatus::Shape,
            Error::Domain { .. } => VaekitStatus::Domain,
            Error::Contract(_) => VaekitStatus::Contract,
            Error::Spec(_) => VaekitStatus::Spec,
            Error::Format(_) => VaekitStatus::Format,
            Error::Integrity(_) => VaekitStatus::Integrity,
            Error::NonFinite { .. } => VaekitStatus::NonFinite,
            Error::Singular(_) => VaekitStatus::Singular,
            Error::Config(_) => VaekitStatus::Config,
            Error::Io(_) => VaekitStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(VaekitStatus::NullPointer, format!("{what} is NULL"))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VaekitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VaekitStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            VaekitStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(VaekitStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Tensor, Failure> {
    Ok(Tensor::new(vec![rows, cols], data.to_vec())?)
}

/// Message describing the most recent failure on this thread (empty after a
/// success). The pointer stays valid until the next call into this library
/// from the same thread.
#[no_mangle]
pub extern "C" fn vaekit_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vaekit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vaekit_model_load(path: *const c_char, out: *mut *mut VaekitModel) -> VaekitStatus {
    guard(|| {
        let path = path_arg(path)?;
        let (model, _) = load_checkpoint(path)?;
        write_out(out, Box::into_raw(Box::new(VaekitModel { inner: model })), "out")
    })
}

/// Freshly initialized MLP model (default hidden widths) for flat inputs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vaekit_model_init_mlp(
    input_len: usize,
    latent_dim: usize,
    seed: u64,
    out: *mut *mut VaekitModel,
) -> VaekitStatus {
    guard(|| {
        let model = VaeModel::init(ArchitectureSpec::mlp(vec![input_len], latent_dim), seed)?;
        write_out(out, Box::into_raw(Box::new(VaekitModel { inner: model })), "out")
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vaekit_model_free(model: *mut VaekitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Latent dimension `d`, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vaekit_model_latent_dim(model: *const VaekitModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.latent_dim())
}

/// Number of scalars per input sample, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vaekit_model_input_len(model: *const VaekitModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec().input_len())
}

/// Encodes `batch` samples (`batch × input_len`) into `mu` and `logvar`
/// (each `batch × d`).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn vaekit_model_encode(
    model: *const VaekitModel,
    x: *const f64,
    batch: usize,
    mu: *mut f64,
    logvar: *mut f64,
) -> VaekitStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let (len, d) = (m.spec().input_len(), m.latent_dim());
        let xs = slice(x, batch * len, "x")?;
        let mut shape = vec![batch];
        shape.extend_from_slice(&m.spec().input_shape);
        let (mu_t, lv_t) = m.encode_tensor(&Tensor::new(shape, xs.to_vec())?)?;
        slice_mut(mu, batch * d, "mu")?.copy_from_slice(mu_t.data());
        slice_mut(logvar, batch * d, "logvar")?.copy_from_slice(lv_t.data());
        Ok(())
    })
}

/// Decodes `batch` latent codes (`batch × d`) into `x_hat` (`batch × input_len`).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn vaekit_model_decode(
    model: *const VaekitModel,
    z: *const f64,
    batch: usize,
    x_hat: *mut f64,
) -> VaekitStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let (len, d) = (m.spec().input_len(), m.latent_dim());
        let zs = slice(z, batch * d, "z")?;
        let out = m.decode_tensor(&matrix(zs, batch, d)?)?;
        slice_mut(x_hat, batch * len, "x_hat")?.copy_from_slice(out.data());
        Ok(())
    })
}

/// Loads a `VAED` dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vaekit_dataset_load(path: *const c_char, out: *mut *mut VaekitDataset) -> VaekitStatus {
    guard(|| {
        let ds = load_dataset(path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(VaekitDataset { inner: ds })), "out")
    })
}

/// Generates the ellipse image dataset in memory.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vaekit_dataset_gen_ellipse(
    n: usize,
    side: usize,
    seed: u64,
    out: *mut *mut VaekitDataset,
) -> VaekitStatus {
    guard(|| {
        let ds = gen_factor_images(n, side, seed)?;
        write_out(out, Box::into_raw(Box::new(VaekitDataset { inner: ds })), "out")
    })
}

/// Writes a dataset handle to a `VAED` file.
///
/// # Safety
/// `dataset` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vaekit_dataset_save(dataset: *const VaekitDataset, path: *const c_char) -> VaekitStatus {
    guard(|| {
        let ds = &dataset.as_ref().ok_or_else(|| null("dataset"))?.inner;
        save_dataset(ds, path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a dataset handle. NULL is ignored.
///
/// # Safety
/// `dataset` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vaekit_dataset_free(dataset: *mut VaekitDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vaekit_dataset_len(dataset: *const VaekitDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Scalars per sample, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vaekit_dataset_sample_len(dataset: *const VaekitDataset) -> usize {
    dataset
        .as_ref()
        .map_or(0, |d| d.inner.sample_shape().iter().product())
}

/// Copies all samples (`len × sample_len` doubles) into `out`, whose
/// capacity in doubles is `capacity`.
///
/// # Safety
/// `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn vaekit_dataset_samples(
    dataset: *const VaekitDataset,
    out: *mut f64,
    capacity: usize,
) -> VaekitStatus {
    guard(|| {
        let ds = &dataset.as_ref().ok_or_else(|| null("dataset"))?.inner;
        copy_into(ds.samples.data(), out, capacity)
    })
}

/// Copies the `len` targets into `out`; contract error if the dataset has none.
///
/// # Safety
/// `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn vaekit_dataset_targets(
    dataset: *const VaekitDataset,
    out: *mut f64,
    capacity: usize,
) -> VaekitStatus {
    guard(|| {
        let ds = &dataset.as_ref().ok_or_else(|| null("dataset"))?.inner;
        let t = ds
            .targets
            .as_ref()
            .ok_or_else(|| Failure::from(Error::Contract("dataset has no targets".into())))?;
        copy_into(t, out, capacity)
    })
}

unsafe fn copy_into(src: &[f64], out: *mut f64, capacity: usize) -> Result<(), Failure> {
    if capacity < src.len() {
        return Err(Error::Contract(format!("buffer holds {capacity} doubles, need {}", src.len())).into());
    }
    slice_mut(out, src.len(), "out")?.copy_from_slice(src);
    Ok(())
}

/// KL(N(μ, e^logvar) ‖ N(0, I)) summed over `d` and averaged over `batch`.
/// `per_dim` (may be NULL) receives the `d` per-dimension batch means.
///
/// # Safety
/// `mu` and `logvar` hold `batch × d` doubles; `per_dim` NULL or `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn vaekit_kl_standard_normal(
    mu: *const f64,
    logvar: *const f64,
    batch: usize,
    d: usize,
    total: *mut f64,
    per_dim: *mut f64,
) -> VaekitStatus {
    guard(|| {
        let mu = matrix(slice(mu, batch * d, "mu")?, batch, d)?;
        let lv = matrix(slice(logvar, batch * d, "logvar")?, batch, d)?;
        let kl = kl_per_dim(&mu, &lv)?;
        if !per_dim.is_null() {
            slice_mut(per_dim, d, "per_dim")?.copy_from_slice(&kl);
        }
        write_out(total, kl.iter().sum(), "total")
    })
}

/// Biased squared MMD between `x` (`n × d`) and `y` (`m × d`). With
/// `num_bandwidths == 0` the default set `{0.25, 0.5, 1, 2, 4}·d` is used.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn vaekit_mmd_rbf(
    x: *const f64,
    n: usize,
    y: *const f64,
    m: usize,
    d: usize,
    bandwidths: *const f64,
    num_bandwidths: usize,
    out: *mut f64,
) -> VaekitStatus {
    guard(|| {
        let xs = matrix(slice(x, n * d, "x")?, n, d)?;
        let ys = matrix(slice(y, m * d, "y")?, m, d)?;
        let bw = if num_bandwidths == 0 {
            default_bandwidths(d)
        } else {
            slice(bandwidths, num_bandwidths, "bandwidths")?.to_vec()
        };
        write_out(out, mmd_rbf_value(&xs, &ys, &bw)?, "out")
    })
}

/// Mean SSIM of two `height × width` images with a uniform `window`.
///
/// # Safety
/// `x` and `y` hold `height × width` doubles.
#[no_mangle]
pub unsafe extern "C" fn vaekit_ssim(
    x: *const f64,
    y: *const f64,
    height: usize,
    width: usize,
    window: usize,
    c1: f64,
    c2: f64,
    out: *mut f64,
) -> VaekitStatus {
    guard(|| {
        let a = matrix(slice(x, height * width, "x")?, height, width)?;
        let b = matrix(slice(y, height * width, "y")?, height, width)?;
        write_out(out, ssim_value(&a, &b, SsimParams { window, c1, c2 })?, "out")
    })
}

/// Volume of the `n`-ball of radius `radius`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vaekit_ball_volume(n: u32, radius: f64, out: *mut f64) -> VaekitStatus {
    guard(|| write_out(out, ball_volume(n, radius)?, "out"))
}

/// Volume share of the outer shell of thickness `epsilon`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vaekit_shell_ratio(
    n: u32,
    radius: f64,
    epsilon: f64,
    out: *mut VaekitShellResult,
) -> VaekitStatus {
    guard(|| {
        let s = shell_ratio(n, radius, epsilon)?;
        let r = VaekitShellResult {
            n: s.n,
            radius: s.radius,
            epsilon: s.epsilon,
            ratio_exact: s.ratio_exact,
            ratio_approx: s.ratio_approx,
        };
        write_out(out, r, "out")
    })
}

/// Fits a GLM from `latents` (`n × d`) to `targets` (`n`).
/// `coefficients` receives `d` weights followed by the intercept; `quality`
/// receives r² (identity link) or the deviance (`logistic != 0`).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn vaekit_fit_glm(
    latents: *const f64,
    n: usize,
    d: usize,
    targets: *const f64,
    logistic: bool,
    coefficients: *mut f64,
    quality: *mut f64,
) -> VaekitStatus {
    guard(|| {
        let z = matrix(slice(latents, n * d, "latents")?, n, d)?;
        let t = slice(targets, n, "targets")?;
        let link = if logistic { Link::Logistic } else { Link::Identity };
        let fit = fit_glm(&z, t, link)?;
        slice_mut(coefficients, d + 1, "coefficients")?.copy_from_slice(&fit.coefficients);
        let q = match fit.quality {
            FitQuality::RSquared(v) | FitQuality::Deviance(v) => v,
        };
        write_out(quality, q, "quality")
    })
}
