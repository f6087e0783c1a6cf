//! C interface to the morphbench generator, image metric, biometric scoring
//! and vulnerability metrics.
//!
//! Every fallible function returns an [`MbStatus`]. On failure the message is
//! kept per thread and can be read with [`mb_last_error`]. Objects are opaque
//! handles created by `*_init` / `*_load` and released with the matching
//! `*_free`. Output buffers are caller-allocated and their lengths are
//! checked.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use morphbench::msssim::{ms_ssim, MsSsimConfig};
use morphbench::nets::{match_score, Biometric, BiometricConfig};
use morphbench::stylegen::{Generator, GeneratorConfig, LatentStack};
use morphbench::vulneval::{self, RocPoint, ScoreSet};
use morphbench::{Error, Tensor};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingInput = 4,
    Dimensions = 5,
    Numeric = 6,
    Io = 7,
    Panic = 8,
}

/// Generator handle.
pub struct MbGenerator {
    inner: Generator,
}

/// Biometric embedder handle.
pub struct MbBiometric {
    inner: Biometric,
}

/// ROC curve handle.
pub struct MbRoc {
    points: Vec<RocPoint>,
}

#[repr(C)]
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct MbRates {
    pub far: f64,
    pub frr: f64,
    pub mmpmr: f64,
    pub rmmr: f64,
}

/// One ROC point. `has_far` is 0 when no imposter scores were given, and
/// `far` is then NaN.
#[repr(C)]
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct MbRocPoint {
    pub threshold: f64,
    pub frr: f64,
    pub mmpmr: f64,
    pub far: f64,
    pub has_far: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MbStatus {
    match e {
        Error::Config(_) | Error::Json(_) => MbStatus::Config,
        Error::Missing { .. } | Error::Format(_) | Error::Png(_) => MbStatus::MissingInput,
        Error::Shape { .. } | Error::Dims(_) => MbStatus::Dimensions,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::EmptyScores { .. } => MbStatus::Numeric,
        Error::Io(_) => MbStatus::Io,
        _ => MbStatus::InvalidArgument,
    }
}

struct Fail(MbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MbStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MbStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            MbStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MbStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(
            MbStatus::Dimensions,
            format!("{what} has length {got}, expected {want}"),
        ));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn mb_status_name(status: MbStatus) -> *const c_char {
    let s: &'static CStr = match status {
        MbStatus::Ok => c"ok",
        MbStatus::NullPointer => c"null pointer",
        MbStatus::InvalidArgument => c"invalid argument",
        MbStatus::Config => c"configuration error",
        MbStatus::MissingInput => c"missing input",
        MbStatus::Dimensions => c"incompatible dimensions",
        MbStatus::Numeric => c"numeric error",
        MbStatus::Io => c"i/o error",
        MbStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Create a generator with the default 32x32 configuration.
///
/// # Safety
/// `out_gen` must be a valid pointer to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn mb_generator_init(seed: u64, out_gen: *mut *mut MbGenerator) -> MbStatus {
    guard(|| {
        let o = out(out_gen, "out_gen")?;
        let inner = Generator::init(seed, GeneratorConfig::default())?;
        *o = Box::into_raw(Box::new(MbGenerator { inner }));
        Ok(())
    })
}

/// Load a generator saved by the command-line tool.
///
/// # Safety
/// `dir` must be a nul-terminated string; `out_gen` as for `mb_generator_init`.
#[no_mangle]
pub unsafe extern "C" fn mb_generator_load(dir: *const c_char, out_gen: *mut *mut MbGenerator) -> MbStatus {
    guard(|| {
        let o = out(out_gen, "out_gen")?;
        let inner = Generator::load(path(dir)?)?;
        *o = Box::into_raw(Box::new(MbGenerator { inner }));
        Ok(())
    })
}

/// # Safety
/// `gen` must come from `mb_generator_init`/`mb_generator_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn mb_generator_free(gen: *mut MbGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Latent layout and image size of a generator.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mb_generator_dims(
    gen: *const MbGenerator,
    layers: *mut usize,
    style_dim: *mut usize,
    resolution: *mut usize,
) -> MbStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| null("gen"))?;
        let c = g.inner.config;
        *out(layers, "layers")? = c.layers;
        *out(style_dim, "style_dim")? = c.style_dim;
        *out(resolution, "resolution")? = c.resolution;
        Ok(())
    })
}

/// Render a `[layers, style_dim]` latent stack (row-major) into an
/// `[R, R, 3]` image with values in [0, 1].
///
/// # Safety
/// `w` must point to `w_len` floats and `image` to `image_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mb_synthesize(
    gen: *const MbGenerator,
    w: *const f32,
    w_len: usize,
    image: *mut f32,
    image_len: usize,
) -> MbStatus {
    guard(|| {
        let g = &gen.as_ref().ok_or_else(|| null("gen"))?.inner;
        let c = g.config;
        let w = slice(w, w_len, "w")?;
        check_len(w_len, c.layers * c.style_dim, "w")?;
        let [h, wd, ch] = c.image_shape();
        check_len(image_len, h * wd * ch, "image")?;
        let dst = slice_mut(image, image_len, "image")?;
        let stack = LatentStack::new(Tensor::new(vec![c.layers, c.style_dim], w.to_vec())?)?;
        dst.copy_from_slice(g.synthesize(&stack)?.data());
        Ok(())
    })
}

/// MS-SSIM of two `[height, width, channels]` images (default window 11,
/// sigma 1.5, dynamic range 1).
///
/// # Safety
/// `a` and `b` must each point to `height * width * channels` floats.
#[no_mangle]
pub unsafe extern "C" fn mb_ms_ssim(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    result: *mut f64,
) -> MbStatus {
    guard(|| {
        let n = height * width * channels;
        let shape = vec![height, width, channels];
        let ta = Tensor::new(shape.clone(), slice(a, n, "a")?.iter().map(|&v| v as f64).collect())?;
        let tb = Tensor::new(shape, slice(b, n, "b")?.iter().map(|&v| v as f64).collect())?;
        *out(result, "result")? = ms_ssim(&ta, &tb, &MsSsimConfig::default())?;
        Ok(())
    })
}

/// Create an untrained biometric embedder with the default configuration.
///
/// # Safety
/// `out_bio` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mb_biometric_init(seed: u64, out_bio: *mut *mut MbBiometric) -> MbStatus {
    guard(|| {
        let o = out(out_bio, "out_bio")?;
        let inner = Biometric::init(seed, BiometricConfig::default())?;
        *o = Box::into_raw(Box::new(MbBiometric { inner }));
        Ok(())
    })
}

/// Load an embedder saved by the command-line tool.
///
/// # Safety
/// `dir` must be a nul-terminated string; `out_bio` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mb_biometric_load(dir: *const c_char, out_bio: *mut *mut MbBiometric) -> MbStatus {
    guard(|| {
        let o = out(out_bio, "out_bio")?;
        let inner = Biometric::load(path(dir)?)?;
        *o = Box::into_raw(Box::new(MbBiometric { inner }));
        Ok(())
    })
}

/// # Safety
/// `bio` must come from `mb_biometric_init`/`mb_biometric_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn mb_biometric_free(bio: *mut MbBiometric) {
    if !bio.is_null() {
        drop(Box::from_raw(bio));
    }
}

/// Unit-norm embedding of an `[R, R, 3]` image.
///
/// # Safety
/// `image` must point to `image_len` floats, `embedding` to `embedding_len`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn mb_biometric_embed(
    bio: *const MbBiometric,
    image: *const f32,
    image_len: usize,
    embedding: *mut f32,
    embedding_len: usize,
) -> MbStatus {
    guard(|| {
        let b = &bio.as_ref().ok_or_else(|| null("bio"))?.inner;
        let r = b.config.resolution;
        check_len(image_len, r * r * 3, "image")?;
        check_len(embedding_len, b.config.embed_dim, "embedding")?;
        let x = Tensor::new(vec![r, r, 3], slice(image, image_len, "image")?.to_vec())?;
        let e = b.embed(&x)?;
        slice_mut(embedding, embedding_len, "embedding")?.copy_from_slice(e.data());
        Ok(())
    })
}

/// Cosine match score of two unit embeddings, clamped to [-1, 1].
///
/// # Safety
/// `u` and `v` must each point to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn mb_match_score(u: *const f32, v: *const f32, len: usize, score: *mut f64) -> MbStatus {
    guard(|| {
        if len == 0 {
            return Err(Fail(MbStatus::InvalidArgument, "empty embeddings".into()));
        }
        let tu = Tensor::new(vec![len], slice(u, len, "u")?.to_vec())?;
        let tv = Tensor::new(vec![len], slice(v, len, "v")?.to_vec())?;
        *out(score, "score")? = match_score(&tu, &tv);
        Ok(())
    })
}

/// Smallest observed imposter score `t` with FAR(t) <= target (scores at or
/// above `t` are accepted).
///
/// # Safety
/// `imposter` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mb_threshold_at_far(
    imposter: *const f64,
    n: usize,
    target_far: f64,
    threshold: *mut f64,
) -> MbStatus {
    guard(|| {
        *out(threshold, "threshold")? = vulneval::threshold_at_far(slice(imposter, n, "imposter")?, target_far)?;
        Ok(())
    })
}

/// Largest observed genuine score `t` with FRR(t) <= target.
///
/// # Safety
/// `genuine` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mb_threshold_at_frr(
    genuine: *const f64,
    n: usize,
    target_frr: f64,
    threshold: *mut f64,
) -> MbStatus {
    guard(|| {
        *out(threshold, "threshold")? = vulneval::threshold_at_frr(slice(genuine, n, "genuine")?, target_frr)?;
        Ok(())
    })
}

unsafe fn score_set(
    genuine: *const f64,
    n_genuine: usize,
    imposter: *const f64,
    n_imposter: usize,
    mmmss: *const f64,
    n_mmmss: usize,
) -> Result<ScoreSet, Fail> {
    Ok(ScoreSet {
        genuine: slice(genuine, n_genuine, "genuine")?.to_vec(),
        imposter: slice(imposter, n_imposter, "imposter")?.to_vec(),
        mmmss: slice(mmmss, n_mmmss, "mmmss")?.to_vec(),
    })
}

/// FAR, FRR, MMPMR and RMMR at threshold `t`. All three lists must be
/// non-empty.
///
/// # Safety
/// Each list pointer must point to its stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn mb_rates_at(
    genuine: *const f64,
    n_genuine: usize,
    imposter: *const f64,
    n_imposter: usize,
    mmmss: *const f64,
    n_mmmss: usize,
    t: f64,
    rates: *mut MbRates,
) -> MbStatus {
    guard(|| {
        let s = score_set(genuine, n_genuine, imposter, n_imposter, mmmss, n_mmmss)?;
        let r = vulneval::rates_at(&s, t)?;
        *out(rates, "rates")? = MbRates {
            far: r.far,
            frr: r.frr,
            mmpmr: r.mmpmr,
            rmmr: r.rmmr,
        };
        Ok(())
    })
}

/// MMPMR-vs-FRR curve. `imposter` may be empty, in which case every point
/// has `has_far = 0`.
///
/// # Safety
/// List pointers as for `mb_rates_at`; `out_roc` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mb_roc(
    genuine: *const f64,
    n_genuine: usize,
    imposter: *const f64,
    n_imposter: usize,
    mmmss: *const f64,
    n_mmmss: usize,
    out_roc: *mut *mut MbRoc,
) -> MbStatus {
    guard(|| {
        let o = out(out_roc, "out_roc")?;
        let s = score_set(genuine, n_genuine, imposter, n_imposter, mmmss, n_mmmss)?;
        let points = vulneval::roc_mmpmr_frr(&s)?;
        *o = Box::into_raw(Box::new(MbRoc { points }));
        Ok(())
    })
}

/// Number of points on a curve; 0 for a null handle.
///
/// # Safety
/// `roc` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mb_roc_len(roc: *const MbRoc) -> usize {
    roc.as_ref().map_or(0, |r| r.points.len())
}

/// # Safety
/// `roc` must be a live handle and `point` valid.
#[no_mangle]
pub unsafe extern "C" fn mb_roc_point(roc: *const MbRoc, index: usize, point: *mut MbRocPoint) -> MbStatus {
    guard(|| {
        let r = roc.as_ref().ok_or_else(|| null("roc"))?;
        let p = r.points.get(index).ok_or_else(|| {
            Fail(
                MbStatus::InvalidArgument,
                format!("index {index} out of range for {} points", r.points.len()),
            )
        })?;
        *out(point, "point")? = MbRocPoint {
            threshold: p.threshold,
            frr: p.frr,
            mmpmr: p.mmpmr,
            far: p.far.unwrap_or(f64::NAN),
            has_far: p.far.is_some() as i32,
        };
        Ok(())
    })
}

/// # Safety
/// `roc` must come from `mb_roc` or be null.
#[no_mangle]
pub unsafe extern "C" fn mb_roc_free(roc: *mut MbRoc) {
    if !roc.is_null() {
        drop(Box::from_raw(roc));
    }
}
