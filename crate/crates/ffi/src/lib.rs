//! C ABI over `rdm-core`.
//!
//! Every function returns an [`RdmStatus`]. On failure a message for the
//! calling thread is available from [`rdm_last_error`]. Handles are opaque
//! and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use std::slice;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdm_core::checkpoint::Checkpoint;
use rdm_core::denoiser::{Denoiser, TrainableDenoiser};
use rdm_core::processes::{backward_branch, NoiseDistribution};
use rdm_core::sampler::{sample, uniform_steps, DecodeMode, DecodeOptions, KScheduleKind, RoutingStrategy};
use rdm_core::schedules::AlphaSchedule;
use rdm_core::verify::{run_suite, VerifyOptions};
use rdm_core::{Categorical, Error};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Singular = 4,
    Impossible = 5,
    Format = 6,
    Io = 7,
    Config = 8,
    Divergence = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdmNoiseKind {
    Uniform = 0,
    /// Mask at id `K - 1`.
    Absorbing = 1,
    /// Probabilities supplied by the caller.
    Custom = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdmStrategy {
    Stochastic = 0,
    AdaptiveCosine = 1,
    AdaptiveLinear = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdmDecodeMode {
    Argmax = 0,
    Sample = 1,
}

/// A validated noise schedule.
pub struct RdmSchedule {
    inner: AlphaSchedule,
}

/// A loaded checkpoint: sampling weights, schedule and noise.
pub struct RdmModel {
    model: TrainableDenoiser,
    schedule: AlphaSchedule,
    noise: NoiseDistribution,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RdmStatus {
    match e {
        Error::InvalidArgument(_) | Error::TokenOutOfRange { .. } | Error::InvalidSchedule(_) => RdmStatus::InvalidArgument,
        Error::Shape { .. } => RdmStatus::ShapeMismatch,
        Error::Singular(_) => RdmStatus::Singular,
        Error::Impossible(_) => RdmStatus::Impossible,
        Error::Format(_) | Error::Json(_) => RdmStatus::Format,
        Error::Io(_) => RdmStatus::Io,
        Error::Config(_) => RdmStatus::Config,
        Error::Divergence(_) => RdmStatus::Divergence,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> RdmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RdmStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            RdmStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            RdmStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn nonnull_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn need(len: usize, want: usize) -> Result<(), Fail> {
    if len < want {
        Err(Fail::Core(Error::Shape { expected: want, got: len }))
    } else {
        Ok(())
    }
}

/// Message describing the last failure on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rdm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Linear schedule `alpha_t = 1 - t / T`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn rdm_schedule_linear(steps: usize, out: *mut *mut RdmSchedule) -> RdmStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        let inner = AlphaSchedule::linear(steps)?;
        *out = Box::into_raw(Box::new(RdmSchedule { inner }));
        Ok(())
    })
}

/// Schedule from `len` alpha values (`alpha[0] = 1`, strictly decreasing).
///
/// # Safety
/// `alpha` must point to `len` doubles and `out` to storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn rdm_schedule_from_alpha(alpha: *const f64, len: usize, out: *mut *mut RdmSchedule) -> RdmStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        let values = input(alpha, len, "alpha")?.to_vec();
        let inner = AlphaSchedule::from_alpha(values)?;
        *out = Box::into_raw(Box::new(RdmSchedule { inner }));
        Ok(())
    })
}

/// # Safety
/// `sched` must be null or a handle from an `rdm_schedule_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn rdm_schedule_free(sched: *mut RdmSchedule) {
    if !sched.is_null() {
        drop(Box::from_raw(sched));
    }
}

/// Number of steps `T`.
///
/// # Safety
/// `sched` must be a live schedule handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rdm_schedule_steps(sched: *const RdmSchedule, out: *mut usize) -> RdmStatus {
    guard(|| {
        *nonnull_mut(out, "out")? = nonnull(sched, "sched")?.inner.steps();
        Ok(())
    })
}

/// `alpha_t` for `t` in `0..=T`.
///
/// # Safety
/// `sched` must be a live schedule handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rdm_schedule_alpha(sched: *const RdmSchedule, t: usize, out: *mut f64) -> RdmStatus {
    guard(|| {
        let sched = &nonnull(sched, "sched")?.inner;
        let out = nonnull_mut(out, "out")?;
        if t > sched.steps() {
            return Err(Fail::Core(Error::InvalidArgument(format!("t = {t} exceeds T = {}", sched.steps()))));
        }
        *out = sched.alpha(t);
        Ok(())
    })
}

/// Routing coefficients for the jump `t -> s` given `q_noise(x_t)`.
///
/// # Safety
/// `sched` must be a live schedule handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdm_schedule_lambda(
    sched: *const RdmSchedule,
    s: usize,
    t: usize,
    noise_mass: f64,
    lambda1: *mut f64,
    lambda2: *mut f64,
) -> RdmStatus {
    guard(|| {
        let sched = &nonnull(sched, "sched")?.inner;
        let l1 = nonnull_mut(lambda1, "lambda1")?;
        let l2 = nonnull_mut(lambda2, "lambda2")?;
        let c = sched.coefficients(s, t, noise_mass)?;
        *l1 = c.lambda1;
        *l2 = c.lambda2;
        Ok(())
    })
}

unsafe fn noise_from(kind: RdmNoiseKind, k: usize, probs: *const f64) -> Result<NoiseDistribution, Fail> {
    if k < 2 {
        return Err(Fail::Core(Error::InvalidArgument(format!("vocabulary size {k} is too small"))));
    }
    Ok(match kind {
        RdmNoiseKind::Uniform => NoiseDistribution::uniform(k),
        RdmNoiseKind::Absorbing => NoiseDistribution::absorbing(k),
        RdmNoiseKind::Custom => NoiseDistribution::custom(Categorical::new(input(probs, k, "probs")?.to_vec())?),
    })
}

/// Writes `q(x_s | x_t, x_0)` into `out[0..K]`. `probs` is read only for
/// custom noise and must then hold `K` values.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn rdm_backward_branch(
    sched: *const RdmSchedule,
    kind: RdmNoiseKind,
    k: usize,
    probs: *const f64,
    x_t: usize,
    x0: usize,
    s: usize,
    t: usize,
    out: *mut f64,
    out_len: usize,
) -> RdmStatus {
    guard(|| {
        let sched = &nonnull(sched, "sched")?.inner;
        let noise = noise_from(kind, k, probs)?;
        need(out_len, k)?;
        let out = output(out, out_len, "out")?;
        let dist = backward_branch(x_t, x0, s, t, sched, &noise)?;
        out[..k].copy_from_slice(dist.probs());
        Ok(())
    })
}

/// Loads a checkpoint, preferring its EMA weights.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rdm_model_load(path: *const c_char, out: *mut *mut RdmModel) -> RdmStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail::Core(Error::InvalidArgument("path is not UTF-8".into())))?;
        let ck = Checkpoint::load(Path::new(path))?;
        let handle = RdmModel {
            model: ck.sampling_model()?,
            schedule: ck.schedule()?,
            noise: ck.noise.clone(),
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`rdm_model_load`].
#[no_mangle]
pub unsafe extern "C" fn rdm_model_free(model: *mut RdmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, maximum sequence length, step count and whether the
/// model expects a condition.
///
/// # Safety
/// `model` must be live; every non-null output must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdm_model_info(
    model: *const RdmModel,
    vocab: *mut usize,
    max_len: *mut usize,
    steps: *mut usize,
    conditioned: *mut bool,
) -> RdmStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        if let Some(v) = vocab.as_mut() {
            *v = m.model.arch.vocab;
        }
        if let Some(v) = max_len.as_mut() {
            *v = m.model.arch.max_len;
        }
        if let Some(v) = steps.as_mut() {
            *v = m.schedule.steps();
        }
        if let Some(v) = conditioned.as_mut() {
            *v = m.model.arch.conditioned;
        }
        Ok(())
    })
}

unsafe fn condition<'a>(cond: *const usize, cond_len: usize) -> Result<Option<&'a [usize]>, Fail> {
    if cond.is_null() && cond_len == 0 {
        Ok(None)
    } else {
        Ok(Some(input(cond, cond_len, "cond")?))
    }
}

/// Per-position predictions as a row-major `n x K` matrix.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `cond` may be null when
/// `cond_len` is 0.
#[no_mangle]
pub unsafe extern "C" fn rdm_model_predict(
    model: *const RdmModel,
    tokens: *const usize,
    n: usize,
    t: usize,
    cond: *const usize,
    cond_len: usize,
    out: *mut f64,
    out_len: usize,
) -> RdmStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let tokens = input(tokens, n, "tokens")?;
        let k = m.model.arch.vocab;
        need(out_len, n * k)?;
        let out = output(out, out_len, "out")?;
        let pred = m.model.predict(tokens, t, condition(cond, cond_len)?)?;
        for (i, f) in pred.per_position.iter().enumerate() {
            out[i * k..(i + 1) * k].copy_from_slice(f.probs());
        }
        Ok(())
    })
}

/// Samples one sequence of length `n` with `steps` evenly spaced reverse steps.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `cond` may be null when
/// `cond_len` is 0.
#[no_mangle]
pub unsafe extern "C" fn rdm_model_sample(
    model: *const RdmModel,
    n: usize,
    steps: usize,
    strategy: RdmStrategy,
    tau: f64,
    mode: RdmDecodeMode,
    cond: *const usize,
    cond_len: usize,
    seed: u64,
    out: *mut usize,
    out_len: usize,
) -> RdmStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        need(out_len, n)?;
        let out = output(out, out_len, "out")?;
        let schedule = uniform_steps(m.schedule.steps(), steps)?;
        let opts = DecodeOptions {
            strategy: match strategy {
                RdmStrategy::Stochastic => RoutingStrategy::Stochastic,
                RdmStrategy::AdaptiveCosine => RoutingStrategy::adaptive(KScheduleKind::Cosine),
                RdmStrategy::AdaptiveLinear => RoutingStrategy::adaptive(KScheduleKind::Linear),
            },
            tau,
            mode: match mode {
                RdmDecodeMode::Argmax => DecodeMode::Argmax,
                RdmDecodeMode::Sample => DecodeMode::Sample,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = sample(
            &m.model,
            n,
            &schedule,
            &m.schedule,
            &m.noise,
            &opts,
            condition(cond, cond_len)?,
            &mut rng,
        )?;
        out[..n].copy_from_slice(&row);
        Ok(())
    })
}

/// Runs the full verification suite with `draws` Monte Carlo samples per
/// statistical test. `passed` receives the number of passing checks and
/// `total` the number run.
///
/// # Safety
/// Outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdm_verify(seed: u64, draws: usize, passed: *mut usize, total: *mut usize) -> RdmStatus {
    guard(|| {
        let passed = nonnull_mut(passed, "passed")?;
        let total = nonnull_mut(total, "total")?;
        let opts = VerifyOptions {
            seed,
            draws,
            ..Default::default()
        };
        let reports = run_suite(&opts, None)?;
        *passed = reports.iter().filter(|r| r.passed).count();
        *total = reports.len();
        Ok(())
    })
}

