//! C ABI over the distillation kernels and their small config types.
//!
//! Conventions: every fallible call returns an [`FdStatus`] and writes its
//! result through an out pointer. On failure a thread-local message is set;
//! fetch it with [`fd_last_error`]. Heap objects cross the boundary as
//! opaque handles that must be released with their matching `_free` call.
//! Buffers are caller-allocated dense row-major float64.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fdistill::error::Error;
use fdistill::losses::{self, DistillConfig};
use fdistill::pyramid::FeaturePyramid;
use fdistill::teacher::{make_linear_schedule, NoiseSchedule};
use fdistill::tensor::Tape;
use ndarray::{ArrayD, IxDyn};

/// Result code of an FFI call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FdStatus {
    /// The call succeeded.
    FdOk = 0,
    /// A required pointer argument was null.
    FdNullPointer = 1,
    /// An argument failed validation.
    FdInvalidArgument = 2,
    /// Buffer dimensions are inconsistent or unsupported.
    FdShapeMismatch = 3,
    /// An unexpected internal failure; details via fd_last_error.
    FdInternal = 4,
}

/// Scalar fields of a distillation config addressable through the ABI.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FdDistillParam {
    FdLambdaAt = 0,
    FdPower = 1,
    FdTau = 2,
    FdLambdaD = 3,
    FdLambdaLd = 4,
    FdEps = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: FdStatus, message: &str) -> FdStatus {
    set_error(message);
    status
}

fn fail_with(err: Error) -> FdStatus {
    let status = match err {
        Error::Shape(_) => FdStatus::FdShapeMismatch,
        Error::Config(_) | Error::Index(_) => FdStatus::FdInvalidArgument,
        _ => FdStatus::FdInternal,
    };
    fail(status, &err.to_string())
}

/// Last error message raised on the calling thread.
///
/// The pointer stays valid until the next failing call on the same thread.
/// Never null; initially the empty string.
///
/// # Safety
/// The returned pointer must not be freed or written through.
#[no_mangle]
pub unsafe extern "C" fn fd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Crate version as a static nul-terminated string.
///
/// # Safety
/// The returned pointer is static; it must not be freed.
#[no_mangle]
pub unsafe extern "C" fn fd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Runs `body` behind a panic guard so unwinding never crosses the ABI.
fn guarded(body: impl FnOnce() -> FdStatus) -> FdStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in fdistill kernel".to_string());
            fail(FdStatus::FdInternal, &message)
        }
    }
}

// ---------------------------------------------------------------------------
// Noise schedule handle
// ---------------------------------------------------------------------------

/// Opaque forward-diffusion schedule (beta and cumulative-alpha tables).
pub struct FdNoiseSchedule {
    inner: NoiseSchedule,
}

/// Builds a linear noise schedule handle.
///
/// # Safety
/// `out` must be a valid pointer. On success it receives an owned handle
/// that must be released with [`fd_noise_schedule_free`].
#[no_mangle]
pub unsafe extern "C" fn fd_noise_schedule_new(
    t_total: usize,
    beta_min: f64,
    beta_max: f64,
    out: *mut *mut FdNoiseSchedule,
) -> FdStatus {
    if out.is_null() {
        return fail(FdStatus::FdNullPointer, "out pointer is null");
    }
    guarded(|| match make_linear_schedule(t_total, beta_min, beta_max) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(FdNoiseSchedule { inner }));
            FdStatus::FdOk
        }
        Err(err) => fail_with(err),
    })
}

/// Number of diffusion steps in the schedule.
///
/// # Safety
/// `schedule` must be a live handle from [`fd_noise_schedule_new`]; `out`
/// must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_noise_schedule_len(
    schedule: *const FdNoiseSchedule,
    out: *mut usize,
) -> FdStatus {
    if schedule.is_null() || out.is_null() {
        return fail(FdStatus::FdNullPointer, "schedule or out pointer is null");
    }
    *out = (*schedule).inner.t_total;
    FdStatus::FdOk
}

/// Reads `beta[t]` (one-based step index, as in the sampling loop's `t`).
///
/// # Safety
/// `schedule` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_noise_schedule_beta(
    schedule: *const FdNoiseSchedule,
    t: usize,
    out: *mut f64,
) -> FdStatus {
    if schedule.is_null() || out.is_null() {
        return fail(FdStatus::FdNullPointer, "schedule or out pointer is null");
    }
    let inner = &(*schedule).inner;
    if t == 0 || t > inner.t_total {
        return fail(
            FdStatus::FdInvalidArgument,
            &format!("step {} outside 1..={}", t, inner.t_total),
        );
    }
    *out = inner.beta[t - 1];
    FdStatus::FdOk
}

/// Reads the cumulative product `alpha_bar[t]` (one-based step index).
///
/// # Safety
/// `schedule` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_noise_schedule_alpha_bar(
    schedule: *const FdNoiseSchedule,
    t: usize,
    out: *mut f64,
) -> FdStatus {
    if schedule.is_null() || out.is_null() {
        return fail(FdStatus::FdNullPointer, "schedule or out pointer is null");
    }
    let inner = &(*schedule).inner;
    if t == 0 || t > inner.t_total {
        return fail(
            FdStatus::FdInvalidArgument,
            &format!("step {} outside 1..={}", t, inner.t_total),
        );
    }
    *out = inner.alpha_bar[t - 1];
    FdStatus::FdOk
}

/// Releases a schedule handle. Null is a no-op.
///
/// # Safety
/// `schedule` must be null or an owned handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn fd_noise_schedule_free(schedule: *mut FdNoiseSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

// ---------------------------------------------------------------------------
// Distillation config handle
// ---------------------------------------------------------------------------

/// Opaque distillation loss configuration.
pub struct FdDistillConfig {
    inner: DistillConfig,
}

/// Builds a config handle with the shipped defaults.
///
/// # Safety
/// `out` must be a valid pointer. On success it receives an owned handle
/// that must be released with [`fd_distill_config_free`].
#[no_mangle]
pub unsafe extern "C" fn fd_distill_config_new(out: *mut *mut FdDistillConfig) -> FdStatus {
    if out.is_null() {
        return fail(FdStatus::FdNullPointer, "out pointer is null");
    }
    *out = Box::into_raw(Box::new(FdDistillConfig {
        inner: DistillConfig::default(),
    }));
    FdStatus::FdOk
}

/// Reads one scalar field. The attention power is returned as a whole f64.
///
/// # Safety
/// `config` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fd_distill_config_get(
    config: *const FdDistillConfig,
    param: FdDistillParam,
    out: *mut f64,
) -> FdStatus {
    if config.is_null() || out.is_null() {
        return fail(FdStatus::FdNullPointer, "config or out pointer is null");
    }
    let cfg = &(*config).inner;
    *out = match param {
        FdDistillParam::FdLambdaAt => cfg.lambda_at,
        FdDistillParam::FdPower => cfg.p as f64,
        FdDistillParam::FdTau => cfg.tau,
        FdDistillParam::FdLambdaD => cfg.lambda_d,
        FdDistillParam::FdLambdaLd => cfg.lambda_ld,
        FdDistillParam::FdEps => cfg.eps,
    };
    FdStatus::FdOk
}

/// Writes one scalar field, validating the resulting config. The attention
/// power must be a whole number at least 1.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fd_distill_config_set(
    config: *mut FdDistillConfig,
    param: FdDistillParam,
    value: f64,
) -> FdStatus {
    if config.is_null() {
        return fail(FdStatus::FdNullPointer, "config pointer is null");
    }
    guarded(|| {
        let cfg = &mut (*config).inner;
        let mut candidate = cfg.clone();
        match param {
            FdDistillParam::FdLambdaAt => candidate.lambda_at = value,
            FdDistillParam::FdPower => {
                if value < 1.0 || value.fract() != 0.0 || value > u32::MAX as f64 {
                    return fail(
                        FdStatus::FdInvalidArgument,
                        &format!("attention power must be a whole number >= 1, got {value}"),
                    );
                }
                candidate.p = value as u32;
            }
            FdDistillParam::FdTau => candidate.tau = value,
            FdDistillParam::FdLambdaD => candidate.lambda_d = value,
            FdDistillParam::FdLambdaLd => candidate.lambda_ld = value,
            FdDistillParam::FdEps => candidate.eps = value,
        }
        if let Err(err) = candidate.validate() {
            return fail_with(err);
        }
        *cfg = candidate;
        FdStatus::FdOk
    })
}

/// Releases a config handle. Null is a no-op.
///
/// # Safety
/// `config` must be null or an owned handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn fd_distill_config_free(config: *mut FdDistillConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// ---------------------------------------------------------------------------
// Buffer kernels
// ---------------------------------------------------------------------------

/// Copies a dense [b,c,h,w] buffer into an owned array, rejecting empty or
/// overflowing dimension products.
unsafe fn array_from_raw(
    data: *const f64,
    dims: &[usize],
) -> std::result::Result<ArrayD<f64>, FdStatus> {
    let mut len = 1usize;
    for &d in dims {
        if d == 0 {
            return Err(fail(
                FdStatus::FdShapeMismatch,
                &format!("dimensions must be positive, got {dims:?}"),
            ));
        }
        len = match len.checked_mul(d) {
            Some(v) => v,
            None => {
                return Err(fail(
                    FdStatus::FdShapeMismatch,
                    &format!("dimension product overflows: {dims:?}"),
                ))
            }
        };
    }
    let slice = std::slice::from_raw_parts(data, len);
    Ok(ArrayD::from_shape_vec(IxDyn(dims), slice.to_vec()).expect("length matches shape"))
}

/// Whitens a [b,c,h,w] feature buffer: per spatial location, channels are
/// shifted and scaled to zero mean and unit variance. `out` receives b*c*h*w
/// values in the same layout.
///
/// # Safety
/// `features` must be valid for b*c*h*w reads and `out` for as many writes.
#[no_mangle]
pub unsafe extern "C" fn fd_whiten(
    features: *const f64,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    eps: f64,
    out: *mut f64,
) -> FdStatus {
    if features.is_null() || out.is_null() {
        return fail(FdStatus::FdNullPointer, "features or out pointer is null");
    }
    guarded(|| {
        if eps <= 0.0 || !eps.is_finite() {
            return fail(
                FdStatus::FdInvalidArgument,
                &format!("eps must be positive and finite, got {eps}"),
            );
        }
        let input = match array_from_raw(features, &[b, c, h, w]) {
            Ok(a) => a,
            Err(status) => return status,
        };
        let tape = Tape::<f64>::new();
        let var = losses::whiten(&tape, tape.constant(input), eps);
        let result = tape.value(var);
        let dst = std::slice::from_raw_parts_mut(out, b * c * h * w);
        dst.copy_from_slice(result.as_slice().expect("standard layout"));
        FdStatus::FdOk
    })
}

/// Channel-collapsed attention map of a [b,c,h,w] feature buffer:
/// `out[b,h,w] = sum_c |f[b,c,h,w]|^p`. `out` receives b*h*w values.
///
/// # Safety
/// `features` must be valid for b*c*h*w reads and `out` for b*h*w writes.
#[no_mangle]
pub unsafe extern "C" fn fd_attention_map(
    features: *const f64,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    p: u32,
    out: *mut f64,
) -> FdStatus {
    if features.is_null() || out.is_null() {
        return fail(FdStatus::FdNullPointer, "features or out pointer is null");
    }
    guarded(|| {
        if p < 1 {
            return fail(FdStatus::FdInvalidArgument, "attention power must be >= 1");
        }
        let input = match array_from_raw(features, &[b, c, h, w]) {
            Ok(a) => a,
            Err(status) => return status,
        };
        let tape = Tape::<f64>::new();
        let var = losses::attention_map(&tape, tape.constant(input), p);
        let result = tape.value(var);
        let dst = std::slice::from_raw_parts_mut(out, b * h * w);
        dst.copy_from_slice(result.as_slice().expect("standard layout"));
        FdStatus::FdOk
    })
}

/// Evaluates the kernels on one matched feature level.
unsafe fn single_level_loss(
    student: *const f64,
    teacher: *const f64,
    dims: [usize; 4],
    config: *const FdDistillConfig,
    out: *mut f64,
    eval: impl Fn(
        &Tape<f64>,
        &FeaturePyramid<fdistill::tensor::Var>,
        &FeaturePyramid<fdistill::tensor::Var>,
        &DistillConfig,
    ) -> fdistill::error::Result<fdistill::tensor::Var>,
) -> FdStatus {
    if student.is_null() || teacher.is_null() || config.is_null() || out.is_null() {
        return fail(FdStatus::FdNullPointer, "pointer argument is null");
    }
    guarded(|| {
        let r = match array_from_raw(student, &dims) {
            Ok(a) => a,
            Err(status) => return status,
        };
        let g = match array_from_raw(teacher, &dims) {
            Ok(a) => a,
            Err(status) => return status,
        };
        // The buffers carry no stride information, so the pair is mounted as
        // a one-level pyramid at l=2 with a matching level set.
        let mut cfg = (*config).inner.clone();
        cfg.levels = vec![2];
        let resolution = (dims[2] * 4, dims[3] * 4);
        let tape = Tape::<f64>::new();
        let to_pyramid = |a: ArrayD<f64>| {
            let pyr = FeaturePyramid::new(vec![(2u8, a)], resolution).expect("one level");
            pyr.to_tape(&tape, false)
        };
        let pyr_r = to_pyramid(r);
        let pyr_g = to_pyramid(g);
        match eval(&tape, &pyr_r, &pyr_g, &cfg) {
            Ok(var) => {
                *out = tape.scalar(var);
                FdStatus::FdOk
            }
            Err(err) => fail_with(err),
        }
    })
}

/// Whitened feature regression loss between same-shape [b,c,h,w] student
/// and teacher buffers, treated as one pyramid level.
///
/// # Safety
/// Both buffers must be valid for b*c*h*w reads; `config` must be a live
/// handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fd_feature_mse_loss(
    student: *const f64,
    teacher: *const f64,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    config: *const FdDistillConfig,
    out: *mut f64,
) -> FdStatus {
    single_level_loss(student, teacher, [b, c, h, w], config, out, |t, r, g, cfg| {
        losses::mse_distill_loss(t, r, g, cfg)
    })
}

/// Attention transfer loss between same-shape [b,c,h,w] student and teacher
/// buffers, treated as one pyramid level.
///
/// # Safety
/// Both buffers must be valid for b*c*h*w reads; `config` must be a live
/// handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fd_attention_loss(
    student: *const f64,
    teacher: *const f64,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    config: *const FdDistillConfig,
    out: *mut f64,
) -> FdStatus {
    single_level_loss(student, teacher, [b, c, h, w], config, out, |t, r, g, cfg| {
        losses::at_distill_loss(t, r, g, cfg)
    })
}

/// Soft-label distillation loss between teacher logits and student logits,
/// both [b,k,h,w], at the config's temperature.
///
/// # Safety
/// Both buffers must be valid for b*k*h*w reads; `config` must be a live
/// handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fd_label_distill_loss(
    teacher_logits: *const f64,
    student_logits: *const f64,
    b: usize,
    k: usize,
    h: usize,
    w: usize,
    config: *const FdDistillConfig,
    out: *mut f64,
) -> FdStatus {
    if teacher_logits.is_null() || student_logits.is_null() || config.is_null() || out.is_null() {
        return fail(FdStatus::FdNullPointer, "pointer argument is null");
    }
    guarded(|| {
        let g = match array_from_raw(teacher_logits, &[b, k, h, w]) {
            Ok(a) => a,
            Err(status) => return status,
        };
        let r = match array_from_raw(student_logits, &[b, k, h, w]) {
            Ok(a) => a,
            Err(status) => return status,
        };
        let cfg = &(*config).inner;
        let tape = Tape::<f64>::new();
        let vg = tape.constant(g);
        let vr = tape.constant(r);
        match losses::label_distill_loss(&tape, vg, vr, cfg) {
            Ok(var) => {
                *out = tape.scalar(var);
                FdStatus::FdOk
            }
            Err(err) => fail_with(err),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fdistill::oracles;
    use fdistill::seeding::keyed_rng;
    use rand::Rng;
    use std::ffi::CStr;

    fn random_buffer(len: usize, key: u64) -> Vec<f64> {
        let mut rng = keyed_rng(&[0xff1, key]);
        (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn version_is_package_version() {
        let s = unsafe { CStr::from_ptr(fd_version()) };
        assert_eq!(s.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn whiten_matches_oracle() {
        let (b, c, h, w) = (2usize, 5usize, 3usize, 4usize);
        let buf = random_buffer(b * c * h * w, 1);
        let mut out = vec![0.0f64; buf.len()];
        let status = unsafe { fd_whiten(buf.as_ptr(), b, c, h, w, 1e-5, out.as_mut_ptr()) };
        assert!(matches!(status, FdStatus::FdOk));
        let arr = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), buf).unwrap();
        let expect = oracles::oracle_whiten(&arr, 1e-5);
        for (a, e) in out.iter().zip(expect.iter()) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_map_matches_oracle() {
        let (b, c, h, w) = (3usize, 4usize, 2usize, 5usize);
        let buf = random_buffer(b * c * h * w, 2);
        let mut out = vec![0.0f64; b * h * w];
        let status = unsafe { fd_attention_map(buf.as_ptr(), b, c, h, w, 2, out.as_mut_ptr()) };
        assert!(matches!(status, FdStatus::FdOk));
        let arr = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), buf).unwrap();
        let expect = oracles::oracle_attention_map(&arr, 2);
        for (a, e) in out.iter().zip(expect.iter()) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn losses_match_oracles_on_single_level() {
        let (b, c, h, w) = (2usize, 6usize, 4usize, 4usize);
        let student = random_buffer(b * c * h * w, 3);
        let teacher = random_buffer(b * c * h * w, 4);
        let mut cfg: *mut FdDistillConfig = std::ptr::null_mut();
        assert!(matches!(
            unsafe { fd_distill_config_new(&mut cfg) },
            FdStatus::FdOk
        ));

        let mut mse = 0.0f64;
        let mut at = 0.0f64;
        unsafe {
            assert!(matches!(
                fd_feature_mse_loss(student.as_ptr(), teacher.as_ptr(), b, c, h, w, cfg, &mut mse),
                FdStatus::FdOk
            ));
            assert!(matches!(
                fd_attention_loss(student.as_ptr(), teacher.as_ptr(), b, c, h, w, cfg, &mut at),
                FdStatus::FdOk
            ));
        }

        let arr = |buf: &[f64]| ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), buf.to_vec()).unwrap();
        let pr = vec![arr(&student)];
        let pg = vec![arr(&teacher)];
        let mse_expect = oracles::oracle_mse(&pr, &pg, 1e-5, false);
        let at_expect = oracles::oracle_at(&pr, &pg, 2);
        assert!((mse - mse_expect).abs() <= 1e-9 * mse_expect.abs().max(1.0));
        assert!((at - at_expect).abs() <= 1e-9 * at_expect.abs().max(1.0));

        let (k, lh, lw) = (5usize, 3usize, 3usize);
        let lg = random_buffer(b * k * lh * lw, 5);
        let lr = random_buffer(b * k * lh * lw, 6);
        let mut kd = 0.0f64;
        unsafe {
            assert!(matches!(
                fd_label_distill_loss(lg.as_ptr(), lr.as_ptr(), b, k, lh, lw, cfg, &mut kd),
                FdStatus::FdOk
            ));
        }
        let ga = ArrayD::from_shape_vec(IxDyn(&[b, k, lh, lw]), lg).unwrap();
        let ra = ArrayD::from_shape_vec(IxDyn(&[b, k, lh, lw]), lr).unwrap();
        let kd_expect = oracles::oracle_kd(&ga, &ra, 4.0, false);
        assert!((kd - kd_expect).abs() <= 1e-9 * kd_expect.abs().max(1.0));

        unsafe { fd_distill_config_free(cfg) };
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let mut cfg: *mut FdDistillConfig = std::ptr::null_mut();
        unsafe {
            assert!(matches!(fd_distill_config_new(&mut cfg), FdStatus::FdOk));
            let mut v = 0.0f64;
            assert!(matches!(
                fd_distill_config_get(cfg, FdDistillParam::FdLambdaAt, &mut v),
                FdStatus::FdOk
            ));
            assert_eq!(v, 10.0);
            assert!(matches!(
                fd_distill_config_get(cfg, FdDistillParam::FdTau, &mut v),
                FdStatus::FdOk
            ));
            assert_eq!(v, 4.0);

            assert!(matches!(
                fd_distill_config_set(cfg, FdDistillParam::FdTau, 2.5),
                FdStatus::FdOk
            ));
            assert!(matches!(
                fd_distill_config_get(cfg, FdDistillParam::FdTau, &mut v),
                FdStatus::FdOk
            ));
            assert_eq!(v, 2.5);

            // Invalid values roll back without mutating the handle.
            assert!(matches!(
                fd_distill_config_set(cfg, FdDistillParam::FdTau, -1.0),
                FdStatus::FdInvalidArgument
            ));
            assert!(matches!(
                fd_distill_config_set(cfg, FdDistillParam::FdPower, 2.5),
                FdStatus::FdInvalidArgument
            ));
            assert!(matches!(
                fd_distill_config_get(cfg, FdDistillParam::FdTau, &mut v),
                FdStatus::FdOk
            ));
            assert_eq!(v, 2.5);
            let msg = CStr::from_ptr(fd_last_error()).to_str().unwrap();
            assert!(!msg.is_empty());
            fd_distill_config_free(cfg);
        }
    }

    #[test]
    fn schedule_matches_core_tables() {
        let mut handle: *mut FdNoiseSchedule = std::ptr::null_mut();
        unsafe {
            assert!(matches!(
                fd_noise_schedule_new(100, 1e-4, 2e-2, &mut handle),
                FdStatus::FdOk
            ));
            let mut len = 0usize;
            assert!(matches!(
                fd_noise_schedule_len(handle, &mut len),
                FdStatus::FdOk
            ));
            assert_eq!(len, 100);
            let reference = make_linear_schedule(100, 1e-4, 2e-2).unwrap();
            for t in [1usize, 2, 50, 100] {
                let mut beta = 0.0;
                let mut ab = 0.0;
                assert!(matches!(
                    fd_noise_schedule_beta(handle, t, &mut beta),
                    FdStatus::FdOk
                ));
                assert!(matches!(
                    fd_noise_schedule_alpha_bar(handle, t, &mut ab),
                    FdStatus::FdOk
                ));
                assert_eq!(beta, reference.beta[t - 1]);
                assert_eq!(ab, reference.alpha_bar[t - 1]);
            }
            let mut v = 0.0;
            assert!(matches!(
                fd_noise_schedule_beta(handle, 0, &mut v),
                FdStatus::FdInvalidArgument
            ));
            assert!(matches!(
                fd_noise_schedule_beta(handle, 101, &mut v),
                FdStatus::FdInvalidArgument
            ));
            fd_noise_schedule_free(handle);
        }
        let mut bad: *mut FdNoiseSchedule = std::ptr::null_mut();
        unsafe {
            assert!(matches!(
                fd_noise_schedule_new(0, 1e-4, 2e-2, &mut bad),
                FdStatus::FdInvalidArgument
            ));
        }
        assert!(bad.is_null());
    }

    #[test]
    fn null_and_shape_errors_are_reported() {
        let buf = [1.0f64; 8];
        let mut out = [0.0f64; 8];
        unsafe {
            assert!(matches!(
                fd_whiten(std::ptr::null(), 1, 2, 2, 2, 1e-5, out.as_mut_ptr()),
                FdStatus::FdNullPointer
            ));
            assert!(matches!(
                fd_whiten(buf.as_ptr(), 1, 0, 2, 2, 1e-5, out.as_mut_ptr()),
                FdStatus::FdShapeMismatch
            ));
            assert!(matches!(
                fd_whiten(buf.as_ptr(), 1, 2, 2, 2, 0.0, out.as_mut_ptr()),
                FdStatus::FdInvalidArgument
            ));
            let msg = CStr::from_ptr(fd_last_error()).to_str().unwrap();
            assert!(msg.contains("eps"));
        }
    }
}
