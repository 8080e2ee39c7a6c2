//! C ABI for the schedulability-analysis library and the message codec.
//!
//! The surface follows the usual conventions for embedding from other
//! languages: opaque handles created and destroyed by paired functions,
//! integer status codes, caller-provided output buffers, and a
//! thread-local `tempo_last_error` string for diagnostics. Times cross
//! the boundary as `double` milliseconds and are converted to the
//! library's exact microsecond base internally, so fractional values like
//! 14.5 ms stay exact.
//!
//! The header `include/tempo.h` is generated from these declarations at
//! build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;
use tempo_core::message;
use tempo_core::sched::sim::{simulate_schedule, Policy, SimOptions};
use tempo_core::sched::{
    self, response_time_analysis, AnalysisError, ResponseTime, TaskSet, TaskSpec, Verdict,
};
use tempo_core::time::ms_to_us;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TempoStatus {
    TempoOk = 0,
    TempoInvalidArgument = 1,
    TempoAssumptionViolated = 2,
    TempoParseError = 3,
    TempoBufferTooSmall = 4,
}

/// Verdict of the sufficient-only schedulability bounds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TempoVerdict {
    TempoGuaranteed = 0,
    TempoInconclusive = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let c = CString::new(msg.to_string()).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: TempoStatus, msg: impl std::fmt::Display) -> TempoStatus {
    set_error(msg);
    status
}

fn analysis_status(e: &AnalysisError) -> TempoStatus {
    match e {
        AnalysisError::AssumptionViolated { .. } => TempoStatus::TempoAssumptionViolated,
        _ => TempoStatus::TempoInvalidArgument,
    }
}

/// Most recent error message on this thread, valid until the next failing
/// call. Never null.
#[no_mangle]
pub extern "C" fn tempo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Task sets
// ---------------------------------------------------------------------------

/// Opaque periodic task set under construction.
pub struct TempoTaskSet {
    tasks: Vec<TaskSpec>,
}

impl TempoTaskSet {
    fn build(&self) -> Result<TaskSet, AnalysisError> {
        TaskSet::new(self.tasks.clone())
    }
}

/// Creates an empty task set. Free with `tempo_taskset_free`.
#[no_mangle]
pub extern "C" fn tempo_taskset_new() -> *mut TempoTaskSet {
    Box::into_raw(Box::new(TempoTaskSet { tasks: Vec::new() }))
}

/// # Safety
/// `ts` must be a pointer from `tempo_taskset_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tempo_taskset_free(ts: *mut TempoTaskSet) {
    if !ts.is_null() {
        drop(unsafe { Box::from_raw(ts) });
    }
}

/// Adds a task. `deadline_ms <= 0` defaults the deadline to the period.
///
/// # Safety
/// `ts` must be a live task-set handle; `name` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tempo_taskset_add(
    ts: *mut TempoTaskSet,
    name: *const c_char,
    exec_ms: f64,
    period_ms: f64,
    deadline_ms: f64,
    blocking_ms: f64,
) -> TempoStatus {
    let Some(ts) = (unsafe { ts.as_mut() }) else {
        return fail(TempoStatus::TempoInvalidArgument, "null task set");
    };
    if name.is_null() {
        return fail(TempoStatus::TempoInvalidArgument, "null task name");
    }
    let name = match unsafe { CStr::from_ptr(name) }.to_str() {
        Ok(s) => s.to_string(),
        Err(_) => return fail(TempoStatus::TempoInvalidArgument, "task name is not UTF-8"),
    };
    let conv = |v: f64, what: &str| {
        ms_to_us(v).map_err(|e| format!("{what}: {e}"))
    };
    let exec_us = match conv(exec_ms, "exec_ms") {
        Ok(v) => v,
        Err(e) => return fail(TempoStatus::TempoInvalidArgument, e),
    };
    let period_us = match conv(period_ms, "period_ms") {
        Ok(v) => v,
        Err(e) => return fail(TempoStatus::TempoInvalidArgument, e),
    };
    let deadline_us = if deadline_ms <= 0.0 {
        period_us
    } else {
        match conv(deadline_ms, "deadline_ms") {
            Ok(v) => v,
            Err(e) => return fail(TempoStatus::TempoInvalidArgument, e),
        }
    };
    let blocking_us = match conv(blocking_ms.max(0.0), "blocking_ms") {
        Ok(v) => v,
        Err(e) => return fail(TempoStatus::TempoInvalidArgument, e),
    };
    let spec = TaskSpec::new(name, exec_us, period_us)
        .with_deadline(deadline_us)
        .with_blocking(blocking_us);
    if let Err(e) = spec.validate() {
        return fail(TempoStatus::TempoInvalidArgument, e);
    }
    ts.tasks.push(spec);
    TempoStatus::TempoOk
}

macro_rules! build_or_fail {
    ($ts:expr) => {
        match unsafe { $ts.as_ref() }.map(TempoTaskSet::build) {
            Some(Ok(set)) => set,
            Some(Err(e)) => return fail(analysis_status(&e), e),
            None => return fail(TempoStatus::TempoInvalidArgument, "null task set"),
        }
    };
}

/// Exact processor utilization factor.
///
/// # Safety
/// `ts` live handle; `out` valid for one double.
#[no_mangle]
pub unsafe extern "C" fn tempo_utilization(ts: *const TempoTaskSet, out: *mut f64) -> TempoStatus {
    let set = build_or_fail!(ts);
    if out.is_null() {
        return fail(TempoStatus::TempoInvalidArgument, "null output");
    }
    unsafe { *out = sched::utilization(&set) };
    TempoStatus::TempoOk
}

/// Least upper rate-monotonic utilization bound for `n` tasks.
///
/// # Safety
/// `out` valid for one double.
#[no_mangle]
pub unsafe extern "C" fn tempo_rm_lub(n: usize, out: *mut f64) -> TempoStatus {
    match sched::rm_lub(n) {
        Ok(v) if !out.is_null() => {
            unsafe { *out = v };
            TempoStatus::TempoOk
        }
        Ok(_) => fail(TempoStatus::TempoInvalidArgument, "null output"),
        Err(e) => fail(TempoStatus::TempoInvalidArgument, e),
    }
}

fn verdict_code(v: Verdict) -> TempoVerdict {
    match v {
        Verdict::Guaranteed => TempoVerdict::TempoGuaranteed,
        Verdict::Inconclusive => TempoVerdict::TempoInconclusive,
    }
}

/// Rate-monotonic utilization-bound test (sufficient only).
///
/// # Safety
/// `ts` live handle; `verdict` valid for one value.
#[no_mangle]
pub unsafe extern "C" fn tempo_rm_schedulable(
    ts: *const TempoTaskSet,
    verdict: *mut TempoVerdict,
) -> TempoStatus {
    let set = build_or_fail!(ts);
    match sched::rm_schedulable_lub(&set) {
        Ok(v) if !verdict.is_null() => {
            unsafe { *verdict = verdict_code(v) };
            TempoStatus::TempoOk
        }
        Ok(_) => fail(TempoStatus::TempoInvalidArgument, "null output"),
        Err(e) => fail(analysis_status(&e), e),
    }
}

/// EDF exact schedulability for implicit deadlines: writes 1 or 0.
///
/// # Safety
/// `ts` live handle; `schedulable` valid for one int.
#[no_mangle]
pub unsafe extern "C" fn tempo_edf_schedulable(
    ts: *const TempoTaskSet,
    schedulable: *mut i32,
) -> TempoStatus {
    let set = build_or_fail!(ts);
    match sched::edf_schedulable(&set) {
        Ok(v) if !schedulable.is_null() => {
            unsafe { *schedulable = v as i32 };
            TempoStatus::TempoOk
        }
        Ok(_) => fail(TempoStatus::TempoInvalidArgument, "null output"),
        Err(e) => fail(analysis_status(&e), e),
    }
}

/// Blocking-aware rate-monotonic bound under priority inheritance.
///
/// # Safety
/// `ts` live handle; `verdict` valid for one value.
#[no_mangle]
pub unsafe extern "C" fn tempo_rm_pip_schedulable(
    ts: *const TempoTaskSet,
    verdict: *mut TempoVerdict,
) -> TempoStatus {
    let set = build_or_fail!(ts);
    match sched::rm_pip_schedulable(&set) {
        Ok(v) if !verdict.is_null() => {
            unsafe { *verdict = verdict_code(v) };
            TempoStatus::TempoOk
        }
        Ok(_) => fail(TempoStatus::TempoInvalidArgument, "null output"),
        Err(e) => fail(analysis_status(&e), e),
    }
}

/// Iterative response-time analysis. Writes one value per task, in
/// rate-monotonic order, into `out_ms` (milliseconds; -1.0 marks a
/// divergent task). `cap` is the capacity of `out_ms`; the number of
/// tasks is written to `written`.
///
/// # Safety
/// `ts` live handle; `out_ms` valid for `cap` doubles; `written` for one
/// size_t.
#[no_mangle]
pub unsafe extern "C" fn tempo_response_times(
    ts: *const TempoTaskSet,
    out_ms: *mut f64,
    cap: usize,
    written: *mut usize,
) -> TempoStatus {
    let set = build_or_fail!(ts);
    let results = response_time_analysis(&set);
    if !written.is_null() {
        unsafe { *written = results.len() };
    }
    if results.len() > cap {
        return fail(
            TempoStatus::TempoBufferTooSmall,
            format!("need capacity {}, have {cap}", results.len()),
        );
    }
    if out_ms.is_null() {
        return fail(TempoStatus::TempoInvalidArgument, "null output");
    }
    for (i, r) in results.iter().enumerate() {
        let v = match r {
            ResponseTime::Converged(us) => *us as f64 / 1000.0,
            ResponseTime::Divergent => -1.0,
        };
        unsafe { *out_ms.add(i) = v };
    }
    TempoStatus::TempoOk
}

/// Discrete-event schedule simulation with synchronous release. `edf`
/// selects the policy (0 = fixed-priority rate-monotonic), `pip` enables
/// priority inheritance, `horizon_ms <= 0` simulates one hyperperiod.
/// Writes the deadline-miss count and, when `worst_ms` has capacity, the
/// worst observed response time per task (-1.0 when a task never
/// finished a job).
///
/// # Safety
/// `ts` live handle; `misses` valid for one uint64; `worst_ms` valid for
/// `cap` doubles (may be null with cap 0).
#[no_mangle]
pub unsafe extern "C" fn tempo_simulate(
    ts: *const TempoTaskSet,
    edf: i32,
    pip: i32,
    horizon_ms: f64,
    misses: *mut u64,
    worst_ms: *mut f64,
    cap: usize,
) -> TempoStatus {
    let set = build_or_fail!(ts);
    let horizon = if horizon_ms <= 0.0 {
        match set.hyperperiod_us() {
            Ok(h) => h,
            Err(e) => return fail(TempoStatus::TempoInvalidArgument, e),
        }
    } else {
        match ms_to_us(horizon_ms) {
            Ok(h) => h,
            Err(e) => return fail(TempoStatus::TempoInvalidArgument, e),
        }
    };
    let policy = if edf != 0 { Policy::Edf } else { Policy::FixedPriorityRm };
    let trace = match simulate_schedule(&set, policy, SimOptions::over(horizon).with_pip(pip != 0)) {
        Ok(t) => t,
        Err(e) => return fail(TempoStatus::TempoInvalidArgument, e),
    };
    if !misses.is_null() {
        unsafe { *misses = trace.misses.len() as u64 };
    }
    if !worst_ms.is_null() {
        for i in 0..set.len().min(cap) {
            let v = trace.worst_response_us(i).map(|us| us as f64 / 1000.0).unwrap_or(-1.0);
            unsafe { *worst_ms.add(i) = v };
        }
    }
    TempoStatus::TempoOk
}

// ---------------------------------------------------------------------------
// Message codec
// ---------------------------------------------------------------------------

/// Opaque parsed message.
pub struct TempoMessage {
    inner: message::Message,
    rendered: CString,
    msg_type: CString,
    profile: CString,
}

/// Parses wire text (UTF-8, `len` bytes) into a message handle; null on
/// error (see `tempo_last_error`). Free with `tempo_message_free`.
///
/// # Safety
/// `text` must point at `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn tempo_message_parse(text: *const c_char, len: usize) -> *mut TempoMessage {
    if text.is_null() {
        set_error("null text");
        return ptr::null_mut();
    }
    let bytes = unsafe { std::slice::from_raw_parts(text as *const u8, len) };
    let Ok(text) = std::str::from_utf8(bytes) else {
        set_error("text is not UTF-8");
        return ptr::null_mut();
    };
    match message::parse(text) {
        Ok(inner) => {
            let rendered = CString::new(message::serialize(&inner)).unwrap_or_default();
            let msg_type = CString::new(inner.msg_type()).unwrap_or_default();
            let profile = CString::new(inner.profile()).unwrap_or_default();
            Box::into_raw(Box::new(TempoMessage { inner, rendered, msg_type, profile }))
        }
        Err(e) => {
            set_error(e);
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `m` must be a handle from `tempo_message_parse` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tempo_message_free(m: *mut TempoMessage) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Canonical wire text of the message, NUL-terminated, owned by the
/// handle.
///
/// # Safety
/// `m` live message handle.
#[no_mangle]
pub unsafe extern "C" fn tempo_message_serialize(m: *const TempoMessage) -> *const c_char {
    match unsafe { m.as_ref() } {
        Some(m) => m.rendered.as_ptr(),
        None => ptr::null(),
    }
}

/// # Safety
/// `m` live message handle.
#[no_mangle]
pub unsafe extern "C" fn tempo_message_type(m: *const TempoMessage) -> *const c_char {
    match unsafe { m.as_ref() } {
        Some(m) => m.msg_type.as_ptr(),
        None => ptr::null(),
    }
}

/// # Safety
/// `m` live message handle.
#[no_mangle]
pub unsafe extern "C" fn tempo_message_profile(m: *const TempoMessage) -> *const c_char {
    match unsafe { m.as_ref() } {
        Some(m) => m.profile.as_ptr(),
        None => ptr::null(),
    }
}

/// # Safety
/// `m` live message handle.
#[no_mangle]
pub unsafe extern "C" fn tempo_message_timestamp_ms(m: *const TempoMessage) -> u64 {
    match unsafe { m.as_ref() } {
        Some(m) => m.inner.timestamp_ms(),
        None => 0,
    }
}
