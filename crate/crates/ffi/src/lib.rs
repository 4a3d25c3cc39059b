//! C ABI over the mapek control plane.
//!
//! Controllers are opaque handles created by [`mapek_controller_new`] and
//! released with [`mapek_controller_free`]. Every fallible call returns a
//! [`MapekStatus`]; on failure [`mapek_last_error`] describes what went wrong
//! on the calling thread. Strings returned through `out` parameters are owned
//! by the caller and must be released with [`mapek_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mapek_core::config::Config;
use mapek_core::controller::{CommandError, Controller, ControllerError};
use mapek_core::executor::{ApprovalStatus, Decision};
use mapek_core::knowledge::{replay, KbError};
use mapek_core::simenv::{Scenario, SimError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapekStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Config = 4,
    Scenario = 5,
    Journal = 6,
    NotFound = 7,
    Conflict = 8,
    Halted = 9,
    InvalidArgument = 10,
    Panic = 11,
}

/// Opaque controller handle.
pub struct MapekController {
    inner: Controller,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(MapekStatus, String);

impl From<ControllerError> for Failure {
    fn from(e: ControllerError) -> Self {
        let status = match &e {
            ControllerError::Config(_) => MapekStatus::Config,
            ControllerError::Scenario(SimError::Read { .. }) => MapekStatus::Io,
            ControllerError::Scenario(_) => MapekStatus::Scenario,
            ControllerError::JournalNotEmpty { .. } => MapekStatus::Journal,
            ControllerError::Halted(KbError::Open { .. }) => MapekStatus::Io,
            ControllerError::Halted(KbError::Corrupt { .. }) => MapekStatus::Journal,
            ControllerError::Halted(_) => MapekStatus::Halted,
        };
        Failure(status, e.to_string())
    }
}

impl From<CommandError> for Failure {
    fn from(e: CommandError) -> Self {
        let status = match &e {
            CommandError::NotFound(_) => MapekStatus::NotFound,
            CommandError::Conflict(_) => MapekStatus::Conflict,
            CommandError::BadRequest(_) => MapekStatus::InvalidArgument,
            CommandError::Halted(_) => MapekStatus::Halted,
        };
        Failure(status, e.to_string())
    }
}

impl From<KbError> for Failure {
    fn from(e: KbError) -> Self {
        let status = match &e {
            KbError::Open { .. } => MapekStatus::Io,
            _ => MapekStatus::Journal,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MapekStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            MapekStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MapekStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MapekStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(MapekStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

unsafe fn handle_mut<'a>(h: *mut MapekController) -> Result<&'a mut MapekController, Failure> {
    h.as_mut().ok_or_else(|| Failure(MapekStatus::NullArgument, "controller handle is null".into()))
}

unsafe fn handle_ref<'a>(h: *const MapekController) -> Result<&'a MapekController, Failure> {
    h.as_ref().ok_or_else(|| Failure(MapekStatus::NullArgument, "controller handle is null".into()))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(MapekStatus::NullArgument, "`out` is null".into()));
    }
    let c = CString::new(s).map_err(|_| Failure(MapekStatus::InvalidArgument, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Creates a controller from a config file and a scenario file.
///
/// `journal_path` may be null to use `kb.journal_path` from the config.
/// On success `*out` receives a handle to release with `mapek_controller_free`.
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapek_controller_new(
    config_path: *const c_char,
    scenario_path: *const c_char,
    seed: u64,
    journal_path: *const c_char,
    out: *mut *mut MapekController,
) -> MapekStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(MapekStatus::NullArgument, "`out` is null".into()));
        }
        *out = ptr::null_mut();
        let config_path = str_arg(config_path, "config_path")?;
        let scenario_path = str_arg(scenario_path, "scenario_path")?;
        let mut config = Config::load(config_path).map_err(|e| Failure::from(ControllerError::from(e)))?;
        if !journal_path.is_null() {
            config.kb.journal_path = Some(PathBuf::from(str_arg(journal_path, "journal_path")?));
        }
        let scenario = Scenario::load(scenario_path).map_err(|e| Failure::from(ControllerError::from(e)))?;
        let inner = Controller::new(config, &scenario, seed)?;
        *out = Box::into_raw(Box::new(MapekController { inner }));
        Ok(())
    })
}

/// Releases a controller. Null is ignored.
///
/// # Safety
/// `handle` must be null or a pointer from `mapek_controller_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mapek_controller_free(handle: *mut MapekController) {
    if !handle.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(handle))));
    }
}

/// Runs `ticks` cycles (one per tick).
///
/// # Safety
/// `handle` must be a live controller handle.
#[no_mangle]
pub unsafe extern "C" fn mapek_controller_run(handle: *mut MapekController, ticks: u64) -> MapekStatus {
    guard(|| {
        let h = handle_mut(handle)?;
        if ticks == 0 {
            return Err(Failure(MapekStatus::InvalidArgument, "ticks must be >= 1".into()));
        }
        h.inner.run(ticks)?;
        Ok(())
    })
}

/// Runs exactly one cycle.
///
/// # Safety
/// `handle` must be a live controller handle.
#[no_mangle]
pub unsafe extern "C" fn mapek_controller_run_cycle(handle: *mut MapekController) -> MapekStatus {
    guard(|| {
        handle_mut(handle)?.inner.run_cycle()?;
        Ok(())
    })
}

/// Writes the current simulator tick to `*out`.
///
/// # Safety
/// `handle` must be a live controller handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapek_controller_tick(handle: *const MapekController, out: *mut u64) -> MapekStatus {
    guard(|| {
        let h = handle_ref(handle)?;
        if out.is_null() {
            return Err(Failure(MapekStatus::NullArgument, "`out` is null".into()));
        }
        *out = h.inner.sim().now();
        Ok(())
    })
}

/// Pending approval requests as a JSON array.
///
/// # Safety
/// `handle` must be a live controller handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapek_controller_pending_approvals(handle: *const MapekController, out: *mut *mut c_char) -> MapekStatus {
    guard(|| {
        let h = handle_ref(handle)?;
        let pending: Vec<_> = h.inner.executor().approvals().filter(|a| a.status == ApprovalStatus::Pending).collect();
        write_string(out, serde_json::to_string(&pending).expect("approvals serialize"))
    })
}

/// Approves (`approve` true) or rejects a pending request. On success `*out`
/// receives the execution result as JSON; `out` may be null to discard it.
///
/// # Safety
/// `handle` must be a live controller handle; strings must be valid.
#[no_mangle]
pub unsafe extern "C" fn mapek_controller_resolve_approval(
    handle: *mut MapekController,
    request_id: *const c_char,
    approve: bool,
    decider: *const c_char,
    out: *mut *mut c_char,
) -> MapekStatus {
    guard(|| {
        let h = handle_mut(handle)?;
        let request_id = str_arg(request_id, "request_id")?;
        let decider = str_arg(decider, "decider")?;
        let decision = if approve { Decision::Approved } else { Decision::Rejected };
        let result = h.inner.resolve_approval(request_id, decision, decider)?;
        if out.is_null() {
            return Ok(());
        }
        write_string(out, serde_json::to_string(&result).expect("results serialize"))
    })
}

/// Hex digest of the knowledge-base state.
///
/// # Safety
/// `handle` must be a live controller handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapek_controller_digest(handle: *const MapekController, out: *mut *mut c_char) -> MapekStatus {
    guard(|| {
        let h = handle_ref(handle)?;
        write_string(out, h.inner.journal().digest())
    })
}

/// Rebuilds state from a journal file and returns its digest.
///
/// # Safety
/// `journal_path` must be a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapek_replay_digest(journal_path: *const c_char, out: *mut *mut c_char) -> MapekStatus {
    guard(|| {
        let path = str_arg(journal_path, "journal_path")?;
        let replayed = replay(path)?;
        write_string(out, replayed.state.digest())
    })
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mapek_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned through an `out` parameter, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mapek_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
