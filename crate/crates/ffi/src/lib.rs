//! C ABI over the chopt engine.
//!
//! Every function returns a [`ChoptStatus`]; results come back through out
//! pointers. Strings handed to the caller are owned by the caller and must be
//! released with [`chopt_string_free`]. The message of the most recent
//! failure on the calling thread is available from [`chopt_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, c_double, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use chopt::engine::{Engine, EngineError};
use chopt::ids::SessionId;
use chopt::master::ClusterConfig;
use chopt::simcluster::DemandTrace;
use chopt::space::{parse_config, ConfigError};
use chopt::store::{ExportFormat, Store, StoreError};
use chopt::tuners::hyperband_schedule;
use serde::Deserialize;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChoptStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A configuration or argument failed validation.
    Validation = 2,
    NotFound = 3,
    Io = 4,
    /// An input string was not valid UTF-8.
    Utf8 = 5,
    /// An unexpected failure, including a caught panic.
    Internal = 6,
}

/// Opaque engine handle.
pub struct ChoptEngine {
    engine: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: ChoptStatus,
    message: String,
}

impl Failure {
    fn new(status: ChoptStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(ChoptStatus::Validation, e.to_string())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => ChoptStatus::NotFound,
            StoreError::Io { .. } | StoreError::Corrupt { .. } => ChoptStatus::Io,
            StoreError::Config(_) | StoreError::UnknownFormat(_) => ChoptStatus::Validation,
            _ => ChoptStatus::Internal,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(c) => c.into(),
            EngineError::Store(s) => s.into(),
            EngineError::NotFound(_) | EngineError::UnknownAgent(_) => {
                Failure::new(ChoptStatus::NotFound, e.to_string())
            }
            EngineError::Cluster(_) | EngineError::Trace(_) => {
                Failure::new(ChoptStatus::Validation, e.to_string())
            }
            other => Failure::new(ChoptStatus::Internal, other.to_string()),
        }
    }
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

/// Run `f`, record any failure for `chopt_last_error`, and map panics to `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ChoptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ChoptStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("internal panic");
            ChoptStatus::Internal
        }
    }
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn input<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(ChoptStatus::NullArgument, format!("`{what}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(ChoptStatus::Utf8, format!("`{what}` is not valid UTF-8")))
}

/// # Safety
/// `out` must be null or valid for one write.
unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(ChoptStatus::NullArgument, format!("`{what}` is null")));
    }
    out.write(value);
    Ok(())
}

fn owned(text: String) -> Result<*mut c_char, Failure> {
    CString::new(text)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(ChoptStatus::Internal, "output contains a nul byte"))
}

/// # Safety
/// `engine` must be null or a live handle from `chopt_engine_new`.
unsafe fn handle<'a>(engine: *mut ChoptEngine) -> Result<&'a mut ChoptEngine, Failure> {
    engine
        .as_mut()
        .ok_or_else(|| Failure::new(ChoptStatus::NullArgument, "`engine` is null"))
}

/// Engine description accepted by `chopt_engine_new`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EngineSpec {
    cluster: ClusterConfig,
    /// `(tick, gpus)` steps of other users' demand.
    #[serde(default)]
    trace: Vec<(u64, u32)>,
    /// Persist sessions here; in memory when absent.
    #[serde(default)]
    data_dir: Option<PathBuf>,
}

/// Create an engine from a JSON document
/// `{"cluster": {"capacity": 100, ...}, "trace": [[0, 40], ...], "data_dir": "..."}`.
/// A null `spec_json` means a 100-GPU cluster with no other users.
///
/// # Safety
/// `spec_json` must be null or a nul-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn chopt_engine_new(spec_json: *const c_char, out: *mut *mut ChoptEngine) -> ChoptStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::new(ChoptStatus::NullArgument, "`out` is null"));
        }
        let spec = if spec_json.is_null() {
            EngineSpec {
                cluster: ClusterConfig::new(100),
                trace: Vec::new(),
                data_dir: None,
            }
        } else {
            serde_json::from_str(input(spec_json, "spec_json")?)
                .map_err(|e| Failure::new(ChoptStatus::Validation, e.to_string()))?
        };
        let trace = if spec.trace.is_empty() {
            DemandTrace::constant(0)
        } else {
            DemandTrace::new(spec.trace).map_err(|e| Failure::new(ChoptStatus::Validation, e.to_string()))?
        };
        let store = match spec.data_dir {
            Some(dir) => Store::open(dir)?,
            None => Store::in_memory(),
        };
        let engine = Engine::new(spec.cluster, trace, store)?;
        write(out, Box::into_raw(Box::new(ChoptEngine { engine })), "out")
    })
}

/// Release an engine. Null is ignored.
///
/// # Safety
/// `engine` must be null or a handle from `chopt_engine_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn chopt_engine_free(engine: *mut ChoptEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Validate and enqueue a session; writes its numeric id (`s0001` is 1).
///
/// # Safety
/// `engine` must be a live handle, `config_json` a nul-terminated string, `out_session` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn chopt_engine_submit(
    engine: *mut ChoptEngine,
    config_json: *const c_char,
    out_session: *mut u32,
) -> ChoptStatus {
    guard(|| {
        let h = handle(engine)?;
        let config = parse_config(input(config_json, "config_json")?.as_bytes())?;
        let id = h.engine.submit(config, None)?;
        write(out_session, id.0, "out_session")
    })
}

/// Advance one tick; writes the new simulated time when `out_now` is not null.
///
/// # Safety
/// `engine` must be a live handle; `out_now` null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn chopt_engine_tick(engine: *mut ChoptEngine, out_now: *mut u64) -> ChoptStatus {
    guard(|| {
        let h = handle(engine)?;
        let stats = h.engine.tick()?;
        if !out_now.is_null() {
            out_now.write(stats.tick);
        }
        Ok(())
    })
}

/// Tick until no session is queued or running, or `max_ticks` elapse.
/// Writes the number of ticks taken when `out_ticks` is not null.
///
/// # Safety
/// `engine` must be a live handle; `out_ticks` null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn chopt_engine_run_until_idle(
    engine: *mut ChoptEngine,
    max_ticks: u64,
    out_ticks: *mut u64,
) -> ChoptStatus {
    guard(|| {
        let h = handle(engine)?;
        let ticks = h.engine.run_until_idle(max_ticks)?;
        if !out_ticks.is_null() {
            out_ticks.write(ticks);
        }
        Ok(())
    })
}

/// Stop a session. Stopping a terminated session is a no-op.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn chopt_engine_stop(engine: *mut ChoptEngine, session: u32) -> ChoptStatus {
    guard(|| {
        handle(engine)?.engine.stop(SessionId(session))?;
        Ok(())
    })
}

/// Snapshot of a session as JSON.
///
/// # Safety
/// `engine` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn chopt_engine_session_json(
    engine: *mut ChoptEngine,
    session: u32,
    out: *mut *mut c_char,
) -> ChoptStatus {
    guard(|| {
        let h = handle(engine)?;
        let rec = h.engine.store().load_session(SessionId(session))?;
        let text = serde_json::to_string(&rec.snapshot())
            .map_err(|e| Failure::new(ChoptStatus::Internal, e.to_string()))?;
        write(out, owned(text)?, "out")
    })
}

/// Trial table of a session in `csv` or `jsonl`.
///
/// # Safety
/// `engine` must be a live handle, `format` a nul-terminated string, `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn chopt_engine_export(
    engine: *mut ChoptEngine,
    session: u32,
    format: *const c_char,
    out: *mut *mut c_char,
) -> ChoptStatus {
    guard(|| {
        let h = handle(engine)?;
        let format: ExportFormat = input(format, "format")?.parse()?;
        let bytes = h.engine.store().export_trials(&[SessionId(session)], format)?;
        let text = String::from_utf8(bytes).map_err(|e| Failure::new(ChoptStatus::Internal, e.to_string()))?;
        write(out, owned(text)?, "out")
    })
}

/// Fraction of cluster capacity in use after the last tick.
///
/// # Safety
/// `engine` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn chopt_engine_utilization(engine: *mut ChoptEngine, out: *mut c_double) -> ChoptStatus {
    guard(|| {
        let u = handle(engine)?.engine.utilization();
        write(out, u, "out")
    })
}

/// Check a configuration document. On a validation failure the offending
/// field is written to `out_field` (when not null) and must be freed.
///
/// # Safety
/// `config_json` must be a nul-terminated string; `out_field` null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn chopt_config_validate(config_json: *const c_char, out_field: *mut *mut c_char) -> ChoptStatus {
    if !out_field.is_null() {
        out_field.write(ptr::null_mut());
    }
    guard(|| {
        let text = input(config_json, "config_json")?;
        match parse_config(text.as_bytes()) {
            Ok(_) => Ok(()),
            Err(e) => {
                if let (Some(field), false) = (e.field(), out_field.is_null()) {
                    out_field.write(owned(field.to_string())?);
                }
                Err(e.into())
            }
        }
    })
}

/// Hyperband brackets for resource limit `r` and reduction factor `eta`, as
/// JSON `[{"s": 4, "rounds": [{"n": 81, "r": 1}, ...]}, ...]`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn chopt_hyperband_schedule_json(r: u64, eta: u64, out: *mut *mut c_char) -> ChoptStatus {
    guard(|| {
        if r == 0 || eta < 2 {
            return Err(Failure::new(ChoptStatus::Validation, "need r >= 1 and eta >= 2"));
        }
        let brackets: Vec<serde_json::Value> = hyperband_schedule(r, eta)
            .iter()
            .map(|b| {
                serde_json::json!({
                    "s": b.s,
                    "rounds": b.rounds.iter().map(|x| serde_json::json!({"n": x.n, "r": x.r})).collect::<Vec<_>>(),
                })
            })
            .collect();
        write(out, owned(serde_json::Value::Array(brackets).to_string())?, "out")
    })
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn chopt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn chopt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
