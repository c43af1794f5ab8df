//! C ABI over the detection pipeline.
//!
//! Every fallible call returns a [`DrdosStatus`]; on failure
//! [`drdos_last_error`] describes the problem for the calling thread.
//! Strings handed out by the library must be released with
//! [`drdos_string_free`].

use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use drdos_detect::aggregation::{MonitoredPort, MonitoredPortTable};
use drdos_detect::asn_map::PrefixTable;
use drdos_detect::detection::{ewma_update, normalized_entropy, DetectorConfig};
use drdos_detect::ingest::{parse_netflow_v9, parse_replay_line, SamplingConfig, TemplateCache};
use drdos_detect::pipeline::{Pipeline, PipelineEvent, PipelineSettings};
use serde::Deserialize;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrdosStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    ParseError = 4,
    PipelineError = 5,
    /// The event queue is empty.
    NoEvent = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: DrdosStatus, msg: impl Into<String>) -> DrdosStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> DrdosStatus) -> DrdosStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(DrdosStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, DrdosStatus> {
    if p.is_null() {
        return Err(fail(DrdosStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DrdosStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn hand_out(s: String, out: *mut *mut c_char) -> DrdosStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            DrdosStatus::Ok
        }
        Err(_) => fail(DrdosStatus::PipelineError, "output contains a NUL byte"),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HandleConfig {
    #[serde(default)]
    detector: DetectorConfig,
    sampling_rate: Option<u32>,
    top_n: Option<usize>,
    late_grace: Option<u64>,
    archive_sketches: Option<bool>,
    /// Monitored source ports; the built-in table when absent.
    ports: Option<Vec<u16>>,
}

fn settings_from(toml_text: &str) -> Result<PipelineSettings, String> {
    let cfg: HandleConfig = toml::from_str(toml_text).map_err(|e| e.to_string())?;
    cfg.detector.validate().map_err(|e| e.to_string())?;
    let ports = match cfg.ports {
        None => MonitoredPortTable::default(),
        Some(list) => {
            let known = MonitoredPortTable::default();
            let rows = list
                .into_iter()
                .map(|port| {
                    known
                        .rows()
                        .iter()
                        .find(|r| r.port == port)
                        .cloned()
                        .unwrap_or(MonitoredPort {
                            port,
                            service: String::from("custom"),
                            baf: None,
                        })
                })
                .collect();
            MonitoredPortTable::new(rows).map_err(|e| e.to_string())?
        }
    };
    let rate = cfg.sampling_rate.unwrap_or(1);
    let sampling = SamplingConfig::new(rate).ok_or_else(|| format!("sampling rate must be at least 1, got {rate}"))?;
    if cfg.top_n == Some(0) {
        return Err("top_n must be at least 1".into());
    }
    Ok(PipelineSettings {
        detector: cfg.detector,
        ports,
        sampling,
        top_n: cfg.top_n,
        archive_sketches: cfg.archive_sketches.unwrap_or(false),
        late_grace: cfg.late_grace.unwrap_or(1),
    })
}

/// Opaque pipeline handle.
pub struct DrdosPipeline {
    pipeline: Pipeline,
    caches: HashMap<u64, TemplateCache>,
    queue: VecDeque<PipelineEvent>,
    malformed: u64,
}

impl DrdosPipeline {
    fn absorb(&mut self, r: Result<Vec<PipelineEvent>, impl std::fmt::Display>) -> DrdosStatus {
        match r {
            Ok(events) => {
                self.queue.extend(events);
                DrdosStatus::Ok
            }
            Err(e) => fail(DrdosStatus::PipelineError, e.to_string()),
        }
    }
}

unsafe fn handle<'a>(p: *mut DrdosPipeline) -> Result<&'a mut DrdosPipeline, DrdosStatus> {
    p.as_mut()
        .ok_or_else(|| fail(DrdosStatus::NullArgument, "pipeline handle is null"))
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Creates a pipeline. `config_toml` may be null for defaults;
/// `prefix_table` holds the table text ("<cidr> <asn>" lines).
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn drdos_pipeline_new(
    config_toml: *const c_char,
    prefix_table: *const c_char,
    out: *mut *mut DrdosPipeline,
) -> DrdosStatus {
    guarded(|| {
        if out.is_null() {
            return fail(DrdosStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let cfg_text = if config_toml.is_null() {
            ""
        } else {
            try_status!(str_arg(config_toml, "config_toml"))
        };
        let table_text = try_status!(str_arg(prefix_table, "prefix_table"));
        let settings = match settings_from(cfg_text) {
            Ok(s) => s,
            Err(e) => return fail(DrdosStatus::ConfigError, e),
        };
        let table = match PrefixTable::load(table_text.as_bytes()) {
            Ok(t) => t,
            Err(e) => return fail(DrdosStatus::ConfigError, e.to_string()),
        };
        let handle = Box::new(DrdosPipeline {
            pipeline: Pipeline::new(settings, Arc::new(table)),
            caches: HashMap::new(),
            queue: VecDeque::new(),
            malformed: 0,
        });
        *out = Box::into_raw(handle);
        DrdosStatus::Ok
    })
}

/// # Safety
/// `p` must be null or a handle from [`drdos_pipeline_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drdos_pipeline_free(p: *mut DrdosPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Feeds one replay JSON line. Malformed lines return `ParseError` and
/// leave the pipeline untouched.
///
/// # Safety
/// `p` must be a live handle; `line` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn drdos_pipeline_push_replay_line(p: *mut DrdosPipeline, line: *const c_char) -> DrdosStatus {
    guarded(|| {
        let h = try_status!(handle(p));
        let line = try_status!(str_arg(line, "line"));
        match parse_replay_line(line) {
            Ok(record) => {
                let r = h.pipeline.push_record(record);
                h.absorb(r)
            }
            Err(e) => {
                h.malformed += 1;
                fail(DrdosStatus::ParseError, e.to_string())
            }
        }
    })
}

/// Feeds one NetFlow v9 datagram. Templates are cached per `exporter_id`,
/// a caller-chosen identity of the sending device.
///
/// # Safety
/// `p` must be a live handle; `data` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn drdos_pipeline_push_netflow(
    p: *mut DrdosPipeline,
    exporter_id: u64,
    data: *const u8,
    len: usize,
) -> DrdosStatus {
    guarded(|| {
        let h = try_status!(handle(p));
        if data.is_null() && len > 0 {
            return fail(DrdosStatus::NullArgument, "data is null");
        }
        let bytes: &[u8] = if len == 0 { &[] } else { std::slice::from_raw_parts(data, len) };
        let cache = h.caches.entry(exporter_id).or_default();
        match parse_netflow_v9(bytes, cache) {
            Ok(parsed) => {
                for r in parsed.records {
                    let res = h.pipeline.push_record(r);
                    let s = h.absorb(res);
                    if s != DrdosStatus::Ok {
                        return s;
                    }
                }
                DrdosStatus::Ok
            }
            Err(e) => {
                h.malformed += 1;
                fail(DrdosStatus::ParseError, e.to_string())
            }
        }
    })
}

/// Moves the clock to `watermark` (epoch seconds), closing due intervals.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn drdos_pipeline_advance(p: *mut DrdosPipeline, watermark: u64) -> DrdosStatus {
    guarded(|| {
        let h = try_status!(handle(p));
        let r = h.pipeline.advance(watermark);
        h.absorb(r)
    })
}

/// Ends the input: remaining intervals close and open sessions are
/// flushed as truncated.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn drdos_pipeline_finish(p: *mut DrdosPipeline) -> DrdosStatus {
    guarded(|| {
        let h = try_status!(handle(p));
        let r = h.pipeline.finish();
        h.absorb(r)
    })
}

/// Pops the oldest pending event as a JSON object with an `"event"` tag.
/// Returns `NoEvent` (and writes null) when nothing is pending.
///
/// # Safety
/// `p` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drdos_pipeline_next_event(p: *mut DrdosPipeline, out: *mut *mut c_char) -> DrdosStatus {
    guarded(|| {
        let h = try_status!(handle(p));
        if out.is_null() {
            return fail(DrdosStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        match h.queue.pop_front() {
            None => DrdosStatus::NoEvent,
            Some(e) => match serde_json::to_string(&e) {
                Ok(s) => hand_out(s, out),
                Err(e) => fail(DrdosStatus::PipelineError, e.to_string()),
            },
        }
    })
}

/// Number of events waiting in the queue.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn drdos_pipeline_pending(p: *const DrdosPipeline) -> usize {
    p.as_ref().map_or(0, |h| h.queue.len())
}

/// Operational counters as a JSON object.
///
/// # Safety
/// `p` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drdos_pipeline_counters(p: *mut DrdosPipeline, out: *mut *mut c_char) -> DrdosStatus {
    guarded(|| {
        let h = try_status!(handle(p));
        if out.is_null() {
            return fail(DrdosStatus::NullArgument, "out is null");
        }
        let mut v = serde_json::to_value(h.pipeline.counters()).unwrap_or_default();
        if let Some(m) = v.as_object_mut() {
            m.insert("malformed_inputs".into(), h.malformed.into());
        }
        hand_out(v.to_string(), out)
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn drdos_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the calling thread's most recent failure, or null. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn drdos_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn drdos_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Normalized Shannon entropy of per-source byte counts (0 for fewer than
/// two non-zero sources).
///
/// # Safety
/// `bytes` must be valid for `n` values (may be null when `n` is 0).
#[no_mangle]
pub unsafe extern "C" fn drdos_normalized_entropy(bytes: *const u64, n: usize) -> f64 {
    if bytes.is_null() || n == 0 {
        return 0.0;
    }
    normalized_entropy(std::slice::from_raw_parts(bytes, n).iter().copied())
}

/// One step of the moving mean/variance model.
///
/// # Safety
/// Output pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drdos_ewma_update(
    mu: f64,
    var: f64,
    b: f64,
    alpha: f64,
    out_mu: *mut f64,
    out_var: *mut f64,
) -> DrdosStatus {
    if out_mu.is_null() || out_var.is_null() {
        return fail(DrdosStatus::NullArgument, "output pointer is null");
    }
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return fail(DrdosStatus::ConfigError, format!("alpha {alpha} outside (0, 1)"));
    }
    let (m, v) = ewma_update(mu, var, b, alpha);
    *out_mu = m;
    *out_var = v;
    DrdosStatus::Ok
}
