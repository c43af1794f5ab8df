//! JSON Lines replay format: one flow per line with keys
//! `ts, src_ip, src_port, dst_ip, dst_port, proto, packets, bytes`.

use std::io::BufRead;
use std::net::Ipv4Addr;

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use super::FlowRecord;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayFieldError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("line is not a JSON object")]
    NotAnObject,
    #[error("missing key `{0}`")]
    MissingKey(&'static str),
    #[error("key `{0}` is not a number")]
    NotNumeric(&'static str),
    #[error("negative timestamp")]
    NegativeTimestamp,
    #[error("key `{0}` is negative or not an integer")]
    NotUnsigned(&'static str),
    #[error("key `{key}` out of range (max {max})")]
    OutOfRange { key: &'static str, max: u64 },
    #[error("key `{0}` is not an IPv4 address")]
    BadAddress(&'static str),
    #[error("bytes ({bytes}) smaller than packets ({packets})")]
    InconsistentCounts { packets: u64, bytes: u64 },
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: ReplayFieldError,
    },
    #[error("replay read failed: {0}")]
    Io(#[from] std::io::Error),
}

fn field<'a>(obj: &'a Map<String, Value>, key: &'static str) -> Result<&'a Value, ReplayFieldError> {
    obj.get(key).ok_or(ReplayFieldError::MissingKey(key))
}

fn unsigned(obj: &Map<String, Value>, key: &'static str, max: u64) -> Result<u64, ReplayFieldError> {
    let v = field(obj, key)?;
    if !v.is_number() {
        return Err(ReplayFieldError::NotNumeric(key));
    }
    let n = v.as_u64().ok_or(ReplayFieldError::NotUnsigned(key))?;
    if n > max {
        return Err(ReplayFieldError::OutOfRange { key, max });
    }
    Ok(n)
}

fn address(obj: &Map<String, Value>, key: &'static str) -> Result<Ipv4Addr, ReplayFieldError> {
    field(obj, key)?
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or(ReplayFieldError::BadAddress(key))
}

/// Parses one replay line. Unknown keys are ignored.
pub fn parse_replay_line(line: &str) -> Result<FlowRecord, ReplayFieldError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| ReplayFieldError::Json(e.to_string()))?;
    let obj = value.as_object().ok_or(ReplayFieldError::NotAnObject)?;

    let ts = field(obj, "ts")?;
    if !ts.is_number() {
        return Err(ReplayFieldError::NotNumeric("ts"));
    }
    if ts.as_i64().is_some_and(|t| t < 0) || ts.as_f64().is_some_and(|t| t < 0.0) {
        return Err(ReplayFieldError::NegativeTimestamp);
    }
    let timestamp = unsigned(obj, "ts", u64::MAX)?;

    let src_ip = address(obj, "src_ip")?;
    let src_port = unsigned(obj, "src_port", u16::MAX.into())? as u16;
    let dst_ip = address(obj, "dst_ip")?;
    let dst_port = unsigned(obj, "dst_port", u16::MAX.into())? as u16;
    let protocol = unsigned(obj, "proto", u8::MAX.into())? as u8;
    let packets = unsigned(obj, "packets", u64::MAX)?;
    let bytes = unsigned(obj, "bytes", u64::MAX)?;

    let record = FlowRecord::new(
        timestamp, src_ip, src_port, dst_ip, dst_port, protocol, packets, bytes,
    );
    if !record.counts_consistent() {
        return Err(ReplayFieldError::InconsistentCounts { packets, bytes });
    }
    Ok(record)
}

#[derive(Serialize)]
struct ReplayLine {
    ts: u64,
    src_ip: String,
    src_port: u16,
    dst_ip: String,
    dst_port: u16,
    proto: u8,
    packets: u64,
    bytes: u64,
}

/// Renders the raw (unadjusted) counters of a record as one replay line,
/// without a trailing newline.
pub fn to_replay_line(record: &FlowRecord) -> String {
    let line = ReplayLine {
        ts: record.timestamp,
        src_ip: record.src_ip.to_string(),
        src_port: record.src_port,
        dst_ip: record.dst_ip.to_string(),
        dst_port: record.dst_port,
        proto: record.protocol,
        packets: record.packets,
        bytes: record.bytes,
    };
    serde_json::to_string(&line).expect("replay line serializes")
}

/// Iterates over a replay stream, skipping blank lines. Line numbers in
/// errors are 1-based.
pub struct ReplayReader<R> {
    inner: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> ReplayReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            line_no: 0,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for ReplayReader<R> {
    type Item = Result<FlowRecord, ReplayError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line_no += 1;
            let line = self.buf.trim();
            if line.is_empty() {
                continue;
            }
            return Some(parse_replay_line(line).map_err(|source| ReplayError::Line {
                line: self.line_no,
                source,
            }));
        }
    }
}
