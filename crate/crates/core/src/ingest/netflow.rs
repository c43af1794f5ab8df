//! NetFlow v9 (RFC 3954) decoding for the fixed IPv4/UDP field subset the
//! detector consumes.
//!
//! Templates are cached per `(source_id, template_id)`. Data records whose
//! template has not been seen from the same source are counted and skipped.

use std::collections::HashMap;
use std::net::Ipv4Addr;

use thiserror::Error;

use super::FlowRecord;

pub const VERSION: u16 = 9;
pub const HEADER_LEN: usize = 20;
pub const TEMPLATE_FLOWSET_ID: u16 = 0;
pub const OPTIONS_TEMPLATE_FLOWSET_ID: u16 = 1;
pub const MIN_DATA_FLOWSET_ID: u16 = 256;

pub const IN_BYTES: u16 = 1;
pub const IN_PKTS: u16 = 2;
pub const PROTOCOL: u16 = 4;
pub const L4_SRC_PORT: u16 = 7;
pub const IPV4_SRC_ADDR: u16 = 8;
pub const L4_DST_PORT: u16 = 11;
pub const IPV4_DST_ADDR: u16 = 12;
pub const IPV6_SRC_ADDR: u16 = 27;
pub const IPV6_DST_ADDR: u16 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub count: u16,
    pub sys_uptime: u32,
    pub unix_secs: u32,
    pub sequence: u32,
    pub source_id: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetflowError {
    #[error("datagram too short: {0} bytes")]
    TooShort(usize),
    #[error("unsupported NetFlow version {0}")]
    WrongVersion(u16),
    #[error("malformed flowset at offset {offset}")]
    MalformedFlowset { offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateField {
    pub field_type: u16,
    pub length: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub fields: Vec<TemplateField>,
    pub last_refresh: u32,
}

impl Template {
    pub fn record_len(&self) -> usize {
        self.fields.iter().map(|f| usize::from(f.length)).sum()
    }

    fn has(&self, field_type: u16) -> bool {
        self.fields.iter().any(|f| f.field_type == field_type)
    }
}

/// Templates learned from one exporter stream.
#[derive(Debug, Default, Clone)]
pub struct TemplateCache {
    templates: HashMap<(u32, u16), Template>,
}

impl TemplateCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, source_id: u32, template_id: u16) -> Option<&Template> {
        self.templates.get(&(source_id, template_id))
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Per-datagram decode counters.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ParseStats {
    pub templates: u64,
    pub records: u64,
    /// Data records whose template is unknown for this source.
    pub unknown_template: u64,
    /// Data records described by IPv6 templates.
    pub ipv6_skipped: u64,
    /// Data records lacking a required field or with unusable field widths.
    pub incomplete: u64,
    /// Records decoded but rejected (bytes < packets).
    pub inconsistent: u64,
    /// Option templates and options data, ignored.
    pub options_skipped: u64,
}

impl ParseStats {
    pub fn merge(&mut self, other: &ParseStats) {
        self.templates += other.templates;
        self.records += other.records;
        self.unknown_template += other.unknown_template;
        self.ipv6_skipped += other.ipv6_skipped;
        self.incomplete += other.incomplete;
        self.inconsistent += other.inconsistent;
        self.options_skipped += other.options_skipped;
    }
}

#[derive(Debug, Default)]
pub struct ParsedDatagram {
    pub header: Option<Header>,
    pub records: Vec<FlowRecord>,
    pub stats: ParseStats,
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn be_uint(b: &[u8]) -> Option<u64> {
    if b.is_empty() || b.len() > 8 {
        return None;
    }
    Some(b.iter().fold(0u64, |acc, &x| (acc << 8) | u64::from(x)))
}

pub fn parse_header(datagram: &[u8]) -> Result<Header, NetflowError> {
    if datagram.len() < HEADER_LEN {
        return Err(NetflowError::TooShort(datagram.len()));
    }
    let version = be16(datagram, 0);
    if version != VERSION {
        return Err(NetflowError::WrongVersion(version));
    }
    Ok(Header {
        version,
        count: be16(datagram, 2),
        sys_uptime: be32(datagram, 4),
        unix_secs: be32(datagram, 8),
        sequence: be32(datagram, 12),
        source_id: be32(datagram, 16),
    })
}

/// Decodes one UDP payload, updating `cache` with any templates it carries.
///
/// A flowset whose length field is inconsistent with the datagram aborts
/// the datagram; templates learned from earlier flowsets stay cached.
pub fn parse_netflow_v9(
    datagram: &[u8],
    cache: &mut TemplateCache,
) -> Result<ParsedDatagram, NetflowError> {
    let header = parse_header(datagram)?;
    let mut out = ParsedDatagram {
        header: Some(header),
        ..Default::default()
    };

    let mut unknown_flowsets = 0u64;
    let mut seen_records = 0u64;
    let mut offset = HEADER_LEN;
    while offset + 4 <= datagram.len() {
        let flowset_id = be16(datagram, offset);
        let length = usize::from(be16(datagram, offset + 2));
        if length < 4 || offset + length > datagram.len() {
            return Err(NetflowError::MalformedFlowset { offset });
        }
        let body = &datagram[offset + 4..offset + length];
        match flowset_id {
            TEMPLATE_FLOWSET_ID => {
                seen_records += parse_templates(body, &header, cache, &mut out.stats)
            }
            OPTIONS_TEMPLATE_FLOWSET_ID => out.stats.options_skipped += 1,
            id if id >= MIN_DATA_FLOWSET_ID => match parse_data(body, id, &header, cache, &mut out) {
                Some(n) => seen_records += n,
                None => unknown_flowsets += 1,
            },
            // reserved ids 2..=255
            _ => {}
        }
        offset += length;
    }
    if unknown_flowsets > 0 {
        // Without the template the record length is unknown; the header
        // count covers every record in the datagram, so the remainder after
        // the decodable ones belongs to the unknown flowsets.
        let remainder = u64::from(header.count).saturating_sub(seen_records);
        out.stats.unknown_template += remainder.max(unknown_flowsets);
    }
    Ok(out)
}

/// Returns the number of template records read.
fn parse_templates(
    body: &[u8],
    header: &Header,
    cache: &mut TemplateCache,
    stats: &mut ParseStats,
) -> u64 {
    let mut read = 0;
    let mut at = 0;
    while at + 4 <= body.len() {
        let template_id = be16(body, at);
        let field_count = usize::from(be16(body, at + 2));
        at += 4;
        let fields_end = at + field_count * 4;
        if fields_end > body.len() {
            // truncated template; the rest of the flowset is padding or garbage
            return read;
        }
        let fields: Vec<TemplateField> = (0..field_count)
            .map(|i| TemplateField {
                field_type: be16(body, at + i * 4),
                length: be16(body, at + i * 4 + 2),
            })
            .collect();
        at = fields_end;
        read += 1;

        let template = Template {
            fields,
            last_refresh: header.unix_secs,
        };
        if template_id < MIN_DATA_FLOWSET_ID || template.record_len() == 0 {
            continue;
        }
        stats.templates += 1;
        cache.templates.insert((header.source_id, template_id), template);
    }
    read
}

/// Returns the number of records in the flowset, or `None` when the
/// template is unknown for this source.
fn parse_data(
    body: &[u8],
    template_id: u16,
    header: &Header,
    cache: &TemplateCache,
    out: &mut ParsedDatagram,
) -> Option<u64> {
    let template = cache.get(header.source_id, template_id)?;
    let record_len = template.record_len();
    let ipv6_only = !template.has(IPV4_SRC_ADDR)
        && (template.has(IPV6_SRC_ADDR) || template.has(IPV6_DST_ADDR));

    let chunks = body.chunks_exact(record_len);
    let n = chunks.len() as u64;
    for chunk in chunks {
        if ipv6_only {
            out.stats.ipv6_skipped += 1;
            continue;
        }
        match decode_record(chunk, template, header) {
            Some(r) if r.counts_consistent() => {
                out.stats.records += 1;
                out.records.push(r);
            }
            Some(_) => out.stats.inconsistent += 1,
            None => out.stats.incomplete += 1,
        }
    }
    Some(n)
}

fn decode_record(chunk: &[u8], template: &Template, header: &Header) -> Option<FlowRecord> {
    let mut bytes = None;
    let mut packets = None;
    let mut protocol = None;
    let mut src_port = None;
    let mut dst_port = None;
    let mut src_ip = None;
    let mut dst_ip = None;

    let mut at = 0;
    for f in &template.fields {
        let len = usize::from(f.length);
        let v = &chunk[at..at + len];
        at += len;
        match f.field_type {
            IN_BYTES => bytes = Some(be_uint(v)?),
            IN_PKTS => packets = Some(be_uint(v)?),
            PROTOCOL => protocol = Some(u8::try_from(be_uint(v)?).ok()?),
            L4_SRC_PORT => src_port = Some(u16::try_from(be_uint(v)?).ok()?),
            L4_DST_PORT => dst_port = Some(u16::try_from(be_uint(v)?).ok()?),
            IPV4_SRC_ADDR if len == 4 => src_ip = Some(Ipv4Addr::new(v[0], v[1], v[2], v[3])),
            IPV4_DST_ADDR if len == 4 => dst_ip = Some(Ipv4Addr::new(v[0], v[1], v[2], v[3])),
            IPV4_SRC_ADDR | IPV4_DST_ADDR => return None,
            _ => {}
        }
    }

    Some(FlowRecord::new(
        u64::from(header.unix_secs),
        src_ip?,
        src_port?,
        dst_ip?,
        dst_port?,
        protocol?,
        packets?,
        bytes?,
    ))
}
