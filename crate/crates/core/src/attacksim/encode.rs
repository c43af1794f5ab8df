use thiserror::Error;

use crate::ingest::netflow::{
    HEADER_LEN, IN_BYTES, IN_PKTS, IPV4_DST_ADDR, IPV4_SRC_ADDR, L4_DST_PORT, L4_SRC_PORT, PROTOCOL,
    TEMPLATE_FLOWSET_ID, VERSION,
};
use crate::ingest::FlowRecord;

pub const TEMPLATE_ID: u16 = 256;

const FIELDS: [(u16, u16); 7] = [
    (IPV4_SRC_ADDR, 4),
    (IPV4_DST_ADDR, 4),
    (L4_SRC_PORT, 2),
    (L4_DST_PORT, 2),
    (PROTOCOL, 1),
    (IN_PKTS, 8),
    (IN_BYTES, 8),
];

/// Encoded size of one data record.
pub const RECORD_LEN: usize = 29;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderOptions {
    pub source_id: u32,
    /// Data records per datagram (at least 1).
    pub records_per_datagram: usize,
    /// Send the template in every n-th datagram, starting with the first;
    /// 0 never sends it.
    pub template_every: usize,
}

impl Default for EncoderOptions {
    fn default() -> Self {
        Self {
            source_id: 1,
            records_per_datagram: 24,
            template_every: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("timestamp {0} does not fit the 32-bit export time")]
    Timestamp(u64),
}

fn push16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn push32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

/// Encodes records as v9 export datagrams. The export time carries the
/// record timestamp, so consecutive records with equal timestamps share
/// datagrams. Raw (unsampled) counters are written.
pub fn encode_netflow_v9(records: &[FlowRecord], opts: EncoderOptions) -> Result<Vec<Vec<u8>>, EncodeError> {
    let per = opts.records_per_datagram.max(1);
    let mut out = Vec::new();
    let mut sequence = 0u32;
    let mut at = 0;
    while at < records.len() {
        let ts = records[at].timestamp;
        let unix_secs = u32::try_from(ts).map_err(|_| EncodeError::Timestamp(ts))?;
        let mut end = at;
        while end < records.len() && end - at < per && records[end].timestamp == ts {
            end += 1;
        }
        let batch = &records[at..end];
        let with_template = opts.template_every > 0 && out.len() % opts.template_every == 0;

        let mut d = Vec::with_capacity(HEADER_LEN + 40 + 4 + batch.len() * RECORD_LEN + 3);
        push16(&mut d, VERSION);
        push16(&mut d, (batch.len() + usize::from(with_template)) as u16);
        push32(&mut d, sequence.wrapping_mul(1000));
        push32(&mut d, unix_secs);
        push32(&mut d, sequence);
        push32(&mut d, opts.source_id);

        if with_template {
            push16(&mut d, TEMPLATE_FLOWSET_ID);
            push16(&mut d, (8 + FIELDS.len() * 4) as u16);
            push16(&mut d, TEMPLATE_ID);
            push16(&mut d, FIELDS.len() as u16);
            for (t, l) in FIELDS {
                push16(&mut d, t);
                push16(&mut d, l);
            }
        }

        let body = batch.len() * RECORD_LEN;
        let padding = (4 - (4 + body) % 4) % 4;
        push16(&mut d, TEMPLATE_ID);
        push16(&mut d, (4 + body + padding) as u16);
        for r in batch {
            d.extend_from_slice(&r.src_ip.octets());
            d.extend_from_slice(&r.dst_ip.octets());
            push16(&mut d, r.src_port);
            push16(&mut d, r.dst_port);
            d.push(r.protocol);
            d.extend_from_slice(&r.packets.to_be_bytes());
            d.extend_from_slice(&r.bytes.to_be_bytes());
        }
        d.resize(d.len() + padding, 0);

        out.push(d);
        sequence = sequence.wrapping_add(1);
        at = end;
    }
    Ok(out)
}
