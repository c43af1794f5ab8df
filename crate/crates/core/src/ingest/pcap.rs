//! Captured packet files (classic libpcap) carrying NetFlow export
//! datagrams. Ethernet (with optional 802.1Q tags) and raw IPv4 link types
//! are understood; anything that is not IPv4/UDP is ignored.

use std::io::{Read, Write};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use pcap_file::pcap::{PcapHeader, PcapPacket, PcapReader, PcapWriter};
use pcap_file::{DataLink, PcapError};

/// One UDP payload recovered from a capture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedDatagram {
    pub timestamp: Duration,
    pub exporter: SocketAddrV4,
    pub collector: SocketAddrV4,
    pub payload: Vec<u8>,
}

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;
const IPPROTO_UDP: u8 = 17;

fn strip_ethernet(frame: &[u8]) -> Option<&[u8]> {
    let mut at = 12;
    loop {
        let ethertype = u16::from_be_bytes([*frame.get(at)?, *frame.get(at + 1)?]);
        match ethertype {
            ETHERTYPE_VLAN | ETHERTYPE_QINQ => at += 4,
            ETHERTYPE_IPV4 => return frame.get(at + 2..),
            _ => return None,
        }
    }
}

fn udp_in_ipv4(packet: &[u8]) -> Option<(SocketAddrV4, SocketAddrV4, &[u8])> {
    let first = *packet.first()?;
    if first >> 4 != 4 {
        return None;
    }
    let ihl = usize::from(first & 0x0f) * 4;
    if ihl < 20 || packet.len() < ihl + 8 || packet[9] != IPPROTO_UDP {
        return None;
    }
    // fragments other than the first carry no UDP header
    let frag = u16::from_be_bytes([packet[6], packet[7]]);
    if frag & 0x1fff != 0 {
        return None;
    }
    let src = Ipv4Addr::new(packet[12], packet[13], packet[14], packet[15]);
    let dst = Ipv4Addr::new(packet[16], packet[17], packet[18], packet[19]);
    let udp = &packet[ihl..];
    let sport = u16::from_be_bytes([udp[0], udp[1]]);
    let dport = u16::from_be_bytes([udp[2], udp[3]]);
    let udp_len = usize::from(u16::from_be_bytes([udp[4], udp[5]]));
    let end = udp_len.clamp(8, udp.len());
    Some((
        SocketAddrV4::new(src, sport),
        SocketAddrV4::new(dst, dport),
        &udp[8..end],
    ))
}

/// Reads every IPv4/UDP payload from a capture, in file order.
/// `collector_port` restricts the result to datagrams sent to that port.
pub fn read_capture<R: Read>(
    reader: R,
    collector_port: Option<u16>,
) -> Result<Vec<CapturedDatagram>, PcapError> {
    let mut pcap = PcapReader::new(reader)?;
    let datalink = pcap.header().datalink;
    let mut out = Vec::new();
    while let Some(packet) = pcap.next_packet() {
        let packet = packet?;
        let ip = match datalink {
            DataLink::ETHERNET => strip_ethernet(&packet.data),
            DataLink::RAW | DataLink::IPV4 => Some(&packet.data[..]),
            _ => None,
        };
        let Some((exporter, collector, payload)) = ip.and_then(udp_in_ipv4) else {
            continue;
        };
        if collector_port.is_some_and(|p| p != collector.port()) {
            continue;
        }
        out.push(CapturedDatagram {
            timestamp: packet.timestamp,
            exporter,
            collector,
            payload: payload.to_vec(),
        });
    }
    Ok(out)
}

fn ipv4_udp_packet(exporter: SocketAddrV4, collector: SocketAddrV4, payload: &[u8]) -> Vec<u8> {
    let total = 20 + 8 + payload.len();
    let mut p = Vec::with_capacity(total);
    p.extend_from_slice(&[0x45, 0]);
    p.extend_from_slice(&(total as u16).to_be_bytes());
    p.extend_from_slice(&[0, 0, 0x40, 0, 64, IPPROTO_UDP, 0, 0]);
    p.extend_from_slice(&exporter.ip().octets());
    p.extend_from_slice(&collector.ip().octets());
    let checksum = ipv4_checksum(&p[..20]);
    p[10..12].copy_from_slice(&checksum.to_be_bytes());
    p.extend_from_slice(&exporter.port().to_be_bytes());
    p.extend_from_slice(&collector.port().to_be_bytes());
    p.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
    // UDP checksum 0: not computed
    p.extend_from_slice(&[0, 0]);
    p.extend_from_slice(payload);
    p
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)])))
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Writes datagrams as a raw-IPv4 capture.
pub fn write_capture<W: Write>(writer: W, datagrams: &[CapturedDatagram]) -> Result<W, PcapError> {
    let header = PcapHeader {
        datalink: DataLink::RAW,
        ..Default::default()
    };
    let mut pcap = PcapWriter::with_header(writer, header)?;
    for d in datagrams {
        let data = ipv4_udp_packet(d.exporter, d.collector, &d.payload);
        let packet = PcapPacket::new(d.timestamp, data.len() as u32, &data);
        pcap.write_packet(&packet)?;
    }
    Ok(pcap.into_writer())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capture_round_trip() {
        let d = CapturedDatagram {
            timestamp: Duration::from_secs(1_600_000_000),
            exporter: "192.0.2.10:40000".parse().unwrap(),
            collector: "192.0.2.20:2055".parse().unwrap(),
            payload: vec![0, 9, 1, 2, 3],
        };
        let bytes = write_capture(Vec::new(), std::slice::from_ref(&d)).unwrap();
        let back = read_capture(&bytes[..], Some(2055)).unwrap();
        assert_eq!(back, vec![d]);
        assert!(read_capture(&bytes[..], Some(9995)).unwrap().is_empty());
    }

    #[test]
    fn checksum_of_valid_header_is_zero() {
        let p = ipv4_udp_packet(
            "10.0.0.1:1".parse().unwrap(),
            "10.0.0.2:2".parse().unwrap(),
            b"abc",
        );
        assert_eq!(ipv4_checksum(&p[..20]), 0);
    }

    #[test]
    fn ethernet_vlan_stripped() {
        let ip = ipv4_udp_packet(
            "10.0.0.1:1".parse().unwrap(),
            "10.0.0.2:2055".parse().unwrap(),
            b"xyz",
        );
        let mut frame = vec![0u8; 12];
        frame.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
        frame.extend_from_slice(&[0, 5]);
        frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        frame.extend_from_slice(&ip);
        let (_, c, payload) = udp_in_ipv4(strip_ethernet(&frame).unwrap()).unwrap();
        assert_eq!(c.port(), 2055);
        assert_eq!(payload, b"xyz");
    }
}
