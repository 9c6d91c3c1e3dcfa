//! Classic pcap writing and a small packet builder for parser probes.
//!
//! Format: little-endian magic 0xa1b2c3d4, version 2.4, snaplen 65535.

const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
const PCAP_VERSION_MAJOR: u16 = 2;
const PCAP_VERSION_MINOR: u16 = 4;
const PCAP_SNAPLEN: u32 = 65535;

/// 24-byte global header with the given link type.
pub fn pcap_header(linktype: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(24);
    out.extend_from_slice(&PCAP_MAGIC.to_le_bytes());
    out.extend_from_slice(&PCAP_VERSION_MAJOR.to_le_bytes());
    out.extend_from_slice(&PCAP_VERSION_MINOR.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes()); // thiszone
    out.extend_from_slice(&0u32.to_le_bytes()); // sigfigs
    out.extend_from_slice(&PCAP_SNAPLEN.to_le_bytes());
    out.extend_from_slice(&linktype.to_le_bytes());
    out
}

/// Valid pcap with zero records; used as the -r argument for filter probes.
pub fn empty_pcap() -> Vec<u8> {
    pcap_header(1)
}

/// One record per packet. `caplen_mismatch` writes incl_len shorter than
/// orig_len to exercise captured-vs-declared-length paths.
pub fn write_pcap(linktype: u32, packets: &[&[u8]], caplen_mismatch: bool) -> Vec<u8> {
    let mut out = pcap_header(linktype);
    for pkt in packets {
        let orig_len = pkt.len() as u32;
        let incl_len = if caplen_mismatch { orig_len.saturating_sub(orig_len / 4).max(1) } else { orig_len };
        out.extend_from_slice(&0u32.to_le_bytes()); // ts_sec
        out.extend_from_slice(&0u32.to_le_bytes()); // ts_usec
        out.extend_from_slice(&incl_len.to_le_bytes());
        out.extend_from_slice(&orig_len.to_le_bytes());
        out.extend_from_slice(&pkt[..incl_len as usize]);
    }
    out
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum = 0u32;
    for chunk in header.chunks(2) {
        let word = if chunk.len() == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]])
        } else {
            u16::from_be_bytes([chunk[0], 0])
        };
        sum += word as u32;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Ethernet + IPv4 + UDP frame carrying `payload` to `dst_port`.
pub fn udp_packet(dst_port: u16, payload: &[u8]) -> Vec<u8> {
    let udp_len = 8 + payload.len();
    let ip_len = 20 + udp_len;

    let mut ip = vec![
        0x45, 0x00, // version/IHL, DSCP
        (ip_len >> 8) as u8, ip_len as u8,
        0x00, 0x01, // identification
        0x00, 0x00, // flags/fragment
        0x40, 0x11, // TTL 64, protocol UDP
        0x00, 0x00, // checksum placeholder
        10, 0, 0, 1, // src 10.0.0.1
        10, 0, 0, 2, // dst 10.0.0.2
    ];
    let csum = ipv4_checksum(&ip);
    ip[10..12].copy_from_slice(&csum.to_be_bytes());

    let mut frame = Vec::with_capacity(14 + ip_len);
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02]); // dst mac
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01]); // src mac
    frame.extend_from_slice(&[0x08, 0x00]); // IPv4 ethertype
    frame.extend_from_slice(&ip);
    frame.extend_from_slice(&4242u16.to_be_bytes()); // src port
    frame.extend_from_slice(&dst_port.to_be_bytes());
    frame.extend_from_slice(&(udp_len as u16).to_be_bytes());
    frame.extend_from_slice(&[0x00, 0x00]); // UDP checksum optional
    frame.extend_from_slice(payload);
    frame
}
