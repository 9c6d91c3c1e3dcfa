//! Malformed ar and ustar generators for archive-parser probes.
//!
//! The well-formed baselines list cleanly under reference extractors; each
//! malformed variant corrupts exactly one field.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveVariant {
    BaselineAr,
    BaselineUstar,
    /// ar size field is non-decimal.
    CorruptSize,
    /// ar declared size exceeds the actual payload.
    OversizedMember,
    /// BSD extended name length larger than the member itself.
    ExtendedNameAbuse,
    /// member with a reserved special name.
    SpecialName,
}

impl ArchiveVariant {
    pub fn all() -> [ArchiveVariant; 6] {
        [
            Self::BaselineAr,
            Self::BaselineUstar,
            Self::CorruptSize,
            Self::OversizedMember,
            Self::ExtendedNameAbuse,
            Self::SpecialName,
        ]
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline_ar" => Some(Self::BaselineAr),
            "baseline_ustar" => Some(Self::BaselineUstar),
            "corrupt_size" => Some(Self::CorruptSize),
            "oversized_member" => Some(Self::OversizedMember),
            "extended_name_abuse" => Some(Self::ExtendedNameAbuse),
            "special_name" => Some(Self::SpecialName),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::BaselineAr => "baseline_ar",
            Self::BaselineUstar => "baseline_ustar",
            Self::CorruptSize => "corrupt_size",
            Self::OversizedMember => "oversized_member",
            Self::ExtendedNameAbuse => "extended_name_abuse",
            Self::SpecialName => "special_name",
        }
    }
}

fn ar_member(name: &str, size_field: &str, payload: &[u8]) -> Vec<u8> {
    let hdr = format!("{name:<16}{:<12}{:<6}{:<6}{:<8}{size_field:<10}`\n", 0, 0, 0, "100644");
    debug_assert_eq!(hdr.len(), 60);
    let mut out = hdr.into_bytes();
    out.extend_from_slice(payload);
    if out.len() % 2 == 1 {
        out.push(b'\n');
    }
    out
}

fn ar_archive(members: &[Vec<u8>]) -> Vec<u8> {
    let mut out = b"!<arch>\n".to_vec();
    for m in members {
        out.extend_from_slice(m);
    }
    out
}

fn ustar_header(name: &str, size: u64, typeflag: u8) -> [u8; 512] {
    let mut block = [0u8; 512];
    block[..name.len().min(100)].copy_from_slice(&name.as_bytes()[..name.len().min(100)]);
    block[100..107].copy_from_slice(b"0000644");
    block[108..115].copy_from_slice(b"0000000");
    block[116..123].copy_from_slice(b"0000000");
    let size_octal = format!("{size:011o}");
    block[124..135].copy_from_slice(size_octal.as_bytes());
    block[136..147].copy_from_slice(b"00000000000");
    block[156] = typeflag;
    block[257..262].copy_from_slice(b"ustar");
    block[263..265].copy_from_slice(b"00");
    // checksum over the header with the checksum field spaced out
    block[148..156].copy_from_slice(b"        ");
    let sum: u32 = block.iter().map(|&b| b as u32).sum();
    let csum = format!("{sum:06o}\0 ");
    block[148..156].copy_from_slice(csum.as_bytes());
    block
}

fn ustar_archive(files: &[(&str, &[u8])]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, data) in files {
        out.extend_from_slice(&ustar_header(name, data.len() as u64, b'0'));
        out.extend_from_slice(data);
        let pad = (512 - data.len() % 512) % 512;
        out.extend(std::iter::repeat(0u8).take(pad));
    }
    out.extend(std::iter::repeat(0u8).take(1024));
    out
}

/// Generate the probe archive for one variant. Deterministic.
pub fn generate(variant: ArchiveVariant) -> (String, Vec<u8>) {
    match variant {
        ArchiveVariant::BaselineAr => (
            "baseline.a".into(),
            ar_archive(&[ar_member("alpha.txt", "5", b"alpha"), ar_member("beta.txt", "4", b"beta")]),
        ),
        ArchiveVariant::BaselineUstar => (
            "baseline.tar".into(),
            ustar_archive(&[("alpha.txt", b"alpha"), ("beta.txt", b"beta")]),
        ),
        ArchiveVariant::CorruptSize => {
            ("corrupt_size.a".into(), ar_archive(&[ar_member("alpha.txt", "5x!", b"alpha")]))
        }
        ArchiveVariant::OversizedMember => {
            // Declares 4096 bytes but carries only 5.
            ("oversized.a".into(), ar_archive(&[ar_member("alpha.txt", "4096", b"alpha")]))
        }
        ArchiveVariant::ExtendedNameAbuse => {
            // BSD #1/N with N far beyond the member payload.
            ("extended_name.a".into(), ar_archive(&[ar_member("#1/4000", "8", b"abcdefgh")]))
        }
        ArchiveVariant::SpecialName => {
            ("special_name.a".into(), ar_archive(&[ar_member("//", "5", b"alpha")]))
        }
    }
}
