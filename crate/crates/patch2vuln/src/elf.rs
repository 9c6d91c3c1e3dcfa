//! ELF inspection: headers, sections, symbols, strings, and the per-function
//! regions that feed diffing and dossier construction.

use crate::config::{InspectConfig, SENTINEL_CONSTANTS};
use crate::digest::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

pub const SHF_ALLOC: u64 = 0x2;
pub const SHF_EXECINSTR: u64 = 0x4;
const SHT_SYMTAB: u32 = 2;
const SHT_DYNSYM: u32 = 11;
const SHT_NOBITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bitness {
    #[serde(rename = "32")]
    B32,
    #[serde(rename = "64")]
    B64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElfType {
    Exec,
    Shared,
    Pie,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolKind {
    Function,
    Object,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolBinding {
    Local,
    Global,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolSource {
    Symtab,
    Dynsym,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub vaddr: u64,
    pub offset: u64,
    pub size: u64,
    pub flags: u64,
    #[serde(skip_serializing_if = "is_zero", default)]
    pub sh_type: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymbolEntry {
    pub name: String,
    pub vaddr: u64,
    pub size: u64,
    pub kind: SymbolKind,
    pub binding: SymbolBinding,
    pub source: SymbolSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElfMetadata {
    pub path: String,
    pub digest: String,
    pub bitness: Bitness,
    pub endianness: Endianness,
    pub elf_type: ElfType,
    pub machine: String,
    pub build_id: Option<String>,
    pub sections: Vec<Section>,
    pub dynamic_imports: Vec<String>,
    pub dynamic_exports: Vec<String>,
    pub symbols: Vec<SymbolEntry>,
}

/// A contiguous function-sized byte region used as diffing currency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionRegion {
    pub func_id: String,
    pub vaddr: u64,
    pub size: u64,
    pub bytes_digest: String,
    #[serde(with = "hex_bytes")]
    pub byte_window: Vec<u8>,
    pub referenced_strings: Vec<String>,
    pub scanned_constants: Vec<u64>,
    /// True for synthetic FUN_ identifiers (stripped fallback).
    pub synthetic: bool,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("malformed ELF: {0}")]
    Malformed(String),
    #[error("unsupported ELF class/encoding")]
    UnsupportedClass,
}

struct Reader<'a> {
    data: &'a [u8],
    le: bool,
}

impl<'a> Reader<'a> {
    fn slice(&self, off: usize, len: usize) -> Result<&'a [u8], ElfError> {
        self.data
            .get(off..off.checked_add(len).ok_or_else(|| ElfError::Malformed("offset overflow".into()))?)
            .ok_or_else(|| ElfError::Malformed(format!("out-of-range read at {off}+{len}")))
    }

    fn u16(&self, off: usize) -> Result<u16, ElfError> {
        let b = self.slice(off, 2)?;
        Ok(if self.le {
            u16::from_le_bytes([b[0], b[1]])
        } else {
            u16::from_be_bytes([b[0], b[1]])
        })
    }

    fn u32(&self, off: usize) -> Result<u32, ElfError> {
        let b = self.slice(off, 4)?;
        let arr = [b[0], b[1], b[2], b[3]];
        Ok(if self.le { u32::from_le_bytes(arr) } else { u32::from_be_bytes(arr) })
    }

    fn u64(&self, off: usize) -> Result<u64, ElfError> {
        let b = self.slice(off, 8)?;
        let arr: [u8; 8] = b.try_into().unwrap();
        Ok(if self.le { u64::from_le_bytes(arr) } else { u64::from_be_bytes(arr) })
    }

}

fn machine_name(em: u16) -> String {
    match em {
        3 => "x86".into(),
        8 => "mips".into(),
        40 => "arm".into(),
        62 => "x86_64".into(),
        183 => "aarch64".into(),
        243 => "riscv".into(),
        other => format!("em_{other}"),
    }
}

fn cstr_at(strtab: &[u8], off: usize) -> String {
    let tail = strtab.get(off..).unwrap_or(&[]);
    let end = tail.iter().position(|&c| c == 0).unwrap_or(tail.len());
    String::from_utf8_lossy(&tail[..end]).into_owned()
}

/// Decode an ELF image: headers, section table, symbol tables, dynamic
/// imports/exports, and the GNU build id when present.
pub fn parse_elf(data: &[u8], path: &str) -> Result<ElfMetadata, ElfError> {
    if data.len() < 16 || &data[..4] != b"\x7fELF" {
        return Err(ElfError::Malformed("missing ELF magic or truncated ident".into()));
    }
    let b64 = match data[4] {
        1 => false,
        2 => true,
        _ => return Err(ElfError::UnsupportedClass),
    };
    let le = match data[5] {
        1 => true,
        2 => false,
        _ => return Err(ElfError::UnsupportedClass),
    };
    let r = Reader { data, le };
    let ehsize = if b64 { 64 } else { 52 };
    if data.len() < ehsize {
        return Err(ElfError::Malformed("truncated ELF header".into()));
    }
    let e_type = r.u16(16)?;
    let machine = machine_name(r.u16(18)?);
    let (shoff, shentsize, shnum, shstrndx) = if b64 {
        (r.u64(40)?, r.u16(58)? as usize, r.u16(60)? as usize, r.u16(62)? as usize)
    } else {
        (r.u32(32)? as u64, r.u16(46)? as usize, r.u16(48)? as usize, r.u16(50)? as usize)
    };
    let min_shentsize = if b64 { 64 } else { 40 };
    if shnum > 0 && shentsize < min_shentsize {
        return Err(ElfError::Malformed("section entry size too small".into()));
    }

    // Raw section headers first; names resolve through shstrtab afterwards.
    struct RawSection {
        name_off: u32,
        sh_type: u32,
        flags: u64,
        vaddr: u64,
        offset: u64,
        size: u64,
        link: u32,
        entsize: u64,
    }
    let mut raw = Vec::with_capacity(shnum);
    for i in 0..shnum {
        let base = (shoff as usize)
            .checked_add(i * shentsize)
            .ok_or_else(|| ElfError::Malformed("section table offset overflow".into()))?;
        r.slice(base, shentsize)?;
        let (name_off, sh_type) = (r.u32(base)?, r.u32(base + 4)?);
        let (flags, vaddr, offset, size, link, entsize) = if b64 {
            (
                r.u64(base + 8)?,
                r.u64(base + 16)?,
                r.u64(base + 24)?,
                r.u64(base + 32)?,
                r.u32(base + 40)?,
                r.u64(base + 56)?,
            )
        } else {
            (
                r.u32(base + 8)? as u64,
                r.u32(base + 12)? as u64,
                r.u32(base + 16)? as u64,
                r.u32(base + 20)? as u64,
                r.u32(base + 24)?,
                r.u32(base + 36)? as u64,
            )
        };
        if sh_type != SHT_NOBITS && size > 0 {
            r.slice(offset as usize, size as usize)
                .map_err(|_| ElfError::Malformed(format!("section {i} file extent out of range")))?;
        }
        raw.push(RawSection { name_off, sh_type, flags, vaddr, offset, size, link, entsize });
    }

    let shstrtab: &[u8] = if shstrndx < raw.len() {
        let s = &raw[shstrndx];
        if s.sh_type == SHT_NOBITS {
            &[]
        } else {
            r.slice(s.offset as usize, s.size as usize)?
        }
    } else {
        &[]
    };

    let sections: Vec<Section> = raw
        .iter()
        .map(|s| Section {
            name: cstr_at(shstrtab, s.name_off as usize),
            vaddr: s.vaddr,
            offset: s.offset,
            size: s.size,
            flags: s.flags,
            sh_type: s.sh_type,
        })
        .collect();

    let mut symbols = Vec::new();
    let mut dynamic_imports = Vec::new();
    let mut dynamic_exports = Vec::new();
    for (idx, s) in raw.iter().enumerate() {
        if s.sh_type != SHT_SYMTAB && s.sh_type != SHT_DYNSYM {
            continue;
        }
        let source = if s.sh_type == SHT_SYMTAB { SymbolSource::Symtab } else { SymbolSource::Dynsym };
        let strtab_idx = s.link as usize;
        let strtab = if strtab_idx < raw.len() {
            let st = &raw[strtab_idx];
            r.slice(st.offset as usize, st.size as usize)?
        } else {
            &[]
        };
        let entsize = if s.entsize > 0 { s.entsize as usize } else if b64 { 24 } else { 16 };
        let expected = if b64 { 24 } else { 16 };
        if entsize < expected {
            return Err(ElfError::Malformed(format!("symbol entry size too small in section {idx}")));
        }
        let count = (s.size as usize) / entsize;
        for i in 0..count {
            let base = s.offset as usize + i * entsize;
            let (name_off, value, size, info, shndx) = if b64 {
                (
                    r.u32(base)?,
                    r.u64(base + 8)?,
                    r.u64(base + 16)?,
                    r.slice(base + 4, 1)?[0],
                    r.u16(base + 6)?,
                )
            } else {
                (
                    r.u32(base)?,
                    r.u32(base + 4)? as u64,
                    r.u32(base + 8)? as u64,
                    r.slice(base + 12, 1)?[0],
                    r.u16(base + 14)?,
                )
            };
            let name = cstr_at(strtab, name_off as usize);
            let kind = match info & 0xf {
                1 => SymbolKind::Object,
                2 => SymbolKind::Function,
                _ => SymbolKind::Other,
            };
            let binding = match info >> 4 {
                0 => SymbolBinding::Local,
                2 => SymbolBinding::Weak,
                _ => SymbolBinding::Global,
            };
            if name.is_empty() && kind != SymbolKind::Other {
                continue;
            }
            if source == SymbolSource::Dynsym && !name.is_empty() {
                if shndx == 0 {
                    dynamic_imports.push(name.clone());
                } else if binding != SymbolBinding::Local {
                    dynamic_exports.push(name.clone());
                }
            }
            if !name.is_empty() || kind == SymbolKind::Other {
                symbols.push(SymbolEntry { name, vaddr: value, size, kind, binding, source });
            }
        }
    }
    dynamic_imports.sort();
    dynamic_imports.dedup();
    dynamic_exports.sort();
    dynamic_exports.dedup();

    let has_interp = sections.iter().any(|s| s.name == ".interp");
    let elf_type = match e_type {
        2 => ElfType::Exec,
        3 if has_interp => ElfType::Pie,
        3 => ElfType::Shared,
        _ => ElfType::Other,
    };

    let build_id = sections
        .iter()
        .find(|s| s.name == ".note.gnu.build-id")
        .and_then(|s| parse_build_id(&r, s.offset as usize, s.size as usize));

    Ok(ElfMetadata {
        path: path.to_string(),
        digest: sha256_hex(data),
        bitness: if b64 { Bitness::B64 } else { Bitness::B32 },
        endianness: if le { Endianness::Little } else { Endianness::Big },
        elf_type,
        machine,
        build_id,
        sections,
        dynamic_imports,
        dynamic_exports,
        symbols,
    })
}

fn parse_build_id(r: &Reader, off: usize, size: usize) -> Option<String> {
    if size < 12 {
        return None;
    }
    let namesz = r.u32(off).ok()? as usize;
    let descsz = r.u32(off + 4).ok()? as usize;
    let name_end = off + 12 + namesz;
    if r.slice(off + 12, namesz).ok()? != b"GNU\0" {
        return None;
    }
    let desc_off = (name_end + 3) & !3;
    Some(hex::encode(r.slice(desc_off, descsz).ok()?))
}

/// Maximal printable-ASCII runs of at least `min_len` bytes, in offset order.
pub fn extract_strings(data: &[u8], min_len: usize) -> Vec<(u64, String)> {
    assert!(min_len >= 1);
    let mut out = Vec::new();
    let mut start = None;
    for (i, &b) in data.iter().enumerate() {
        let printable = (0x20..=0x7e).contains(&b);
        match (printable, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= min_len {
                    out.push((s as u64, String::from_utf8_lossy(&data[s..i]).into_owned()));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if data.len() - s >= min_len {
            out.push((s as u64, String::from_utf8_lossy(&data[s..]).into_owned()));
        }
    }
    out
}

fn vaddr_to_offset(sections: &[Section], vaddr: u64) -> Option<u64> {
    sections
        .iter()
        .filter(|s| s.flags & SHF_ALLOC != 0 && s.sh_type != SHT_NOBITS)
        .find(|s| vaddr >= s.vaddr && vaddr < s.vaddr + s.size)
        .map(|s| s.offset + (vaddr - s.vaddr))
}

fn offset_to_vaddr(sections: &[Section], offset: u64) -> Option<u64> {
    sections
        .iter()
        .filter(|s| s.flags & SHF_ALLOC != 0 && s.sh_type != SHT_NOBITS && s.size > 0)
        .find(|s| offset >= s.offset && offset < s.offset + s.size)
        .map(|s| s.vaddr + (offset - s.offset))
}

pub fn synthetic_func_id(vaddr: u64) -> String {
    format!("FUN_{vaddr:08x}")
}

/// Derive one region per function symbol, or fixed-stride pseudo-regions for
/// stripped binaries. Regions are address-sorted and non-overlapping per
/// section.
pub fn function_regions(meta: &ElfMetadata, data: &[u8], cfg: &InspectConfig) -> Vec<FunctionRegion> {
    let exec_sections: Vec<&Section> = meta
        .sections
        .iter()
        .filter(|s| s.flags & SHF_EXECINSTR != 0 && s.sh_type != SHT_NOBITS && s.size > 0)
        .collect();

    // Strings with vaddr spans, for the data-reference attribution pass.
    let strings: Vec<(u64, String)> = extract_strings(data, cfg.string_min_len)
        .into_iter()
        .filter_map(|(off, s)| offset_to_vaddr(&meta.sections, off).map(|va| (va, s)))
        .collect();

    // Function symbols with addresses inside an executable section.
    let mut funcs: Vec<(String, u64, u64)> = meta
        .symbols
        .iter()
        .filter(|s| s.kind == SymbolKind::Function)
        .filter(|s| exec_sections.iter().any(|sec| s.vaddr >= sec.vaddr && s.vaddr < sec.vaddr + sec.size))
        .map(|s| (s.name.clone(), s.vaddr, s.size))
        .collect();
    funcs.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    funcs.dedup_by(|a, b| a.1 == b.1);

    let mut spans: Vec<(String, u64, u64, bool)> = Vec::new();
    if funcs.is_empty() {
        // Stripped fallback: stride-partition every executable section.
        for sec in &exec_sections {
            let mut va = sec.vaddr;
            let end = sec.vaddr + sec.size;
            while va < end {
                let size = cfg.stripped_stride.min(end - va);
                spans.push((synthetic_func_id(va), va, size, true));
                va += size;
            }
        }
    } else {
        for (i, (name, vaddr, size)) in funcs.iter().enumerate() {
            let section = exec_sections
                .iter()
                .find(|sec| *vaddr >= sec.vaddr && *vaddr < sec.vaddr + sec.size)
                .expect("filtered above");
            let sec_end = section.vaddr + section.size;
            // Zero-size symbols take the gap to the next symbol in the section.
            let next_in_section = funcs[i + 1..]
                .iter()
                .map(|f| f.1)
                .find(|v| *v > *vaddr && *v < sec_end)
                .unwrap_or(sec_end);
            let mut sz = if *size == 0 { next_in_section - vaddr } else { *size };
            sz = sz.min(next_in_section - vaddr).min(sec_end - vaddr);
            if sz == 0 {
                continue;
            }
            let id = if name.is_empty() { synthetic_func_id(*vaddr) } else { name.clone() };
            spans.push((id, *vaddr, sz, name.is_empty()));
        }
    }
    spans.sort_by(|a, b| a.1.cmp(&b.1));

    let mut out = Vec::with_capacity(spans.len());
    for (func_id, vaddr, size, synthetic) in spans {
        let Some(off) = vaddr_to_offset(&meta.sections, vaddr) else { continue };
        let off = off as usize;
        let avail = data.len().saturating_sub(off) as u64;
        let size = size.min(avail);
        if size == 0 {
            continue;
        }
        let bytes = &data[off..off + size as usize];
        let window_len = bytes.len().min(cfg.window_cap);
        out.push(FunctionRegion {
            func_id,
            vaddr,
            size,
            bytes_digest: sha256_hex(bytes),
            byte_window: bytes[..window_len].to_vec(),
            referenced_strings: referenced_strings(bytes, &strings),
            scanned_constants: scan_sentinels(bytes),
            synthetic,
        });
    }
    out
}

/// Aligned 4-byte (and 8-byte, for 64-bit sentinels) little-endian words that
/// equal a sentinel constant.
fn scan_sentinels(bytes: &[u8]) -> Vec<u64> {
    let mut found = BTreeSet::new();
    for chunk in bytes.chunks_exact(4) {
        let w = u32::from_le_bytes(chunk.try_into().unwrap()) as u64;
        if SENTINEL_CONSTANTS.contains(&w) {
            found.insert(w);
        }
    }
    for chunk in bytes.chunks_exact(8) {
        let w = u64::from_le_bytes(chunk.try_into().unwrap());
        if SENTINEL_CONSTANTS.contains(&w) {
            found.insert(w);
        }
    }
    found.into_iter().collect()
}

/// Attribute a string to a region when any aligned 4- or 8-byte word in the
/// region, read as a vaddr, lands inside the string's span.
fn referenced_strings(bytes: &[u8], strings: &[(u64, String)]) -> Vec<String> {
    let mut refs = BTreeSet::new();
    let mut check = |v: u64| {
        for (va, s) in strings {
            if v >= *va && v < va + s.len() as u64 {
                refs.insert(s.clone());
            }
        }
    };
    for chunk in bytes.chunks_exact(8) {
        check(u64::from_le_bytes(chunk.try_into().unwrap()));
    }
    for chunk in bytes.chunks_exact(4) {
        check(u32::from_le_bytes(chunk.try_into().unwrap()) as u64);
    }
    refs.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strings_basic() {
        assert_eq!(extract_strings(b"\x00abc\x00", 3), vec![(1, "abc".to_string())]);
        assert_eq!(extract_strings(b"ab\x00", 3), vec![]);
    }

    #[test]
    fn strings_trailing_nul_invariant() {
        let a = extract_strings(b"hello world", 4);
        let b = extract_strings(b"hello world\x00\x00\x00", 4);
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_header_is_malformed() {
        let data = b"\x7fELF\x02\x01\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(parse_elf(data, "x"), Err(ElfError::Malformed(_))));
    }

    #[test]
    fn unsupported_class_rejected() {
        let mut data = vec![0u8; 64];
        data[..4].copy_from_slice(b"\x7fELF");
        data[4] = 9;
        assert!(matches!(parse_elf(&data, "x"), Err(ElfError::UnsupportedClass)));
    }

    #[test]
    fn sentinel_scan_finds_int_max() {
        // FF FF FF 7F at offset 0 (aligned) = 0x7fffffff.
        let bytes = [0xff, 0xff, 0xff, 0x7f, 0, 0, 0, 0];
        assert!(scan_sentinels(&bytes).contains(&0x7fff_ffff));
    }

    #[test]
    fn sentinel_scan_ignores_unaligned() {
        let bytes = [0x00, 0xff, 0xff, 0xff, 0x7f, 0, 0, 0];
        assert!(!scan_sentinels(&bytes).contains(&0x7fff_ffff));
    }

    #[test]
    fn synthetic_ids_are_zero_padded_hex() {
        assert_eq!(synthetic_func_id(0x1350), "FUN_00001350");
    }
}
