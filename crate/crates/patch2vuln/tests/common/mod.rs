//! Deterministic fixtures for integration tests: a hand-rolled 64-bit ELF
//! writer, a .deb package builder, and executable script helpers.
#![allow(dead_code)]

use flate2::write::GzEncoder;
use flate2::Compression;
use std::path::Path;

pub const TEXT_VADDR: u64 = 0x40_1000;
pub const TEXT_OFF: u64 = 0x1000;
pub const RODATA_VADDR: u64 = 0x40_2000;
pub const RODATA_OFF: u64 = 0x2000;

/// Builds a minimal x86_64 little-endian ET_EXEC image with .text, .rodata,
/// .symtab, .strtab, and .shstrtab sections. Bytes are fully caller-chosen,
/// so tests can plant aligned constants and string references precisely.
pub struct ElfBuilder {
    funcs: Vec<(String, Vec<u8>)>,
    rodata: Vec<u8>,
    stripped: bool,
}

impl ElfBuilder {
    pub fn new() -> Self {
        ElfBuilder { funcs: Vec::new(), rodata: Vec::new(), stripped: false }
    }

    pub fn stripped(mut self) -> Self {
        self.stripped = true;
        self
    }

    /// Append a function; returns its vaddr. Bodies are padded to 16 bytes
    /// so every function starts 8-aligned.
    pub fn func(&mut self, name: &str, body: &[u8]) -> u64 {
        let vaddr = TEXT_VADDR + self.text_len();
        let mut padded = body.to_vec();
        while padded.len() % 16 != 0 {
            padded.push(0x90);
        }
        self.funcs.push((name.to_string(), padded));
        vaddr
    }

    /// Append a NUL-terminated string to .rodata; returns its vaddr.
    pub fn rodata_string(&mut self, s: &str) -> u64 {
        let vaddr = RODATA_VADDR + self.rodata.len() as u64;
        self.rodata.extend_from_slice(s.as_bytes());
        self.rodata.push(0);
        vaddr
    }

    fn text_len(&self) -> u64 {
        self.funcs.iter().map(|(_, b)| b.len() as u64).sum()
    }

    pub fn build(&self) -> Vec<u8> {
        let text: Vec<u8> = self.funcs.iter().flat_map(|(_, b)| b.clone()).collect();

        // .strtab and symbol table (skipped bodies when stripped).
        let mut strtab = vec![0u8];
        let mut syms: Vec<[u8; 24]> = vec![[0u8; 24]];
        if !self.stripped {
            let mut vaddr = TEXT_VADDR;
            for (name, body) in &self.funcs {
                let name_off = strtab.len() as u32;
                strtab.extend_from_slice(name.as_bytes());
                strtab.push(0);
                let mut sym = [0u8; 24];
                sym[0..4].copy_from_slice(&name_off.to_le_bytes());
                sym[4] = 0x12; // STB_GLOBAL | STT_FUNC
                sym[6..8].copy_from_slice(&1u16.to_le_bytes()); // .text
                sym[8..16].copy_from_slice(&vaddr.to_le_bytes());
                sym[16..24].copy_from_slice(&(body.len() as u64).to_le_bytes());
                syms.push(sym);
                vaddr += body.len() as u64;
            }
        }
        let symtab: Vec<u8> = syms.iter().flatten().copied().collect();

        let mut shstrtab = vec![0u8];
        let mut name_off = |n: &str| {
            let off = shstrtab.len() as u32;
            shstrtab.extend_from_slice(n.as_bytes());
            shstrtab.push(0);
            off
        };
        let n_text = name_off(".text");
        let n_rodata = name_off(".rodata");
        let n_symtab = name_off(".symtab");
        let n_strtab = name_off(".strtab");
        let n_shstrtab = name_off(".shstrtab");

        let symtab_off = RODATA_OFF + self.rodata.len() as u64;
        let symtab_off = (symtab_off + 7) & !7;
        let strtab_off = symtab_off + symtab.len() as u64;
        let shstrtab_off = strtab_off + strtab.len() as u64;
        let shoff = (shstrtab_off + shstrtab.len() as u64 + 7) & !7;

        let mut out = vec![0u8; 64];
        out[0..4].copy_from_slice(b"\x7fELF");
        out[4] = 2; // 64-bit
        out[5] = 1; // little-endian
        out[6] = 1; // EV_CURRENT
        out[16..18].copy_from_slice(&2u16.to_le_bytes()); // ET_EXEC
        out[18..20].copy_from_slice(&62u16.to_le_bytes()); // EM_X86_64
        out[20..24].copy_from_slice(&1u32.to_le_bytes());
        out[24..32].copy_from_slice(&TEXT_VADDR.to_le_bytes()); // e_entry
        out[40..48].copy_from_slice(&shoff.to_le_bytes());
        out[52..54].copy_from_slice(&64u16.to_le_bytes()); // e_ehsize
        out[58..60].copy_from_slice(&64u16.to_le_bytes()); // e_shentsize
        out[60..62].copy_from_slice(&6u16.to_le_bytes()); // e_shnum
        out[62..64].copy_from_slice(&5u16.to_le_bytes()); // e_shstrndx

        out.resize(TEXT_OFF as usize, 0);
        out.extend_from_slice(&text);
        out.resize(RODATA_OFF as usize, 0);
        out.extend_from_slice(&self.rodata);
        out.resize(symtab_off as usize, 0);
        out.extend_from_slice(&symtab);
        out.extend_from_slice(&strtab);
        out.extend_from_slice(&shstrtab);
        out.resize(shoff as usize, 0);

        let shdr = |name: u32, sh_type: u32, flags: u64, vaddr: u64, off: u64, size: u64, link: u32, entsize: u64| {
            let mut h = [0u8; 64];
            h[0..4].copy_from_slice(&name.to_le_bytes());
            h[4..8].copy_from_slice(&sh_type.to_le_bytes());
            h[8..16].copy_from_slice(&flags.to_le_bytes());
            h[16..24].copy_from_slice(&vaddr.to_le_bytes());
            h[24..32].copy_from_slice(&off.to_le_bytes());
            h[32..40].copy_from_slice(&size.to_le_bytes());
            h[40..44].copy_from_slice(&link.to_le_bytes());
            h[48..56].copy_from_slice(&1u64.to_le_bytes()); // addralign
            h[56..64].copy_from_slice(&entsize.to_le_bytes());
            h
        };
        out.extend_from_slice(&[0u8; 64]); // SHN_UNDEF
        out.extend_from_slice(&shdr(n_text, 1, 0x6, TEXT_VADDR, TEXT_OFF, text.len() as u64, 0, 0));
        out.extend_from_slice(&shdr(n_rodata, 1, 0x2, RODATA_VADDR, RODATA_OFF, self.rodata.len() as u64, 0, 0));
        out.extend_from_slice(&shdr(n_symtab, 2, 0, 0, symtab_off, symtab.len() as u64, 4, 24));
        out.extend_from_slice(&shdr(n_strtab, 3, 0, 0, strtab_off, strtab.len() as u64, 0, 0));
        out.extend_from_slice(&shdr(n_shstrtab, 3, 0, 0, shstrtab_off, shstrtab.len() as u64, 0, 0));
        out
    }
}

/// 8-byte little-endian immediate, for planting aligned constants or string
/// pointers inside function bodies.
pub fn imm64(v: u64) -> [u8; 8] {
    v.to_le_bytes()
}

fn ar_member(name: &str, payload: &[u8]) -> Vec<u8> {
    let hdr = format!("{name:<16}{:<12}{:<6}{:<6}{:<8}{:<10}`\n", 0, 0, 0, "100644", payload.len());
    assert_eq!(hdr.len(), 60);
    let mut out = hdr.into_bytes();
    out.extend_from_slice(payload);
    if out.len() % 2 == 1 {
        out.push(b'\n');
    }
    out
}

fn targz(files: &[(&str, &[u8], u32)]) -> Vec<u8> {
    let gz = GzEncoder::new(Vec::new(), Compression::default());
    let mut tar = tar::Builder::new(gz);
    for (path, data, mode) in files {
        let mut header = tar::Header::new_ustar();
        header.set_size(data.len() as u64);
        header.set_mode(*mode);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        tar.append_data(&mut header, path, *data).unwrap();
    }
    let gz = tar.into_inner().unwrap();
    gz.finish().unwrap()
}

/// Assemble a .deb (ar of debian-binary + control.tar.gz + data.tar.gz).
pub fn build_deb(path: &Path, data_files: &[(&str, &[u8], u32)]) {
    let control = targz(&[(
        "./control",
        b"Package: fixture\nVersion: 1.0\nArchitecture: amd64\nDescription: test fixture\n".as_slice(),
        0o644,
    )]);
    let data = targz(data_files);
    let mut out = b"!<arch>\n".to_vec();
    out.extend_from_slice(&ar_member("debian-binary", b"2.0\n"));
    out.extend_from_slice(&ar_member("control.tar.gz", &control));
    out.extend_from_slice(&ar_member("data.tar.gz", &data));
    std::fs::write(path, out).unwrap();
}

/// Write an executable shell script.
pub fn write_script(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o755)).unwrap();
    }
}

/// Small deterministic RNG for randomized test inputs (splitmix64).
pub struct TestRng(pub u64);

impl TestRng {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n.max(1)
    }

    pub fn f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}
