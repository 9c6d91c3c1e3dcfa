//! Package acquisition: ar container parsing, .deb extraction into a
//! normalized root, and target ELF selection.
//!
//! Extraction never writes outside the destination directory: every tar entry
//! path is checked component-by-component before any byte lands on disk.

use crate::digest::{sha256_file, sha256_hex};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Component, Path, PathBuf};
use thiserror::Error;

pub const AR_MAGIC: &[u8; 8] = b"!<arch>\n";
pub const ELF_MAGIC: &[u8; 4] = b"\x7fELF";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairCategory {
    Security,
    Control,
}

/// One benchmark row: an old/new package pair and its target ELF paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairManifest {
    pub pair_id: String,
    pub category: PairCategory,
    pub old_pkg: PathBuf,
    pub new_pkg: PathBuf,
    /// Absolute paths inside the extracted filesystem root, e.g. /usr/sbin/tcpdump.
    pub target_elf_paths: Vec<String>,
    #[serde(default)]
    pub notes: String,
}

impl PairManifest {
    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.pair_id.is_empty() {
            return Err(ExtractError::BadManifest("empty pair_id".into()));
        }
        if self.target_elf_paths.is_empty() {
            return Err(ExtractError::BadManifest(format!(
                "pair {}: target_elf_paths is empty",
                self.pair_id
            )));
        }
        for p in &self.target_elf_paths {
            if !p.starts_with('/') {
                return Err(ExtractError::BadManifest(format!(
                    "pair {}: target path {p} is not absolute",
                    self.pair_id
                )));
            }
        }
        Ok(())
    }
}

/// One member of an ar archive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArMember {
    pub name: String,
    pub size: u64,
    /// File offset of the payload within the archive.
    pub offset: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct IndexedFile {
    pub path: String,
    pub size: u64,
    pub digest: String,
}

/// Result of extracting one package: a directory tree plus its content index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractedRoot {
    pub root_dir: PathBuf,
    pub manifest_digest: String,
    pub file_index: Vec<IndexedFile>,
    /// Symlink entries, recorded but not indexed: (path, target).
    #[serde(default)]
    pub symlinks: Vec<(String, String)>,
    /// Newest mtime seen in control.tar.*, run metadata only. Never reaches
    /// the agent evidence path.
    #[serde(default)]
    pub control_mtime: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("not an ar archive (bad magic)")]
    BadMagic,
    #[error("truncated ar member at offset {0}: declared size exceeds remaining bytes")]
    TruncatedMember(u64),
    #[error("bad ar member header at offset {0}: {1}")]
    BadHeader(u64, String),
    #[error("package has no data.tar.gz/xz/zst member")]
    MissingDataMember,
    #[error("unsupported data member compression: {0}")]
    UnsupportedCompression(String),
    #[error("tar entry escapes extraction root: {0}")]
    PathEscape(String),
    #[error("target path missing from extracted root: {0}")]
    TargetMissing(String),
    #[error("target is not an ELF file: {0}")]
    NotAnElf(String),
    #[error("bad pair manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parse an ar archive into its members, in file order.
///
/// Handles BSD-style extended names (`#1/N`) and strips the trailing `/` of
/// GNU-style names.
pub fn parse_ar(data: &[u8]) -> Result<Vec<ArMember>, ExtractError> {
    if data.len() < AR_MAGIC.len() || &data[..AR_MAGIC.len()] != AR_MAGIC {
        return Err(ExtractError::BadMagic);
    }
    let mut members = Vec::new();
    let mut pos = AR_MAGIC.len() as u64;
    while (pos as usize) < data.len() {
        // Members start at even offsets; a single '\n' pads odd payloads.
        if pos % 2 == 1 {
            pos += 1;
            continue;
        }
        let start = pos as usize;
        if start == data.len() {
            break;
        }
        if data.len() - start < 60 {
            return Err(ExtractError::BadHeader(pos, "short header".into()));
        }
        let hdr = &data[start..start + 60];
        if &hdr[58..60] != b"`\n" {
            return Err(ExtractError::BadHeader(pos, "missing header terminator".into()));
        }
        let raw_name = trim_ascii(&hdr[0..16]);
        let size_field = trim_ascii(&hdr[48..58]);
        let size: u64 = std::str::from_utf8(size_field)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ExtractError::BadHeader(pos, "non-decimal size field".into()))?;
        let payload_off = start + 60;
        if (payload_off as u64) + size > data.len() as u64 {
            return Err(ExtractError::TruncatedMember(pos));
        }
        let payload = &data[payload_off..payload_off + size as usize];
        let (name, payload, offset) = if let Some(rest) = strip_prefix(raw_name, b"#1/") {
            // BSD extended name: real name occupies the first N payload bytes.
            let n: usize = std::str::from_utf8(rest)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ExtractError::BadHeader(pos, "bad #1/N name length".into()))?;
            if n > payload.len() {
                return Err(ExtractError::BadHeader(pos, "#1/N name exceeds member size".into()));
            }
            let name = String::from_utf8_lossy(trim_nul(&payload[..n])).into_owned();
            (name, payload[n..].to_vec(), (payload_off + n) as u64)
        } else {
            let mut name = String::from_utf8_lossy(raw_name).into_owned();
            // GNU archives terminate names with '/'; special names "/" and "//" keep it.
            if name.len() > 1 && name.ends_with('/') {
                name.pop();
            }
            (name, payload.to_vec(), payload_off as u64)
        };
        members.push(ArMember { name, size: payload.len() as u64, offset, payload });
        pos = payload_off as u64 + size;
    }
    Ok(members)
}

fn trim_ascii(b: &[u8]) -> &[u8] {
    let mut end = b.len();
    while end > 0 && (b[end - 1] == b' ' || b[end - 1] == 0) {
        end -= 1;
    }
    &b[..end]
}

fn trim_nul(b: &[u8]) -> &[u8] {
    match b.iter().position(|&c| c == 0) {
        Some(i) => &b[..i],
        None => b,
    }
}

fn strip_prefix<'a>(b: &'a [u8], pre: &[u8]) -> Option<&'a [u8]> {
    if b.len() > pre.len() && &b[..pre.len()] == pre {
        Some(&b[pre.len()..])
    } else {
        None
    }
}

fn decompress_member(name: &str, payload: &[u8]) -> Result<Vec<u8>, ExtractError> {
    let mut out = Vec::new();
    if name.ends_with(".gz") {
        flate2::read::GzDecoder::new(payload).read_to_end(&mut out)?;
    } else if name.ends_with(".xz") {
        xz2::read::XzDecoder::new(payload).read_to_end(&mut out)?;
    } else if name.ends_with(".zst") {
        zstd::stream::read::Decoder::new(payload)?.read_to_end(&mut out)?;
    } else {
        return Err(ExtractError::UnsupportedCompression(name.to_string()));
    }
    Ok(out)
}

/// Resolve a tar entry path to a destination path, rejecting traversal.
fn safe_join(dest: &Path, entry_path: &Path) -> Result<(PathBuf, String), ExtractError> {
    let mut rel = PathBuf::new();
    for comp in entry_path.components() {
        match comp {
            Component::Normal(c) => rel.push(c),
            Component::CurDir => {}
            _ => return Err(ExtractError::PathEscape(entry_path.display().to_string())),
        }
    }
    if rel.as_os_str().is_empty() {
        return Err(ExtractError::PathEscape(entry_path.display().to_string()));
    }
    let rel_str = rel.to_string_lossy().into_owned();
    Ok((dest.join(rel), rel_str))
}

/// Extract a .deb package under `dest` and index the resulting tree.
///
/// Idempotent: re-extraction into the same destination reproduces the same
/// manifest digest.
pub fn extract_deb(pkg: &Path, dest: &Path) -> Result<ExtractedRoot, ExtractError> {
    let data = fs::read(pkg)?;
    let members = parse_ar(&data)?;

    let data_member = members
        .iter()
        .find(|m| m.name.starts_with("data.tar"))
        .ok_or(ExtractError::MissingDataMember)?;
    let tarball = decompress_member(&data_member.name, &data_member.payload)?;

    let control_mtime = members
        .iter()
        .find(|m| m.name.starts_with("control.tar"))
        .and_then(|m| decompress_member(&m.name, &m.payload).ok())
        .and_then(|t| newest_tar_mtime(&t));

    fs::create_dir_all(dest)?;
    let mut symlinks = Vec::new();
    let mut archive = tar::Archive::new(io::Cursor::new(tarball));
    for entry in archive.entries()? {
        let mut entry = entry?;
        let entry_path = entry.path()?.into_owned();
        let (target, rel) = safe_join(dest, &entry_path)?;
        match entry.header().entry_type() {
            tar::EntryType::Regular | tar::EntryType::Continuous => {
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent)?;
                }
                let mut buf = Vec::with_capacity(entry.size() as usize);
                entry.read_to_end(&mut buf)?;
                fs::write(&target, buf)?;
            }
            tar::EntryType::Directory => {
                fs::create_dir_all(&target)?;
            }
            tar::EntryType::Symlink => {
                let link = entry
                    .link_name()?
                    .map(|l| l.to_string_lossy().into_owned())
                    .unwrap_or_default();
                symlinks.push((rel, link));
            }
            tar::EntryType::Link => {
                // Hard links materialize as copies of the already-extracted file.
                if let Some(link) = entry.link_name()? {
                    if let Ok((src, _)) = safe_join(dest, &link) {
                        if src.is_file() {
                            if let Some(parent) = target.parent() {
                                fs::create_dir_all(parent)?;
                            }
                            fs::copy(&src, &target)?;
                        } else {
                            log::warn!("hard link target missing, skipped: {rel}");
                        }
                    }
                }
            }
            other => {
                log::info!("skipping non-file tar entry {rel} ({other:?})");
            }
        }
    }
    let mut root = index_tree(dest)?;
    root.symlinks = symlinks;
    root.control_mtime = control_mtime;
    Ok(root)
}

fn newest_tar_mtime(tarball: &[u8]) -> Option<u64> {
    let mut archive = tar::Archive::new(io::Cursor::new(tarball));
    let mut newest = None;
    for entry in archive.entries().ok()? {
        let entry = entry.ok()?;
        if let Ok(m) = entry.header().mtime() {
            newest = Some(newest.map_or(m, |n: u64| n.max(m)));
        }
    }
    newest
}

/// Walk `root` and build the sorted content index plus its digest.
pub fn index_tree(root: &Path) -> Result<ExtractedRoot, ExtractError> {
    let mut files = BTreeMap::new();
    walk(root, root, &mut files)?;
    let file_index: Vec<IndexedFile> = files
        .into_iter()
        .map(|(path, (size, digest))| IndexedFile { path, size, digest })
        .collect();
    let serialized = serde_json::to_vec(&file_index).expect("index serializes");
    Ok(ExtractedRoot {
        root_dir: root.to_path_buf(),
        manifest_digest: sha256_hex(&serialized),
        file_index,
        symlinks: Vec::new(),
        control_mtime: None,
    })
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, (u64, String)>) -> Result<(), ExtractError> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let ft = entry.file_type()?;
        if ft.is_dir() {
            walk(root, &path, out)?;
        } else if ft.is_file() {
            let rel = path.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
            let size = entry.metadata()?.len();
            let digest = sha256_file(&path)?;
            out.insert(rel, (size, digest));
        }
    }
    Ok(())
}

/// Read the bytes of every target path listed in the pair manifest.
pub fn select_targets(
    root: &ExtractedRoot,
    manifest: &PairManifest,
) -> Result<Vec<(String, Vec<u8>)>, ExtractError> {
    let mut out = Vec::new();
    for target in &manifest.target_elf_paths {
        let rel = target.trim_start_matches('/');
        let path = root.root_dir.join(rel);
        if !path.is_file() {
            return Err(ExtractError::TargetMissing(target.clone()));
        }
        let bytes = fs::read(&path)?;
        if bytes.len() < 4 || &bytes[..4] != ELF_MAGIC {
            return Err(ExtractError::NotAnElf(target.clone()));
        }
        out.push((target.clone(), bytes));
    }
    Ok(out)
}
