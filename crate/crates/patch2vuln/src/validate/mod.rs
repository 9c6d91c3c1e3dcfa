//! Bounded old/new validation: render probe inputs from the action schema,
//! execute both binaries under resource limits, normalize and compare their
//! outputs, and minimize differential inputs.

pub mod archive;
pub mod minimize;
pub mod pcap;

use crate::agent::{ActionType, ValidationAction};
use crate::config::ValidateConfig;
use archive::ArchiveVariant;
use minimize::ddmin_bytes;
pub use minimize::MinimizeStats;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Default logical size of the sparse filter-file probe: 2 GiB.
pub const SPARSE_FILTER_SIZE: u64 = 2 * 1024 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFile {
    Dense(#[serde(with = "hexbytes")] Vec<u8>),
    /// Logically large, physically sparse; only `head` bytes are dense.
    Sparse {
        logical_size: u64,
        #[serde(with = "hexbytes")]
        head: Vec<u8>,
    },
}

mod hexbytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl ProbeFile {
    pub fn dense_len(&self) -> usize {
        match self {
            ProbeFile::Dense(b) => b.len(),
            ProbeFile::Sparse { head, .. } => head.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeInput {
    pub probe_id: String,
    pub action: ValidationAction,
    pub files: Vec<(String, ProbeFile)>,
    /// Tokens of the form "{name}" resolve to the file's on-disk path.
    pub argv_template: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stdin: Option<Vec<u8>>,
    /// Set when the action cannot run here (e.g. no compiler configured).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub marker: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Old,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ExitDisposition {
    Exited(i32),
    Signaled(i32),
    Timeout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub side: Side,
    pub exit_status: ExitDisposition,
    pub stdout: String,
    pub stderr: String,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifferentialKind {
    None,
    OutputDiff,
    CrashOldOnly,
    CrashNewOnly,
    CrashBoth,
    TimeoutDiff,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifferentialVerdict {
    pub kind: DifferentialKind,
    /// Normalized old/new excerpts backing the verdict.
    pub evidence: (String, String),
}

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("unsupported action: {0}")]
    UnsupportedAction(String),
    #[error("harness unavailable: {0}")]
    HarnessUnavailable(String),
    #[error("failed to spawn {0}: {1}")]
    SpawnError(String, String),
    #[error("differential does not reproduce on the original input")]
    NotReproducible,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// Deterministic byte stream; splitmix64.
fn seeded_bytes(seed: u64, len: usize) -> Vec<u8> {
    let mut state = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let mut z = state;
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        out.extend_from_slice(&z.to_le_bytes());
    }
    out.truncate(len);
    out
}

fn param_u64(action: &ValidationAction, key: &str, default: u64) -> u64 {
    action.params.get(key).and_then(|v| v.as_u64()).unwrap_or(default)
}

fn param_str<'a>(action: &'a ValidationAction, key: &str) -> Option<&'a str> {
    action.params.get(key).and_then(|v| v.as_str())
}

/// Source for the direct library API harness (chunked push parsing).
pub const EXPAT_HARNESS_SOURCE: &str = r#"/* Chunked push-parse harness: feeds the input file through
 * XML_GetBuffer/XML_ParseBuffer and a second pass of chunked XML_Parse. */
#include <expat.h>
#include <stdio.h>
#include <stdlib.h>

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    FILE *f = fopen(argv[1], "rb");
    if (!f) return 2;
    XML_Parser p = XML_ParserCreate(NULL);
    int status = 0;
    for (;;) {
        void *buf = XML_GetBuffer(p, 4096);
        if (!buf) { status = 1; break; }
        size_t n = fread(buf, 1, 4096, f);
        if (XML_ParseBuffer(p, (int)n, n == 0) == XML_STATUS_ERROR) {
            fprintf(stderr, "parse error: %s at line %lu\n",
                    XML_ErrorString(XML_GetErrorCode(p)),
                    XML_GetCurrentLineNumber(p));
            status = 1;
            break;
        }
        if (n == 0) break;
    }
    XML_ParserFree(p);
    rewind(f);
    p = XML_ParserCreate(NULL);
    char chunk[7];
    size_t n;
    while ((n = fread(chunk, 1, sizeof chunk, f)) > 0) {
        if (XML_Parse(p, chunk, (int)n, 0) == XML_STATUS_ERROR) { status = 1; break; }
    }
    XML_Parse(p, chunk, 0, 1);
    XML_ParserFree(p);
    fclose(f);
    printf("harness status %d\n", status);
    return status;
}
"#;

fn xml_family(action: &ValidationAction, cfg: &ValidateConfig) -> Vec<(String, Vec<u8>)> {
    let depth = param_u64(action, "depth", 256) as usize;
    let length = (param_u64(action, "length", 65536) as usize).min(cfg.probe_size_cap / 2);
    let deep = {
        let mut s = String::new();
        for _ in 0..depth {
            s.push_str("<a>");
        }
        for _ in 0..depth {
            s.push_str("</a>");
        }
        ("deep.xml".to_string(), s.into_bytes())
    };
    let giant_attr = (
        "giant_attr.xml".to_string(),
        format!("<a b=\"{}\"/>", "x".repeat(length)).into_bytes(),
    );
    let truncated_entity = ("truncated_entity.xml".to_string(), b"<a>&am".to_vec());
    let undeclared_prefix = ("undeclared_prefix.xml".to_string(), b"<ns:a></ns:a>".to_vec());
    match param_str(action, "family") {
        Some("deep") => vec![deep],
        Some("giant_attr") => vec![giant_attr],
        Some("truncated_entity") => vec![truncated_entity],
        Some("undeclared_prefix") => vec![undeclared_prefix],
        _ => vec![deep, giant_attr, truncated_entity, undeclared_prefix],
    }
}

/// Render concrete probe inputs for one validated action. Pure in
/// (action, seed, config).
pub fn render_action(
    action: &ValidationAction,
    seed: u64,
    cfg: &ValidateConfig,
) -> Result<Vec<ProbeInput>, ValidateError> {
    let mut probes = Vec::new();
    let pid = |suffix: &str| format!("{}-{}", action_slug(action.action_type), suffix);
    match action.action_type {
        ActionType::NoLocalHarness => {}
        ActionType::TcpdumpFilterFile => {
            let logical = param_u64(action, "size", SPARSE_FILTER_SIZE);
            probes.push(ProbeInput {
                probe_id: pid("sparse"),
                action: action.clone(),
                files: vec![
                    ("filter.txt".into(), ProbeFile::Sparse { logical_size: logical, head: b"ip".to_vec() }),
                    ("empty.pcap".into(), ProbeFile::Dense(pcap::empty_pcap())),
                ],
                argv_template: vec!["-F".into(), "{filter.txt}".into(), "-r".into(), "{empty.pcap}".into()],
                stdin: None,
                marker: None,
            });
            let mut dense = b"ip".to_vec();
            dense.resize(64 * 1024, b' ');
            probes.push(ProbeInput {
                probe_id: pid("dense"),
                action: action.clone(),
                files: vec![
                    ("filter.txt".into(), ProbeFile::Dense(dense)),
                    ("empty.pcap".into(), ProbeFile::Dense(pcap::empty_pcap())),
                ],
                argv_template: vec!["-F".into(), "{filter.txt}".into(), "-r".into(), "{empty.pcap}".into()],
                stdin: None,
                marker: None,
            });
        }
        ActionType::TcpdumpPcap => {
            let linktype = param_u64(action, "linktype", 1) as u32;
            let dst_port = param_u64(action, "dst_port", 3784) as u16;
            let payload = match param_str(action, "payload_hex") {
                Some(h) => hex::decode(h).unwrap_or_else(|_| seeded_bytes(seed, 64)),
                None => seeded_bytes(seed, 64),
            };
            let mismatch = action
                .params
                .get("caplen_mismatch")
                .and_then(|v| v.as_bool())
                .unwrap_or(false);
            let pkt = pcap::udp_packet(dst_port, &payload);
            let file = pcap::write_pcap(linktype, &[&pkt], mismatch);
            probes.push(ProbeInput {
                probe_id: pid("udp"),
                action: action.clone(),
                files: vec![("probe.pcap".into(), ProbeFile::Dense(file))],
                argv_template: vec!["-nn".into(), "-v".into(), "-r".into(), "{probe.pcap}".into()],
                stdin: None,
                marker: None,
            });
        }
        ActionType::ExpatXmlwf => {
            for (name, data) in xml_family(action, cfg) {
                let suffix = name.trim_end_matches(".xml").to_string();
                probes.push(ProbeInput {
                    probe_id: pid(&suffix),
                    action: action.clone(),
                    files: vec![(name.clone(), ProbeFile::Dense(data))],
                    argv_template: vec![format!("{{{name}}}")],
                    stdin: None,
                    marker: None,
                });
            }
        }
        ActionType::ExpatCHarness => {
            let marker = if cfg.cc.is_none() { Some("harness_unavailable".to_string()) } else { None };
            probes.push(ProbeInput {
                probe_id: pid("api"),
                action: action.clone(),
                files: vec![
                    ("harness.c".into(), ProbeFile::Dense(EXPAT_HARNESS_SOURCE.as_bytes().to_vec())),
                    ("input.xml".into(), ProbeFile::Dense(b"<a><b/></a>".to_vec())),
                ],
                argv_template: vec!["{input.xml}".into()],
                stdin: None,
                marker,
            });
        }
        ActionType::LibarchiveArchive => {
            let variants: Vec<ArchiveVariant> = match param_str(action, "variant") {
                Some(v) => vec![ArchiveVariant::parse(v)
                    .ok_or_else(|| ValidateError::UnsupportedAction(format!("archive variant {v}")))?],
                None => ArchiveVariant::all().to_vec(),
            };
            for variant in variants {
                let (name, data) = archive::generate(variant);
                probes.push(ProbeInput {
                    probe_id: pid(variant.as_str()),
                    action: action.clone(),
                    files: vec![(name.clone(), ProbeFile::Dense(data))],
                    argv_template: vec!["-t".into(), "-f".into(), format!("{{{name}}}")],
                    stdin: None,
                    marker: None,
                });
            }
        }
        ActionType::GenericMalformedFile => {
            let flips = param_u64(action, "flips", 4) as usize;
            let seed_len = (param_u64(action, "seed_len", 1024) as usize).min(cfg.probe_size_cap);
            let base = seeded_bytes(seed, seed_len);
            for i in 0..flips {
                let mut mutant = base.clone();
                let noise = seeded_bytes(seed ^ (i as u64 + 1), 16);
                let off = u64::from_le_bytes(noise[..8].try_into().unwrap()) as usize % mutant.len().max(1);
                mutant[off] ^= noise[8] | 1;
                probes.push(ProbeInput {
                    probe_id: pid(&format!("flip{i}")),
                    action: action.clone(),
                    files: vec![("input.bin".into(), ProbeFile::Dense(mutant))],
                    argv_template: vec!["{input.bin}".into()],
                    stdin: None,
                    marker: None,
                });
            }
        }
    }
    for p in &probes {
        let dense: usize = p.files.iter().map(|(_, f)| f.dense_len()).sum();
        debug_assert!(dense <= cfg.probe_size_cap, "probe {} exceeds dense cap", p.probe_id);
    }
    Ok(probes)
}

fn action_slug(t: ActionType) -> &'static str {
    match t {
        ActionType::TcpdumpPcap => "tcpdump_pcap",
        ActionType::TcpdumpFilterFile => "tcpdump_filter_file",
        ActionType::ExpatXmlwf => "expat_xmlwf",
        ActionType::ExpatCHarness => "expat_c_harness",
        ActionType::LibarchiveArchive => "libarchive_archive",
        ActionType::GenericMalformedFile => "generic_malformed_file",
        ActionType::NoLocalHarness => "no_local_harness",
    }
}

/// Write probe files into a scratch directory and return the resolved argv.
fn materialize(probe: &ProbeInput, dir: &Path) -> Result<Vec<String>, ValidateError> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, file) in &probe.files {
        let path = dir.join(name);
        match file {
            ProbeFile::Dense(bytes) => fs::write(&path, bytes)?,
            ProbeFile::Sparse { logical_size, head } => {
                let mut f = File::create(&path)?;
                f.write_all(head)?;
                f.set_len(*logical_size)?;
            }
        }
        paths.push((name.clone(), path));
    }
    let argv = probe
        .argv_template
        .iter()
        .map(|a| {
            let mut out = a.clone();
            for (name, path) in &paths {
                out = out.replace(&format!("{{{name}}}"), &path.to_string_lossy());
            }
            out
        })
        .collect();
    Ok(argv)
}

pub struct ProbeLimits {
    pub wall: Duration,
    pub output_cap: usize,
}

impl From<&ValidateConfig> for ProbeLimits {
    fn from(cfg: &ValidateConfig) -> Self {
        ProbeLimits { wall: Duration::from_secs(cfg.wall_limit_secs), output_cap: cfg.output_cap }
    }
}

fn run_one(
    bin: &Path,
    side: Side,
    probe: &ProbeInput,
    limits: &ProbeLimits,
    scratch: &Path,
) -> Result<ProbeOutcome, ValidateError> {
    let dir = scratch.join(match side {
        Side::Old => "old",
        Side::New => "new",
    });
    let argv = materialize(probe, &dir)?;
    let started = Instant::now();
    let mut child = Command::new(bin)
        .args(&argv)
        .current_dir(&dir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| ValidateError::SpawnError(bin.display().to_string(), e.to_string()))?;

    if let Some(stdin_bytes) = &probe.stdin {
        if let Some(mut stdin) = child.stdin.take() {
            let _ = stdin.write_all(stdin_bytes);
        }
    } else {
        drop(child.stdin.take());
    }

    // Drain pipes on threads so a chatty child cannot deadlock on a full pipe.
    let cap = limits.output_cap;
    let mut stdout_pipe = child.stdout.take().expect("piped");
    let mut stderr_pipe = child.stderr.take().expect("piped");
    let out_thread = std::thread::spawn(move || read_capped(&mut stdout_pipe, cap));
    let err_thread = std::thread::spawn(move || read_capped(&mut stderr_pipe, cap));

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= limits.wall {
            timed_out = true;
            let _ = child.kill();
            break child.wait()?;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let duration = started.elapsed().as_secs_f64();
    let stdout = out_thread.join().unwrap_or_default();
    let stderr = err_thread.join().unwrap_or_default();

    let exit_status = if timed_out {
        ExitDisposition::Timeout
    } else {
        #[cfg(unix)]
        {
            use std::os::unix::process::ExitStatusExt;
            match status.code() {
                Some(code) => ExitDisposition::Exited(code),
                None => ExitDisposition::Signaled(status.signal().unwrap_or(-1)),
            }
        }
        #[cfg(not(unix))]
        {
            ExitDisposition::Exited(status.code().unwrap_or(-1))
        }
    };
    Ok(ProbeOutcome {
        side,
        exit_status,
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
        duration_secs: duration,
    })
}

fn read_capped(r: &mut impl Read, cap: usize) -> Vec<u8> {
    let mut out = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match r.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if out.len() < cap {
                    let take = n.min(cap - out.len());
                    out.extend_from_slice(&buf[..take]);
                }
                // keep draining past the cap so the child never blocks
            }
        }
    }
    out
}

/// Run one probe against both sides with identical inputs. Each side gets a
/// private scratch directory that is removed afterwards.
pub fn run_probe(
    old_bin: &Path,
    new_bin: &Path,
    probe: &ProbeInput,
    limits: &ProbeLimits,
    scratch_parent: &Path,
) -> Result<(ProbeOutcome, ProbeOutcome), ValidateError> {
    let scratch = scratch_parent.join(format!("probe-{}", probe.probe_id));
    let result = (|| {
        let old = run_one(old_bin, Side::Old, probe, limits, &scratch)?;
        let new = run_one(new_bin, Side::New, probe, limits, &scratch)?;
        Ok((old, new))
    })();
    let _ = fs::remove_dir_all(&scratch);
    result
}

fn addr_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"0x[0-9a-f]{4,}").unwrap())
}

fn time_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:?\d{2})?").unwrap())
}

fn path_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(/[\w.+-]+)+/([\w.+-]+)").unwrap())
}

/// Rewrite run-dependent tokens (absolute paths, addresses, timestamps) so
/// old/new outputs compare stably. Idempotent.
pub fn normalize_output(text: &str) -> String {
    let s = path_re().replace_all(text, "<RUN>/$2");
    let s = addr_re().replace_all(&s, "<ADDR>");
    let s = time_re().replace_all(&s, "<TIME>");
    s.lines()
        .map(|l| l.trim_end())
        .collect::<Vec<_>>()
        .join("\n")
        .trim_end()
        .to_string()
}

fn normalized_pair(o: &ProbeOutcome) -> String {
    format!("{}\n{}", normalize_output(&o.stdout), normalize_output(&o.stderr))
}

/// Classify the old/new outcome pair.
pub fn detect_differential(old: &ProbeOutcome, new: &ProbeOutcome) -> DifferentialVerdict {
    let old_norm = normalized_pair(old);
    let new_norm = normalized_pair(new);
    let excerpt = |s: &str| s.chars().take(400).collect::<String>();
    let evidence = (excerpt(&old_norm), excerpt(&new_norm));

    let crashed = |o: &ProbeOutcome| matches!(o.exit_status, ExitDisposition::Signaled(_));
    let timed_out = |o: &ProbeOutcome| matches!(o.exit_status, ExitDisposition::Timeout);

    let kind = match (crashed(old), crashed(new)) {
        (true, true) => DifferentialKind::CrashBoth,
        (true, false) => DifferentialKind::CrashOldOnly,
        (false, true) => DifferentialKind::CrashNewOnly,
        (false, false) => {
            if timed_out(old) != timed_out(new) {
                DifferentialKind::TimeoutDiff
            } else if old.exit_status != new.exit_status || old_norm != new_norm {
                DifferentialKind::OutputDiff
            } else {
                DifferentialKind::None
            }
        }
    };
    DifferentialVerdict { kind, evidence }
}

/// Shrink every dense probe file with delta debugging while the predicate
/// keeps holding. The predicate receives a candidate probe and decides
/// whether the differential still reproduces.
pub fn minimize<F>(
    probe: &ProbeInput,
    mut predicate: F,
    cfg: &ValidateConfig,
) -> Result<(ProbeInput, MinimizeStats), ValidateError>
where
    F: FnMut(&ProbeInput) -> bool,
{
    if !predicate(probe) {
        return Err(ValidateError::NotReproducible);
    }
    let mut current = probe.clone();
    let mut total_evals = 1usize;
    let mut minimal = true;
    for i in 0..current.files.len() {
        let ProbeFile::Dense(bytes) = current.files[i].1.clone() else { continue };
        let base = current.clone();
        let (reduced, stats) = ddmin_bytes(
            &bytes,
            |candidate| {
                let mut trial = base.clone();
                trial.files[i].1 = ProbeFile::Dense(candidate.to_vec());
                predicate(&trial)
            },
            cfg.min_chunk,
            cfg.max_evals.saturating_sub(total_evals),
        );
        total_evals += stats.evals;
        minimal &= stats.minimal;
        current.files[i].1 = ProbeFile::Dense(reduced);
    }
    Ok((current, MinimizeStats { evals: total_evals, minimal }))
}
