//! Function-level change lists for an old/new ELF pair: a lightweight
//! built-in differ plus an importer for external headless-differ JSON.

use crate::config::DiffConfig;
use crate::elf::{ElfMetadata, FunctionRegion};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Name,
    Hash,
    UnmatchedAdded,
    UnmatchedDeleted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionMatch {
    pub old_id: Option<String>,
    pub new_id: Option<String>,
    pub match_kind: MatchKind,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CallContext {
    #[serde(default)]
    pub callers: Vec<String>,
    #[serde(default)]
    pub callees: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangedFunction {
    #[serde(rename = "match")]
    pub matched: FunctionMatch,
    pub base_signal: f64,
    pub size_delta: i64,
    pub added_strings: Vec<String>,
    pub removed_strings: Vec<String>,
    pub added_constants: Vec<u64>,
    pub removed_constants: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub old_snippet: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub new_snippet: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub changed_call_args: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub call_context: Option<CallContext>,
    /// Unclamped score as found in an external diff record.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_score: Option<f64>,
    pub is_dispatcher: bool,
    /// New-side vaddr when known; used for rank tie-breaking.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub new_vaddr: Option<u64>,
}

impl ChangedFunction {
    /// Preferred identifier: new side, falling back to old.
    pub fn func_id(&self) -> &str {
        self.matched
            .new_id
            .as_deref()
            .or(self.matched.old_id.as_deref())
            .unwrap_or("?")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffSource {
    Builtin,
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffReport {
    pub pair_id: String,
    pub target_path: String,
    pub source: DiffSource,
    pub changed: Vec<ChangedFunction>,
    pub total_changed: usize,
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("external diff schema error at {0}")]
    SchemaError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const HASH_CONFIDENCE: f64 = 0.9;
const FALLBACK_CONFIDENCE: f64 = 0.3;

/// Match regions across the pair: equal names first, then equal byte digests,
/// then a greedy nearest-size fallback; leftovers are unmatched.
pub fn match_functions(old: &[FunctionRegion], new: &[FunctionRegion]) -> Vec<FunctionMatch> {
    let mut matches = Vec::new();
    let mut old_used = vec![false; old.len()];
    let mut new_used = vec![false; new.len()];

    // Phase 1: exact non-synthetic name matches.
    let mut new_by_name: HashMap<&str, usize> = HashMap::new();
    for (i, r) in new.iter().enumerate() {
        if !r.synthetic {
            new_by_name.entry(r.func_id.as_str()).or_insert(i);
        }
    }
    for (i, r) in old.iter().enumerate() {
        if r.synthetic {
            continue;
        }
        if let Some(&j) = new_by_name.get(r.func_id.as_str()) {
            if !new_used[j] {
                old_used[i] = true;
                new_used[j] = true;
                matches.push(FunctionMatch {
                    old_id: Some(r.func_id.clone()),
                    new_id: Some(new[j].func_id.clone()),
                    match_kind: MatchKind::Name,
                    confidence: 1.0,
                });
            }
        }
    }

    // Phase 2: identical bytes.
    let mut new_by_digest: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, r) in new.iter().enumerate() {
        if !new_used[j] {
            new_by_digest.entry(r.bytes_digest.as_str()).or_default().push(j);
        }
    }
    for (i, r) in old.iter().enumerate() {
        if old_used[i] {
            continue;
        }
        if let Some(js) = new_by_digest.get_mut(r.bytes_digest.as_str()) {
            if let Some(pos) = js.iter().position(|&j| !new_used[j]) {
                let j = js.remove(pos);
                old_used[i] = true;
                new_used[j] = true;
                matches.push(FunctionMatch {
                    old_id: Some(r.func_id.clone()),
                    new_id: Some(new[j].func_id.clone()),
                    match_kind: MatchKind::Hash,
                    confidence: HASH_CONFIDENCE,
                });
            }
        }
    }

    // Phase 3: greedy nearest-size pairing, size ratio >= 0.5.
    let leftovers_old: Vec<usize> = (0..old.len()).filter(|&i| !old_used[i]).collect();
    for i in leftovers_old {
        let mut best: Option<(usize, u64)> = None;
        for (j, r) in new.iter().enumerate() {
            if new_used[j] {
                continue;
            }
            let (a, b) = (old[i].size, r.size);
            let (lo, hi) = (a.min(b), a.max(b));
            if hi == 0 || (lo as f64) / (hi as f64) < 0.5 {
                continue;
            }
            let gap = hi - lo;
            if best.map_or(true, |(_, g)| gap < g) {
                best = Some((j, gap));
            }
        }
        if let Some((j, _)) = best {
            old_used[i] = true;
            new_used[j] = true;
            matches.push(FunctionMatch {
                old_id: Some(old[i].func_id.clone()),
                new_id: Some(new[j].func_id.clone()),
                match_kind: MatchKind::Hash,
                confidence: FALLBACK_CONFIDENCE,
            });
        }
    }

    for (i, r) in old.iter().enumerate() {
        if !old_used[i] {
            matches.push(FunctionMatch {
                old_id: Some(r.func_id.clone()),
                new_id: None,
                match_kind: MatchKind::UnmatchedDeleted,
                confidence: 0.0,
            });
        }
    }
    for (j, r) in new.iter().enumerate() {
        if !new_used[j] {
            matches.push(FunctionMatch {
                old_id: None,
                new_id: Some(r.func_id.clone()),
                match_kind: MatchKind::UnmatchedAdded,
                confidence: 0.0,
            });
        }
    }
    matches
}

/// Normalized byte dissimilarity in [0,1]: one minus the common
/// prefix-plus-suffix fraction of the two windows.
pub fn byte_dissimilarity(a: &[u8], b: &[u8]) -> f64 {
    if a == b {
        return 0.0;
    }
    let max_len = a.len().max(b.len());
    if max_len == 0 {
        return 0.0;
    }
    let min_len = a.len().min(b.len());
    let mut prefix = 0;
    while prefix < min_len && a[prefix] == b[prefix] {
        prefix += 1;
    }
    let mut suffix = 0;
    while suffix < min_len - prefix && a[a.len() - 1 - suffix] == b[b.len() - 1 - suffix] {
        suffix += 1;
    }
    1.0 - (prefix + suffix) as f64 / max_len as f64
}

/// Diff an old/new binary pair into its changed-function list.
pub fn diff_pair(
    pair_id: &str,
    target_path: &str,
    old: (&ElfMetadata, &[FunctionRegion]),
    new: (&ElfMetadata, &[FunctionRegion]),
    cfg: &DiffConfig,
) -> DiffReport {
    let (old_meta, old_regions) = old;
    let (new_meta, new_regions) = new;
    let mut changed = Vec::new();

    if old_meta.digest != new_meta.digest {
        let old_by_id: HashMap<&str, &FunctionRegion> =
            old_regions.iter().map(|r| (r.func_id.as_str(), r)).collect();
        let new_by_id: HashMap<&str, &FunctionRegion> =
            new_regions.iter().map(|r| (r.func_id.as_str(), r)).collect();
        for m in match_functions(old_regions, new_regions) {
            let old_r = m.old_id.as_deref().and_then(|id| old_by_id.get(id)).copied();
            let new_r = m.new_id.as_deref().and_then(|id| new_by_id.get(id)).copied();
            if let (Some(o), Some(n)) = (old_r, new_r) {
                if o.bytes_digest == n.bytes_digest {
                    continue;
                }
            }
            let empty: &[u8] = &[];
            let old_window = old_r.map(|r| r.byte_window.as_slice()).unwrap_or(empty);
            let new_window = new_r.map(|r| r.byte_window.as_slice()).unwrap_or(empty);
            let base_signal = if old_r.is_none() || new_r.is_none() {
                1.0
            } else {
                byte_dissimilarity(old_window, new_window)
            };
            let old_strings: BTreeSet<&String> =
                old_r.map(|r| r.referenced_strings.iter().collect()).unwrap_or_default();
            let new_strings: BTreeSet<&String> =
                new_r.map(|r| r.referenced_strings.iter().collect()).unwrap_or_default();
            let old_consts: BTreeSet<u64> =
                old_r.map(|r| r.scanned_constants.iter().copied().collect()).unwrap_or_default();
            let new_consts: BTreeSet<u64> =
                new_r.map(|r| r.scanned_constants.iter().copied().collect()).unwrap_or_default();
            let size = new_r.or(old_r).map(|r| r.size).unwrap_or(0);
            changed.push(ChangedFunction {
                matched: m,
                base_signal,
                size_delta: new_r.map(|r| r.size as i64).unwrap_or(0)
                    - old_r.map(|r| r.size as i64).unwrap_or(0),
                added_strings: new_strings.difference(&old_strings).map(|s| (*s).clone()).collect(),
                removed_strings: old_strings.difference(&new_strings).map(|s| (*s).clone()).collect(),
                added_constants: new_consts.difference(&old_consts).copied().collect(),
                removed_constants: old_consts.difference(&new_consts).copied().collect(),
                old_snippet: None,
                new_snippet: None,
                changed_call_args: None,
                call_context: None,
                raw_score: None,
                is_dispatcher: size > cfg.dispatcher_threshold,
                new_vaddr: new_r.map(|r| r.vaddr),
            });
        }
    }

    DiffReport {
        pair_id: pair_id.to_string(),
        target_path: target_path.to_string(),
        source: DiffSource::Builtin,
        total_changed: changed.len(),
        changed,
    }
}

// External-diff JSON schema, version 1. See docs/external-diff.md.
#[derive(Debug, Deserialize)]
struct ExternalDiffFile {
    schema_version: u32,
    #[serde(default)]
    old_binary: Option<String>,
    new_binary: Option<String>,
    functions: Vec<ExternalRecord>,
}

#[derive(Debug, Deserialize)]
struct ExternalRecord {
    #[serde(default)]
    old_name: Option<String>,
    #[serde(default)]
    new_name: Option<String>,
    #[serde(default)]
    old_addr: Option<u64>,
    #[serde(default)]
    new_addr: Option<u64>,
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default)]
    old_code: Option<String>,
    #[serde(default)]
    new_code: Option<String>,
    #[serde(default)]
    callers: Option<Vec<String>>,
    #[serde(default)]
    callees: Option<Vec<String>>,
    #[serde(default)]
    changed_call_args: Option<Vec<String>>,
}

/// Import an external headless-differ export into the common DiffReport shape.
pub fn import_external_diff(path: &Path, pair_id: &str, cfg: &DiffConfig) -> Result<DiffReport, DiffError> {
    let data = std::fs::read(path)?;
    import_external_diff_bytes(&data, pair_id, cfg)
}

pub fn import_external_diff_bytes(
    data: &[u8],
    pair_id: &str,
    cfg: &DiffConfig,
) -> Result<DiffReport, DiffError> {
    let file: ExternalDiffFile = serde_json::from_slice(data)
        .map_err(|e| DiffError::SchemaError(format!("$: {e}")))?;
    if file.schema_version != 1 {
        return Err(DiffError::SchemaError(format!(
            "$.schema_version: unsupported version {}",
            file.schema_version
        )));
    }
    let _ = cfg;
    let mut changed = Vec::new();
    for (i, rec) in file.functions.iter().enumerate() {
        let old_id = rec
            .old_name
            .clone()
            .or(rec.old_addr.map(crate::elf::synthetic_func_id));
        let new_id = rec
            .new_name
            .clone()
            .or(rec.new_addr.map(crate::elf::synthetic_func_id));
        let match_kind = match (&old_id, &new_id) {
            (Some(_), Some(_)) => {
                if rec.old_name.is_some() && rec.old_name == rec.new_name {
                    MatchKind::Name
                } else {
                    MatchKind::Hash
                }
            }
            (Some(_), None) => MatchKind::UnmatchedDeleted,
            (None, Some(_)) => MatchKind::UnmatchedAdded,
            (None, None) => {
                return Err(DiffError::SchemaError(format!(
                    "$.functions[{i}]: record has neither old nor new identity"
                )))
            }
        };
        let raw_score = rec.score;
        let base_signal = raw_score.unwrap_or(0.5).clamp(0.0, 1.0);
        let confidence = rec.confidence.unwrap_or(0.5).clamp(0.0, 1.0);
        let call_context = if rec.callers.is_some() || rec.callees.is_some() {
            Some(CallContext {
                callers: rec.callers.clone().unwrap_or_default(),
                callees: rec.callees.clone().unwrap_or_default(),
            })
        } else {
            None
        };
        changed.push(ChangedFunction {
            matched: FunctionMatch { old_id, new_id, match_kind, confidence },
            base_signal,
            size_delta: 0,
            added_strings: Vec::new(),
            removed_strings: Vec::new(),
            added_constants: Vec::new(),
            removed_constants: Vec::new(),
            old_snippet: rec.old_code.clone(),
            new_snippet: rec.new_code.clone(),
            changed_call_args: rec.changed_call_args.clone(),
            call_context,
            raw_score,
            is_dispatcher: false,
            new_vaddr: rec.new_addr,
        });
    }
    Ok(DiffReport {
        pair_id: pair_id.to_string(),
        target_path: file.new_binary.or(file.old_binary).unwrap_or_default(),
        source: DiffSource::External,
        total_changed: changed.len(),
        changed,
    })
}

#[cfg(test)]
pub mod tests_support {
    use super::*;

    /// Minimal changed-function record for tests in other modules.
    pub fn changed(id: &str) -> ChangedFunction {
        ChangedFunction {
            matched: FunctionMatch {
                old_id: Some(id.to_string()),
                new_id: Some(id.to_string()),
                match_kind: MatchKind::Name,
                confidence: 1.0,
            },
            base_signal: 0.5,
            size_delta: 0,
            added_strings: vec![],
            removed_strings: vec![],
            added_constants: vec![],
            removed_constants: vec![],
            old_snippet: None,
            new_snippet: None,
            changed_call_args: None,
            call_context: None,
            raw_score: None,
            is_dispatcher: false,
            new_vaddr: Some(0x1000),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::sha256_hex;

    fn region(id: &str, vaddr: u64, bytes: &[u8], synthetic: bool) -> FunctionRegion {
        FunctionRegion {
            func_id: id.to_string(),
            vaddr,
            size: bytes.len() as u64,
            bytes_digest: sha256_hex(bytes),
            byte_window: bytes.to_vec(),
            referenced_strings: vec![],
            scanned_constants: vec![],
            synthetic,
        }
    }

    #[test]
    fn name_matches_have_full_confidence() {
        let old = vec![region("f", 0x1000, b"aaaa", false)];
        let new = vec![region("f", 0x2000, b"bbbb", false)];
        let m = match_functions(&old, &new);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].match_kind, MatchKind::Name);
        assert_eq!(m[0].confidence, 1.0);
    }

    #[test]
    fn digest_match_when_stripped() {
        let old = vec![region("f", 0x1000, b"samebytes", false)];
        let new = vec![region("FUN_00002000", 0x2000, b"samebytes", true)];
        let m = match_functions(&old, &new);
        assert_eq!(m[0].match_kind, MatchKind::Hash);
        assert_eq!(m[0].confidence, 0.9);
    }

    #[test]
    fn synthetic_names_never_name_match() {
        let old = vec![region("FUN_00001000", 0x1000, b"aaaa", true)];
        let new = vec![region("FUN_00001000", 0x1000, b"bbbb", true)];
        let m = match_functions(&old, &new);
        assert!(m.iter().all(|x| x.match_kind != MatchKind::Name));
    }

    #[test]
    fn old_only_symbol_is_unmatched_deleted() {
        let old = vec![region("gone", 0x1000, b"0123456789", false)];
        let m = match_functions(&old, &[]);
        assert_eq!(m[0].match_kind, MatchKind::UnmatchedDeleted);
        assert_eq!(m[0].old_id.as_deref(), Some("gone"));
        assert!(m[0].new_id.is_none());
    }

    #[test]
    fn dissimilarity_bounds() {
        assert_eq!(byte_dissimilarity(b"abc", b"abc"), 0.0);
        assert_eq!(byte_dissimilarity(b"aaaa", b"bbbb"), 1.0);
        let d = byte_dissimilarity(b"aaaaaaaaab", b"aaaaaaaaac");
        assert!(d > 0.0 && d < 1.0);
    }

    #[test]
    fn external_import_maps_score() {
        let json = r#"{
            "schema_version": 1,
            "old_binary": "old/tcpdump", "new_binary": "new/tcpdump",
            "functions": [
                {"old_name": "read_infile", "new_name": "read_infile", "score": 0.8,
                 "old_code": "int a;", "new_code": "long a;"}
            ]
        }"#;
        let report =
            import_external_diff_bytes(json.as_bytes(), "p1", &DiffConfig::default()).unwrap();
        assert_eq!(report.source, DiffSource::External);
        assert_eq!(report.total_changed, 1);
        assert_eq!(report.changed[0].base_signal, 0.8);
        assert_eq!(report.changed[0].matched.confidence, 0.5);
        assert_eq!(report.changed[0].new_snippet.as_deref(), Some("long a;"));
    }

    #[test]
    fn external_import_empty_records() {
        let json = r#"{"schema_version": 1, "new_binary": "x", "functions": []}"#;
        let report =
            import_external_diff_bytes(json.as_bytes(), "p1", &DiffConfig::default()).unwrap();
        assert_eq!(report.total_changed, 0);
    }

    #[test]
    fn external_import_rejects_identityless_record() {
        let json = r#"{"schema_version": 1, "new_binary": "x", "functions": [{"score": 0.1}]}"#;
        let err = import_external_diff_bytes(json.as_bytes(), "p1", &DiffConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("functions[0]"));
    }
}
