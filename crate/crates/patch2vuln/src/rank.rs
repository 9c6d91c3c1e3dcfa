//! Candidate ordering: memory-safety feature extraction over changed
//! functions, weighted scoring with dispatcher/low-confidence penalties, and
//! the deterministic rank assignment.
//!
//! Detector rules are line-oriented textual patterns over decompiler snippets
//! when an external diff supplied them, with a byte-evidence fallback
//! otherwise. The rules are documented in docs/ranker-detectors.md.

use crate::config::{RankWeights, ERROR_STRING_MARKERS, SENTINEL_CONSTANTS};
use crate::diff::{ChangedFunction, DiffReport};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub cmp_sentinel: u32,
    pub len_check_before_alloc: u32,
    pub changed_alloc_size: u32,
    pub changed_copy_read_args: u32,
    pub parser_boundary_check: u32,
    pub captured_vs_declared_len: u32,
    pub new_error_strings: u32,
    pub penalty_dispatcher: bool,
    pub penalty_low_confidence: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedCandidate {
    /// 1-based position after sorting.
    pub rank: usize,
    /// New-side function id when present.
    pub func_id: String,
    pub score: f64,
    pub features: FeatureVector,
    pub changed: ChangedFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// Feature-weighted scoring.
    Weighted,
    /// Base diff signal only; the raw-diff-order baseline.
    RawOrder,
}

const ALLOC_FNS: [&str; 4] = ["malloc", "calloc", "realloc", "alloca"];
const COPY_READ_FNS: [&str; 5] = ["memcpy", "memmove", "read", "fread", "snprintf"];

fn sentinel_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(INT_MAX|SIZE_MAX|UINT_MAX|0x7fffffff|0xffffffff|0x7fffffffffffffff|0xffff|0x10000|2147483647|4294967295|65535|65536)\b",
        )
        .unwrap()
    })
}

fn len_cmp_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(len|length|size|n|count|nbytes|bytes)\w*\s*(<|>|<=|>=|==|!=)|(<|>|<=|>=|==|!=)\s*\w*(len|length|size|count)\b").unwrap()
    })
}

fn cursor_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(p|ptr|cp|cur|cursor|pos|position|offset|off|idx|i)\b").unwrap())
}

fn end_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(end|ep|limit|len|length|size|max|last|bound)\w*\b").unwrap())
}

fn captured_len_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(caplen|snaplen|incl_len|capture_len|snapend)\b").unwrap())
}

fn declared_len_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(orig_len|wirelen|tot_len|total_len|declared\w*|hdr_len|length|len)\b").unwrap())
}

fn relational_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(<|>|<=|>=|==|!=)").unwrap())
}

fn call_re(fns: &[&str]) -> Regex {
    Regex::new(&format!(r"\b({})\s*\(([^)]*)\)", fns.join("|"))).unwrap()
}

/// Calls as (callee, normalized argument text) extracted from a snippet.
fn extract_calls(snippet: &str, fns: &[&str]) -> Vec<(String, String)> {
    let re = call_re(fns);
    re.captures_iter(snippet)
        .map(|c| {
            let args: String = c[2].split_whitespace().collect::<Vec<_>>().join(" ");
            (c[1].to_string(), args)
        })
        .collect()
}

fn changed_call_count(old: &str, new: &str, fns: &[&str]) -> u32 {
    let old_calls = extract_calls(old, fns);
    let new_calls = extract_calls(new, fns);
    let mut old_set: HashMap<(String, String), u32> = HashMap::new();
    for c in old_calls {
        *old_set.entry(c).or_insert(0) += 1;
    }
    let mut count = 0;
    for c in new_calls {
        match old_set.get_mut(&c) {
            Some(n) if *n > 0 => *n -= 1,
            _ => count += 1,
        }
    }
    count
}

/// Lines present in `new` but not in `old`, whitespace-normalized.
fn new_only_lines<'a>(old: &str, new: &'a str) -> Vec<&'a str> {
    let old_lines: BTreeSet<String> =
        old.lines().map(|l| l.split_whitespace().collect::<Vec<_>>().join(" ")).collect();
    new.lines()
        .filter(|l| {
            let norm = l.split_whitespace().collect::<Vec<_>>().join(" ");
            !norm.is_empty() && !old_lines.contains(&norm)
        })
        .collect()
}

fn count_error_strings(added: &[String]) -> u32 {
    added
        .iter()
        .filter(|s| {
            let lower = s.to_lowercase();
            ERROR_STRING_MARKERS.iter().any(|m| lower.contains(m))
        })
        .count() as u32
}

/// Derive the memory-safety feature vector for one changed function.
pub fn extract_features(cf: &ChangedFunction) -> FeatureVector {
    let mut f = FeatureVector {
        penalty_dispatcher: cf.is_dispatcher,
        penalty_low_confidence: cf.matched.confidence < 0.5,
        new_error_strings: count_error_strings(&cf.added_strings),
        ..FeatureVector::default()
    };

    let has_snippets = cf.old_snippet.is_some() || cf.new_snippet.is_some();
    if !has_snippets {
        // Byte-evidence fallback.
        f.cmp_sentinel = cf
            .added_constants
            .iter()
            .filter(|c| SENTINEL_CONSTANTS.contains(c))
            .count() as u32;
        return f;
    }

    let old = cf.old_snippet.as_deref().unwrap_or("");
    let new = cf.new_snippet.as_deref().unwrap_or("");
    let new_lines = new_only_lines(old, new);

    for line in &new_lines {
        f.cmp_sentinel += sentinel_token_re().find_iter(line).count() as u32;
        if relational_re().is_match(line) {
            if cursor_token_re().is_match(line) && end_token_re().is_match(line) {
                f.parser_boundary_check += 1;
            }
            if captured_len_re().is_match(line) && declared_len_re().is_match(line) {
                f.captured_vs_declared_len += 1;
            }
        }
    }

    // Length comparisons textually preceding an allocation call.
    let all_new_lines: Vec<&str> = new.lines().collect();
    let alloc_line_re = call_re(&ALLOC_FNS);
    for new_line in &new_lines {
        if !len_cmp_re().is_match(new_line) {
            continue;
        }
        let idx = all_new_lines.iter().position(|l| l == new_line);
        if let Some(idx) = idx {
            if all_new_lines[idx + 1..].iter().any(|l| alloc_line_re.is_match(l)) {
                f.len_check_before_alloc += 1;
            }
        }
    }

    f.changed_alloc_size = changed_call_count(old, new, &ALLOC_FNS);
    f.changed_copy_read_args = changed_call_count(old, new, &COPY_READ_FNS);
    f
}

/// Weighted candidate score with per-feature caps and penalties.
pub fn score(base_signal: f64, f: &FeatureVector, w: &RankWeights) -> f64 {
    let cap = w.feature_cap;
    let capped = |count: u32| count.min(cap) as f64;
    let mut s = base_signal
        + w.cmp_sentinel * capped(f.cmp_sentinel)
        + w.len_check_before_alloc * capped(f.len_check_before_alloc)
        + w.changed_alloc_size * capped(f.changed_alloc_size)
        + w.changed_copy_read_args * capped(f.changed_copy_read_args)
        + w.parser_boundary_check * capped(f.parser_boundary_check)
        + w.captured_vs_declared_len * capped(f.captured_vs_declared_len)
        + w.new_error_strings * capped(f.new_error_strings);
    if f.penalty_dispatcher {
        s -= w.penalty_dispatcher;
    }
    if f.penalty_low_confidence {
        s -= w.penalty_low_confidence;
    }
    s
}

/// Sort key: score desc, then base_signal desc, then new-side vaddr asc,
/// then func_id lexicographic.
fn compare(a: &(f64, f64, Option<u64>, String), b: &(f64, f64, Option<u64>, String)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
        .then_with(|| match (a.2, b.2) {
            (Some(x), Some(y)) => x.cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        })
        .then_with(|| a.3.cmp(&b.3))
}

/// Order the changed functions of a diff report into ranked candidates.
pub fn rank(report: &DiffReport, w: &RankWeights, mode: RankMode) -> Vec<RankedCandidate> {
    let mut entries: Vec<(f64, f64, Option<u64>, String, FeatureVector, ChangedFunction)> = report
        .changed
        .iter()
        .map(|cf| {
            let features = extract_features(cf);
            let s = match mode {
                RankMode::Weighted => score(cf.base_signal, &features, w),
                RankMode::RawOrder => cf.base_signal,
            };
            (s, cf.base_signal, cf.new_vaddr, cf.func_id().to_string(), features, cf.clone())
        })
        .collect();
    entries.sort_by(|a, b| {
        compare(
            &(a.0, a.1, a.2, a.3.clone()),
            &(b.0, b.1, b.2, b.3.clone()),
        )
    });
    entries
        .into_iter()
        .enumerate()
        .map(|(i, (s, _, _, func_id, features, changed))| RankedCandidate {
            rank: i + 1,
            func_id,
            score: s,
            features,
            changed,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{DiffSource, FunctionMatch, MatchKind};

    fn cf(id: &str, base: f64, vaddr: u64) -> ChangedFunction {
        ChangedFunction {
            matched: FunctionMatch {
                old_id: Some(id.to_string()),
                new_id: Some(id.to_string()),
                match_kind: MatchKind::Name,
                confidence: 1.0,
            },
            base_signal: base,
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
            new_vaddr: Some(vaddr),
        }
    }

    fn report(changed: Vec<ChangedFunction>) -> DiffReport {
        DiffReport {
            pair_id: "p".into(),
            target_path: "t".into(),
            source: DiffSource::Builtin,
            total_changed: changed.len(),
            changed,
        }
    }

    #[test]
    fn sentinel_comparison_detected_in_snippet() {
        let mut c = cf("f", 0.1, 0x1000);
        c.old_snippet = Some("int f(long len) {\n  return do_read(len);\n}".into());
        c.new_snippet =
            Some("int f(long len) {\n  if (len > INT_MAX) return -1;\n  return do_read(len);\n}".into());
        let f = extract_features(&c);
        assert!(f.cmp_sentinel >= 1);
    }

    #[test]
    fn error_string_detected() {
        let mut c = cf("f", 0.1, 0x1000);
        c.added_strings = vec!["file too large".into()];
        assert_eq!(extract_features(&c).new_error_strings, 1);
    }

    #[test]
    fn identical_snippets_give_zero_counts() {
        let mut c = cf("f", 0.1, 0x1000);
        let text = "if (len > INT_MAX) return -1;\nmemcpy(dst, src, n);";
        c.old_snippet = Some(text.into());
        c.new_snippet = Some(text.into());
        let f = extract_features(&c);
        assert_eq!(f.cmp_sentinel, 0);
        assert_eq!(f.changed_copy_read_args, 0);
        assert_eq!(f.parser_boundary_check, 0);
    }

    #[test]
    fn byte_fallback_counts_sentinel_constants() {
        let mut c = cf("f", 0.1, 0x1000);
        c.added_constants = vec![0x7fff_ffff, 42];
        let f = extract_features(&c);
        assert_eq!(f.cmp_sentinel, 1);
    }

    #[test]
    fn changed_copy_args_detected() {
        let mut c = cf("f", 0.1, 0x1000);
        c.old_snippet = Some("memcpy(dst, src, len);".into());
        c.new_snippet = Some("memcpy(dst, src, checked_len);".into());
        assert_eq!(extract_features(&c).changed_copy_read_args, 1);
    }

    #[test]
    fn len_check_before_alloc_detected() {
        let mut c = cf("f", 0.1, 0x1000);
        c.old_snippet = Some("buf = malloc(size);".into());
        c.new_snippet = Some("if (size > 4096) return 0;\nbuf = malloc(size);".into());
        assert!(extract_features(&c).len_check_before_alloc >= 1);
    }

    #[test]
    fn score_identity_with_zero_features() {
        let w = RankWeights::default();
        let f = FeatureVector::default();
        assert_eq!(score(0.4, &f, &w), 0.4);
    }

    #[test]
    fn score_default_sentinel_weight() {
        let w = RankWeights::default();
        let f = FeatureVector { cmp_sentinel: 1, ..FeatureVector::default() };
        let s = score(0.4, &f, &w);
        assert!((s - 0.70).abs() < 1e-12);
    }

    #[test]
    fn score_dispatcher_penalty() {
        let w = RankWeights::default();
        let f = FeatureVector { penalty_dispatcher: true, ..FeatureVector::default() };
        let s = score(0.9, &f, &w);
        assert!((s - 0.40).abs() < 1e-12);
    }

    #[test]
    fn rank_orders_by_score() {
        let r = report(vec![cf("a", 0.4, 0x1000), cf("b", 0.7, 0x2000)]);
        let ranked = rank(&r, &RankWeights::default(), RankMode::Weighted);
        assert_eq!(ranked[0].func_id, "b");
        assert_eq!(ranked[0].rank, 1);
        assert_eq!(ranked[1].rank, 2);
    }

    #[test]
    fn tie_broken_by_lower_vaddr() {
        let r = report(vec![cf("hi", 0.5, 0x3000), cf("lo", 0.5, 0x2000)]);
        let ranked = rank(&r, &RankWeights::default(), RankMode::Weighted);
        assert_eq!(ranked[0].func_id, "lo");
    }
}
