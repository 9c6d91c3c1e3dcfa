//! Sealed ground-truth scoring: alias matching against ranked candidates, a
//! localization cascade that records where the true function survived or was
//! lost, failure buckets, and aggregate tables.
//!
//! Oracle files never feed the pipeline stages; each carries a canary token
//! and the scorer counts canary occurrences in agent-visible artifacts so any
//! leak is loud.

use crate::agent::AuditReport;
use crate::diff::DiffReport;
use crate::dossier::PackedPrompt;
use crate::rank::RankedCandidate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Token embedded in every oracle annotation file. It must never appear in
/// prompts, transcripts, or reports.
pub const ORACLE_CANARY: &str = "ORACLE-CANARY-f1db0a2e";

pub const TOPK_LEVELS: [usize; 5] = [1, 3, 5, 10, 25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleCategory {
    /// A real patched vulnerability with known culprit functions.
    Security,
    /// Negative control: no security-relevant change is present.
    Control,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleAnnotation {
    pub pair_id: String,
    pub category: OracleCategory,
    /// Known names of the culprit function(s); empty for controls.
    #[serde(default)]
    pub aliases: Vec<String>,
    /// Optional 0-3 answer-quality rubric filled by a human grader.
    #[serde(default)]
    pub rubric: Option<u8>,
    pub canary: String,
    #[serde(default)]
    pub notes: Option<String>,
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("oracle for {0}: security annotation needs at least one alias")]
    MissingAliases(String),
    #[error("oracle for {0}: control annotation must not carry aliases")]
    UnexpectedAliases(String),
    #[error("oracle for {0}: rubric {1} outside 0-3")]
    BadRubric(String, u8),
    #[error("oracle for {0}: canary token missing or altered")]
    BadCanary(String),
}

impl OracleAnnotation {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.canary != ORACLE_CANARY {
            return Err(ScoreError::BadCanary(self.pair_id.clone()));
        }
        match self.category {
            OracleCategory::Security if self.aliases.is_empty() => {
                return Err(ScoreError::MissingAliases(self.pair_id.clone()))
            }
            OracleCategory::Control if !self.aliases.is_empty() => {
                return Err(ScoreError::UnexpectedAliases(self.pair_id.clone()))
            }
            _ => {}
        }
        if let Some(r) = self.rubric {
            if r > 3 {
                return Err(ScoreError::BadRubric(self.pair_id.clone(), r));
            }
        }
        Ok(())
    }
}

/// Canonical form for alias comparison: lowercase, leading underscores
/// dropped, and synthetic "fun_<hex>" ids with their hex part zero-stripped
/// so padded and unpadded spellings agree.
fn normalize_name(s: &str) -> String {
    let s = s.to_lowercase();
    let s = s.trim_start_matches('_');
    if let Some(hex) = s.strip_prefix("fun_") {
        if !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit()) {
            let stripped = hex.trim_start_matches('0');
            let stripped = if stripped.is_empty() { "0" } else { stripped };
            return format!("fun_{stripped}");
        }
    }
    s.to_string()
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

/// Word-boundary containment of `needle` in `haystack` over normalized text.
fn contains_word(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let h = haystack.as_bytes();
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(needle) {
        let at = start + pos;
        let before_ok = at == 0 || !is_word_byte(h[at - 1]);
        let after = at + needle.len();
        let after_ok = after == h.len() || !is_word_byte(h[after]);
        if before_ok && after_ok {
            return true;
        }
        start = at + 1;
    }
    false
}

/// True when an oracle alias and a candidate function id refer to the same
/// function. Exact normalized equality, or the shorter name at a word
/// boundary inside the longer (covers versioned and suffixed symbols).
pub fn alias_match(alias: &str, func_id: &str) -> bool {
    let a = normalize_name(alias);
    let f = normalize_name(func_id);
    if a.is_empty() || f.is_empty() {
        return false;
    }
    a == f || contains_word(&f, &a) || contains_word(&a, &f)
}

/// True when any alias is referenced in free text at a word boundary.
pub fn mentioned_in_text(aliases: &[String], text: &str) -> bool {
    let lower = text.to_lowercase();
    aliases.iter().any(|a| {
        let n = normalize_name(a);
        !n.is_empty() && contains_word(&lower, &n)
    })
}

/// Where in the pipeline the true function survived. Each flag is computed
/// independently so inconsistencies between stages stay visible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrace {
    /// Some changed function matched an oracle alias.
    pub in_diff: bool,
    /// Best (lowest) rank among matching candidates.
    pub best_rank: Option<usize>,
    /// best_rank <= k for each level in TOPK_LEVELS.
    pub topk: BTreeMap<usize, bool>,
    /// A matching candidate's full dossier was packed into the prompt.
    pub in_context: bool,
    /// An alias appears anywhere in the packed prompt document.
    pub in_prompt: bool,
    /// The final audit names or discusses a matching function.
    pub mentioned_in_final: bool,
}

/// Pipeline artifacts the cascade reads. Missing stages score as absent.
pub struct CascadeInputs<'a> {
    pub diff: Option<&'a DiffReport>,
    pub ranked: &'a [RankedCandidate],
    pub packed: Option<&'a PackedPrompt>,
    pub final_audit: Option<&'a AuditReport>,
}

pub fn oracle_cascade(ann: &OracleAnnotation, inp: &CascadeInputs) -> CascadeTrace {
    let mut trace = CascadeTrace::default();
    if ann.aliases.is_empty() {
        for k in TOPK_LEVELS {
            trace.topk.insert(k, false);
        }
        return trace;
    }
    let matches = |func_id: &str| ann.aliases.iter().any(|a| alias_match(a, func_id));

    if let Some(diff) = inp.diff {
        trace.in_diff = diff.changed.iter().any(|cf| matches(cf.func_id()));
    }
    trace.best_rank = inp
        .ranked
        .iter()
        .filter(|rc| matches(&rc.func_id))
        .map(|rc| rc.rank)
        .min();
    for k in TOPK_LEVELS {
        trace.topk.insert(k, trace.best_rank.is_some_and(|r| r <= k));
    }
    if let Some(packed) = inp.packed {
        trace.in_prompt = mentioned_in_text(&ann.aliases, &packed.document);
        // in_context: the matching function survived packing as a full
        // dossier, not just a summary row. Candidate ids are "C<rank>".
        trace.in_context = trace.best_rank.is_some_and(|r| {
            packed.included_candidate_ids.iter().any(|id| id == &format!("C{r}"))
        });
    }
    if let Some(audit) = inp.final_audit {
        let named = audit.named_functions.iter().any(|n| matches(n));
        let discussed = mentioned_in_text(&ann.aliases, &audit.mechanism);
        trace.mentioned_in_final = named || discussed;
    }
    trace
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    LocalizedByAgent,
    RankerOrDiffMiss,
    ContextExportMiss,
    ModelReasoningOrValidationMiss,
    ControlAccepted,
    ControlFailed,
}

impl Bucket {
    pub fn as_str(&self) -> &'static str {
        match self {
            Bucket::LocalizedByAgent => "localized_by_agent",
            Bucket::RankerOrDiffMiss => "ranker_or_diff_miss",
            Bucket::ContextExportMiss => "context_export_miss",
            Bucket::ModelReasoningOrValidationMiss => "model_reasoning_or_validation_miss",
            Bucket::ControlAccepted => "control_accepted",
            Bucket::ControlFailed => "control_failed",
        }
    }
}

/// Total bucket assignment. Controls pass only when the final label is
/// "unknown" and no differential fired; security pairs walk the cascade from
/// the back so the earliest lost stage owns the miss.
pub fn assign_bucket(
    category: OracleCategory,
    trace: &CascadeTrace,
    final_label: &str,
    differential_count: usize,
) -> Bucket {
    match category {
        OracleCategory::Control => {
            if final_label == "unknown" && differential_count == 0 {
                Bucket::ControlAccepted
            } else {
                Bucket::ControlFailed
            }
        }
        OracleCategory::Security => {
            if trace.mentioned_in_final && trace.in_prompt {
                Bucket::LocalizedByAgent
            } else if !trace.in_diff || !trace.in_prompt {
                Bucket::RankerOrDiffMiss
            } else if trace.in_prompt && !trace.in_context {
                Bucket::ContextExportMiss
            } else {
                Bucket::ModelReasoningOrValidationMiss
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pair_id: String,
    pub category: OracleCategory,
    pub trace: CascadeTrace,
    pub bucket: Bucket,
    pub final_label: String,
    #[serde(default)]
    pub rubric: Option<u8>,
    pub differential_count: usize,
    /// Canary occurrences found in agent-visible artifacts; must be zero.
    pub canary_hits: usize,
}

/// Count canary occurrences across agent-visible texts.
pub fn canary_hits<'a>(texts: impl IntoIterator<Item = &'a str>) -> usize {
    texts.into_iter().map(|t| t.matches(ORACLE_CANARY).count()).sum()
}

/// Hit counts at each top-k level over the security records of a run.
pub fn topk_counts(records: &[ScoreRecord]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for k in TOPK_LEVELS {
        let n = records
            .iter()
            .filter(|r| r.category == OracleCategory::Security)
            .filter(|r| *r.trace.topk.get(&k).unwrap_or(&false))
            .count();
        out.insert(k, n);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub name: String,
    pub security_pairs: usize,
    pub control_pairs: usize,
    pub topk: BTreeMap<usize, usize>,
    pub buckets: BTreeMap<String, usize>,
    pub localized: usize,
    pub controls_accepted: usize,
    #[serde(default)]
    pub mean_rubric: Option<f64>,
    pub canary_hits: usize,
}

pub fn aggregate(name: &str, records: &[ScoreRecord]) -> AggregateRow {
    let mut buckets: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *buckets.entry(r.bucket.as_str().to_string()).or_insert(0) += 1;
    }
    let rubrics: Vec<f64> = records.iter().filter_map(|r| r.rubric.map(f64::from)).collect();
    AggregateRow {
        name: name.to_string(),
        security_pairs: records.iter().filter(|r| r.category == OracleCategory::Security).count(),
        control_pairs: records.iter().filter(|r| r.category == OracleCategory::Control).count(),
        topk: topk_counts(records),
        localized: records.iter().filter(|r| r.bucket == Bucket::LocalizedByAgent).count(),
        controls_accepted: records.iter().filter(|r| r.bucket == Bucket::ControlAccepted).count(),
        mean_rubric: if rubrics.is_empty() {
            None
        } else {
            Some(rubrics.iter().sum::<f64>() / rubrics.len() as f64)
        },
        canary_hits: records.iter().map(|r| r.canary_hits).sum(),
        buckets,
    }
}

/// Markdown table over one or more aggregate rows (e.g. the weighted run and
/// its raw-order baseline).
pub fn report_markdown(rows: &[AggregateRow]) -> String {
    let mut out = String::from("# Run scorecard\n\n");
    out.push_str("| run | security | controls | top-1 | top-3 | top-5 | top-10 | top-25 | localized | controls ok | canary |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for row in rows {
        let k = |n: usize| row.topk.get(&n).copied().unwrap_or(0);
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            row.name,
            row.security_pairs,
            row.control_pairs,
            k(1),
            k(3),
            k(5),
            k(10),
            k(25),
            row.localized,
            row.controls_accepted,
            row.canary_hits,
        ));
    }
    out.push_str("\n## Failure buckets\n\n");
    for row in rows {
        out.push_str(&format!("### {}\n", row.name));
        for (bucket, n) in &row.buckets {
            out.push_str(&format!("- {bucket}: {n}\n"));
        }
        if let Some(m) = row.mean_rubric {
            out.push_str(&format!("- mean rubric: {m:.2}\n"));
        }
        out.push('\n');
    }
    out
}
