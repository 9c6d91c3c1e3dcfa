//! Candidate dossiers and structure-aware prompt packing.
//!
//! Packing is prefix-only over the ranked dossier list: whole dossiers are
//! appended in rank order while the serialized document stays within the byte
//! budget, and the omitted count is recorded in the document itself. Nothing
//! is ever cut mid-object.

use crate::config::DossierConfig;
use crate::diff::{CallContext, MatchKind};
use crate::elf::{ElfMetadata, FunctionRegion};
use crate::rank::{FeatureVector, RankedCandidate};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const TRUNCATION_MARKER: &str = "[truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Preliminary,
    Plan,
    Final,
}

impl PromptStage {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptStage::Preliminary => "preliminary",
            PromptStage::Plan => "plan",
            PromptStage::Final => "final",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffMeta {
    pub match_kind: MatchKind,
    pub confidence: f64,
    pub size_delta: i64,
    pub base_signal: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateDossier {
    /// "C" + rank; unique within a pair.
    pub candidate_id: String,
    pub binary_path: String,
    pub func_id: String,
    pub rank: usize,
    pub score: f64,
    pub features: FeatureVector,
    pub diff_meta: DiffMeta,
    pub nearby_strings: Vec<String>,
    pub imports_referenced: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub old_snippet: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub new_snippet: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub call_context: Option<CallContext>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackedPrompt {
    pub stage: PromptStage,
    /// Serialized JSON document handed to the agent backend.
    pub document: String,
    pub included_candidate_ids: Vec<String>,
    pub omitted_count: usize,
    pub budget: usize,
}

#[derive(Debug, Error)]
pub enum DossierError {
    #[error("candidate {0} resolves to no region or imported record")]
    UnresolvedCandidate(String),
    #[error("prompt scaffold alone exceeds budget ({scaffold} > {budget} bytes)")]
    BudgetTooSmall { scaffold: usize, budget: usize },
}

fn serialized_len(d: &CandidateDossier) -> usize {
    serde_json::to_string(d).expect("dossier serializes").len()
}

fn truncate_snippet(s: &str, cap: usize) -> String {
    if s.len() <= cap {
        return s.to_string();
    }
    let mut cut = cap.saturating_sub(TRUNCATION_MARKER.len());
    while cut > 0 && !s.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}{}", &s[..cut], TRUNCATION_MARKER)
}

/// Assemble the evidence bundle for one ranked candidate, trimmed to the
/// per-candidate budget. Trim order: call_context, old snippet tail, new
/// snippet tail, nearby strings tail. Features and diff metadata survive.
pub fn build_dossier(
    rc: &RankedCandidate,
    meta: &ElfMetadata,
    regions: &[FunctionRegion],
    cfg: &DossierConfig,
) -> Result<CandidateDossier, DossierError> {
    let region = regions.iter().find(|r| r.func_id == rc.func_id);
    let has_import_evidence = rc.changed.old_snippet.is_some()
        || rc.changed.new_snippet.is_some()
        || rc.changed.call_context.is_some();
    if region.is_none() && !has_import_evidence {
        return Err(DossierError::UnresolvedCandidate(rc.func_id.clone()));
    }

    let mut nearby: Vec<String> = region
        .map(|r| r.referenced_strings.clone())
        .unwrap_or_default();
    for s in &rc.changed.added_strings {
        if !nearby.contains(s) {
            nearby.push(s.clone());
        }
    }
    nearby.truncate(cfg.strings_cap);

    let snippet_text = format!(
        "{}\n{}",
        rc.changed.old_snippet.as_deref().unwrap_or(""),
        rc.changed.new_snippet.as_deref().unwrap_or("")
    );
    let call_args = rc.changed.changed_call_args.clone().unwrap_or_default();
    let imports_referenced: Vec<String> = meta
        .dynamic_imports
        .iter()
        .filter(|imp| snippet_text.contains(imp.as_str()) || call_args.iter().any(|a| a.contains(imp.as_str())))
        .cloned()
        .collect();

    let mut d = CandidateDossier {
        candidate_id: format!("C{}", rc.rank),
        binary_path: meta.path.clone(),
        func_id: rc.func_id.clone(),
        rank: rc.rank,
        score: rc.score,
        features: rc.features.clone(),
        diff_meta: DiffMeta {
            match_kind: rc.changed.matched.match_kind,
            confidence: rc.changed.matched.confidence,
            size_delta: rc.changed.size_delta,
            base_signal: rc.changed.base_signal,
        },
        nearby_strings: nearby,
        imports_referenced,
        old_snippet: rc.changed.old_snippet.as_deref().map(|s| truncate_snippet(s, cfg.snippet_cap)),
        new_snippet: rc.changed.new_snippet.as_deref().map(|s| truncate_snippet(s, cfg.snippet_cap)),
        call_context: rc.changed.call_context.clone(),
    };

    // Fixed-priority trims until the serialized dossier fits.
    if serialized_len(&d) > cfg.per_candidate_budget {
        d.call_context = None;
    }
    let shrink = |snippet: &mut Option<String>, target: &CandidateDossier| {
        let _ = target;
        if let Some(s) = snippet.take() {
            if s.len() > 64 {
                *snippet = Some(truncate_snippet(&s, s.len() / 2));
            }
        }
    };
    while serialized_len(&d) > cfg.per_candidate_budget && d.old_snippet.is_some() {
        let snap = d.clone();
        shrink(&mut d.old_snippet, &snap);
    }
    while serialized_len(&d) > cfg.per_candidate_budget && d.new_snippet.is_some() {
        let snap = d.clone();
        shrink(&mut d.new_snippet, &snap);
    }
    while serialized_len(&d) > cfg.per_candidate_budget && !d.nearby_strings.is_empty() {
        d.nearby_strings.pop();
    }
    Ok(d)
}

/// Pack whole dossiers in rank order into the stage scaffold under a hard
/// byte budget. The scaffold must be a JSON object; dossiers land in its
/// "candidate_dossiers" array and the omission count in "omitted_count".
pub fn pack_prompt(
    stage: PromptStage,
    dossiers: &[CandidateDossier],
    scaffold: &Value,
    budget: usize,
) -> Result<PackedPrompt, DossierError> {
    let total = dossiers.len();
    let mut doc = scaffold.clone();
    let obj = doc.as_object_mut().expect("scaffold is a JSON object");
    obj.insert("candidate_dossiers".into(), json!([]));
    // Worst-case digit width reserved up front so the final count never
    // pushes the document over budget.
    obj.insert("omitted_count".into(), json!(total));
    let base_len = serde_json::to_string(&doc).expect("doc serializes").len();
    if base_len > budget {
        return Err(DossierError::BudgetTooSmall { scaffold: base_len, budget });
    }

    let mut included = Vec::new();
    for d in dossiers {
        let arr = doc["candidate_dossiers"].as_array_mut().unwrap();
        arr.push(serde_json::to_value(d).expect("dossier to value"));
        let len = serde_json::to_string(&doc).expect("doc serializes").len();
        if len > budget {
            doc["candidate_dossiers"].as_array_mut().unwrap().pop();
            break;
        }
        included.push(d.candidate_id.clone());
    }
    let omitted = total - included.len();
    doc["omitted_count"] = json!(omitted);
    let document = serde_json::to_string(&doc).expect("doc serializes");
    debug_assert!(document.len() <= budget);
    Ok(PackedPrompt {
        stage,
        document,
        included_candidate_ids: included,
        omitted_count: omitted,
        budget,
    })
}
