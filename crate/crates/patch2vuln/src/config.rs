//! Run configuration: budgets, weights, limits, and backend selection.
//!
//! Every knob the pipeline consults lives here so a run's behavior is a pure
//! function of (inputs, config). The config digest participates in stage cache
//! keys, so editing any field invalidates downstream stages.

use crate::digest::sha256_hex;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io;
use std::path::Path;

/// Sentinel constants scanned for in function bytes and snippet deltas.
/// INT_MAX, UINT32_MAX, INT64_MAX, UINT16_MAX, and 0x10000.
pub const SENTINEL_CONSTANTS: [u64; 5] = [0x7fff_ffff, 0xffff_ffff, 0x7fff_ffff_ffff_ffff, 0xffff, 0x1_0000];

/// Error-string fragments that count toward the `new_error_strings` feature.
pub const ERROR_STRING_MARKERS: [&str; 4] = ["too large", "short read", "invalid", "truncated"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RankWeights {
    pub cmp_sentinel: f64,
    pub len_check_before_alloc: f64,
    pub changed_alloc_size: f64,
    pub changed_copy_read_args: f64,
    pub parser_boundary_check: f64,
    pub captured_vs_declared_len: f64,
    pub new_error_strings: f64,
    /// Per-feature count cap applied before weighting.
    pub feature_cap: u32,
    pub penalty_dispatcher: f64,
    pub penalty_low_confidence: f64,
}

impl Default for RankWeights {
    fn default() -> Self {
        RankWeights {
            cmp_sentinel: 0.30,
            len_check_before_alloc: 0.25,
            changed_alloc_size: 0.20,
            changed_copy_read_args: 0.25,
            parser_boundary_check: 0.20,
            captured_vs_declared_len: 0.20,
            new_error_strings: 0.15,
            feature_cap: 3,
            penalty_dispatcher: 0.50,
            penalty_low_confidence: 0.40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InspectConfig {
    /// Max bytes of a function body retained in its byte window.
    pub window_cap: usize,
    /// Minimum printable-run length for string extraction.
    pub string_min_len: usize,
    /// Pseudo-region stride for stripped binaries.
    pub stripped_stride: u64,
}

impl Default for InspectConfig {
    fn default() -> Self {
        InspectConfig { window_cap: 4096, string_min_len: 4, stripped_stride: 1024 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DiffConfig {
    /// Regions larger than this are flagged as dispatchers and penalized.
    pub dispatcher_threshold: u64,
}

impl Default for DiffConfig {
    fn default() -> Self {
        DiffConfig { dispatcher_threshold: 16384 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DossierConfig {
    /// Hard byte budget for one packed stage prompt.
    pub prompt_budget: usize,
    /// Serialized-size ceiling for a single candidate dossier.
    pub per_candidate_budget: usize,
    /// Snippet truncation threshold, bytes.
    pub snippet_cap: usize,
    /// Max nearby strings carried per dossier.
    pub strings_cap: usize,
    /// Candidates entering packing, counted from rank 1.
    pub candidate_cutoff: usize,
}

impl Default for DossierConfig {
    fn default() -> Self {
        DossierConfig {
            prompt_budget: 96 * 1024,
            per_candidate_budget: 6 * 1024,
            snippet_cap: 4 * 1024,
            strings_cap: 20,
            candidate_cutoff: 25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Replay,
    Stub,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AgentConfig {
    pub backend: BackendKind,
    /// Live backend endpoint (OpenAI-style chat completions URL).
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub effort: Option<String>,
    pub api_key_env: Option<String>,
    /// Max actions accepted in one validation plan.
    pub max_actions: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            backend: BackendKind::Stub,
            endpoint: None,
            model: None,
            effort: None,
            api_key_env: None,
            max_actions: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ValidateConfig {
    /// Per-side wall-clock limit, seconds.
    pub wall_limit_secs: u64,
    /// Per-stream captured output cap, bytes.
    pub output_cap: usize,
    /// Dense bytes allowed per probe (sparse logical sizes may exceed this).
    pub probe_size_cap: usize,
    /// Minimizer chunk floor, bytes.
    pub min_chunk: usize,
    /// Minimizer predicate-evaluation budget.
    pub max_evals: usize,
    /// Deterministic seed for probe generation.
    pub seed: u64,
    /// C compiler for the library API harness action; None disables it.
    pub cc: Option<String>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            wall_limit_secs: 10,
            output_cap: 1024 * 1024,
            probe_size_cap: 8 * 1024 * 1024,
            min_chunk: 16,
            max_evals: 256,
            seed: 0,
            cc: None,
        }
    }
}

/// Top-level run configuration, read from a JSON file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub weights: RankWeights,
    pub inspect: InspectConfig,
    pub diff: DiffConfig,
    pub dossier: DossierConfig,
    pub agent: AgentConfig,
    pub validate: ValidateConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> io::Result<Self> {
        let data = fs::read(path)?;
        serde_json::from_slice(&data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// Digest over the canonical JSON form; cache key component.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
