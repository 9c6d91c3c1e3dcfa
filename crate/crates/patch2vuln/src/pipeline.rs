//! Stage driver: runs the pair pipeline end to end over the run store, with
//! digest-keyed resumption and fail-stop semantics. A stage that fails is
//! recorded as failed and everything downstream is skipped.

use crate::agent::{
    self, make_backend, parse_audit, prompt_digest, render_stage_prompt, ActionType, AgentError,
    AuditReport, StageArtifact, StageArtifacts, ValidationAction, ValidationPlan,
};
use crate::config::RunConfig;
use crate::diff::{self, DiffError, DiffReport};
use crate::digest::{combine, sha256_file, sha256_hex};
use crate::dossier::{build_dossier, CandidateDossier, DossierError, PackedPrompt, PromptStage};
use crate::elf::{self, ElfError, ElfMetadata, FunctionRegion};
use crate::extract::{self, ExtractError, ExtractedRoot, PairManifest};
use crate::rank::{self, RankMode, RankedCandidate};
use crate::score::{
    self, assign_bucket, canary_hits, oracle_cascade, CascadeInputs, OracleAnnotation, ScoreError,
    ScoreRecord,
};
use crate::store::{RunStore, StageRecord, StageStatus, StoreError, STAGE_ORDER};
use crate::validate::{
    self, detect_differential, render_action, DifferentialKind, DifferentialVerdict, MinimizeStats,
    ProbeInput, ProbeLimits, ProbeOutcome, ValidateError,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} failed: {message}")]
    StageFailed { stage: String, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Elf(#[from] ElfError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dossier(#[from] DossierError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Runtime knobs not carried in the persisted config.
#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Import this external diff export instead of running the built-in differ.
    pub external_diff: Option<PathBuf>,
    /// Score the raw-diff-order baseline instead of the weighted ranker.
    pub raw_order: bool,
    /// Ground-truth annotations; required by the score stage only.
    pub oracle_dir: Option<PathBuf>,
    /// Recorded transcripts for the replay backend. Defaults to the run's
    /// own transcript directory, so a live run replays in place.
    pub replay_dir: Option<PathBuf>,
}

pub struct Pipeline {
    pub store: RunStore,
    pub config: RunConfig,
    pub run_id: String,
    pub options: PipelineOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub cached: bool,
    pub output_digest: String,
}

// ---- persisted stage artifact shapes ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractOutput {
    pub old: ExtractedRoot,
    pub new: ExtractedRoot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetInspection {
    pub target_path: String,
    pub old_meta: ElfMetadata,
    pub old_regions: Vec<FunctionRegion>,
    pub new_meta: ElfMetadata,
    pub new_regions: Vec<FunctionRegion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InspectOutput {
    pub targets: Vec<TargetInspection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankOutput {
    pub mode: RankMode,
    pub ranked: Vec<RankedCandidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DossierOutput {
    pub dossiers: Vec<CandidateDossier>,
    pub target_meta: Value,
    pub ranked_summary: Vec<Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditStageOutput {
    pub packed: PackedPrompt,
    pub prompt_digest: String,
    pub backend: String,
    pub violations: Vec<String>,
    /// True when no parseable output arrived even after one retry and the
    /// stage fell back to a synthesized artifact.
    pub synthesized: bool,
    pub audit: Option<AuditReport>,
    pub plan: Option<ValidationPlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinimizedProbe {
    pub probe: ProbeInput,
    pub stats: MinimizeStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe_id: String,
    pub action: ValidationAction,
    /// Reason the probe never executed (marker or spawn failure).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub old: Option<ProbeOutcome>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub new: Option<ProbeOutcome>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verdict: Option<DifferentialVerdict>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub minimized: Option<MinimizedProbe>,
}

impl Pipeline {
    pub fn new(store: RunStore, config: RunConfig, run_id: &str, options: PipelineOptions) -> Self {
        Pipeline { store, config, run_id: run_id.to_string(), options }
    }

    fn transcripts_dir(&self) -> PathBuf {
        self.store.root.join(&self.run_id).join("transcripts")
    }

    fn pred_digest(&self, manifest: &crate::store::RunManifest, stage: &str) -> String {
        let parts: Vec<String> = crate::store::predecessors(stage)
            .iter()
            .filter_map(|p| manifest.record(p).map(|r| r.output_digest.clone()))
            .collect();
        let refs: Vec<&str> = parts.iter().map(|s| s.as_str()).collect();
        combine(&refs)
    }

    fn stage_input_digest(
        &self,
        manifest: &crate::store::RunManifest,
        pair: &PairManifest,
        stage: &str,
    ) -> Result<String, PipelineError> {
        let base = match stage {
            "extract" => {
                let pair_json = serde_json::to_string(pair).expect("pair serializes");
                combine(&[
                    &sha256_file(&pair.old_pkg)?,
                    &sha256_file(&pair.new_pkg)?,
                    &sha256_hex(pair_json.as_bytes()),
                ])
            }
            _ => self.pred_digest(manifest, stage),
        };
        let mut parts: Vec<String> = vec![base];
        if stage == "diff" {
            if let Some(path) = &self.options.external_diff {
                parts.push(sha256_file(path)?);
            }
        }
        if stage == "rank" {
            parts.push(format!("raw_order={}", self.options.raw_order));
        }
        if stage == "score" {
            if let Some(dir) = &self.options.oracle_dir {
                let path = dir.join(format!("{}.json", pair.pair_id));
                if path.is_file() {
                    parts.push(sha256_file(&path)?);
                }
            }
        }
        let refs: Vec<&str> = parts.iter().map(|s| s.as_str()).collect();
        Ok(combine(&refs))
    }

    /// Run one stage for a pair, reusing the previous result when its input
    /// and config digests are unchanged.
    pub fn run_stage(&self, pair: &PairManifest, stage: &str) -> Result<StageOutcome, PipelineError> {
        pair.validate()?;
        let mut manifest = self.store.load_manifest(&self.run_id, &pair.pair_id)?;
        self.store.check_predecessors(&manifest, stage)?;
        let input_digest = self.stage_input_digest(&manifest, pair, stage)?;
        let config_digest = self.config.digest();

        if manifest.cache_hit(stage, &input_digest, &config_digest) {
            let record = manifest.record(stage).expect("hit implies record");
            let output_digest = record.output_digest.clone();
            log::info!("{}/{stage}: cache hit, skipping", pair.pair_id);
            let mut record = record.clone();
            record.cached = true;
            manifest.upsert(record);
            self.store.save_manifest(&manifest)?;
            return Ok(StageOutcome { stage: stage.to_string(), cached: true, output_digest });
        }

        let result = self.execute_stage(pair, stage);
        let (status, output_digest, error) = match &result {
            Ok(d) => (StageStatus::Completed, d.clone(), None),
            Err(e) => (StageStatus::Failed, String::new(), Some(e.to_string())),
        };
        manifest.invalidate_from(stage);
        manifest.upsert(StageRecord {
            stage: stage.to_string(),
            status,
            input_digest,
            config_digest,
            output_digest: output_digest.clone(),
            cached: false,
            error,
        });
        self.store.save_manifest(&manifest)?;
        match result {
            Ok(_) => Ok(StageOutcome { stage: stage.to_string(), cached: false, output_digest }),
            Err(e) => Err(PipelineError::StageFailed {
                stage: stage.to_string(),
                message: e.to_string(),
            }),
        }
    }

    /// Run every stage in order. The score stage runs only when an oracle
    /// directory was supplied.
    pub fn run_all(&self, pair: &PairManifest) -> Result<Vec<StageOutcome>, PipelineError> {
        let mut outcomes = Vec::new();
        for stage in STAGE_ORDER {
            if stage == "score" && self.options.oracle_dir.is_none() {
                continue;
            }
            outcomes.push(self.run_stage(pair, stage)?);
        }
        Ok(outcomes)
    }

    fn execute_stage(&self, pair: &PairManifest, stage: &str) -> Result<String, PipelineError> {
        match stage {
            "extract" => self.stage_extract(pair),
            "inspect" => self.stage_inspect(pair),
            "diff" => self.stage_diff(pair),
            "rank" => self.stage_rank(pair),
            "dossier" => self.stage_dossier(pair),
            "audit_preliminary" => self.stage_audit(pair, PromptStage::Preliminary),
            "audit_plan" => self.stage_audit(pair, PromptStage::Plan),
            "validate" => self.stage_validate(pair),
            "audit_final" => self.stage_audit(pair, PromptStage::Final),
            "score" => self.stage_score(pair),
            other => Err(StoreError::UnknownStage(other.to_string()).into()),
        }
    }

    fn write<T: Serialize>(&self, pair: &PairManifest, stage: &str, name: &str, value: &T) -> Result<String, PipelineError> {
        Ok(self.store.write_artifact(&self.run_id, &pair.pair_id, stage, name, value)?)
    }

    fn read<T: serde::de::DeserializeOwned>(&self, pair: &PairManifest, stage: &str, name: &str) -> Result<T, PipelineError> {
        Ok(self.store.read_artifact(&self.run_id, &pair.pair_id, stage, name)?)
    }

    // ---- stage bodies ----

    fn stage_extract(&self, pair: &PairManifest) -> Result<String, PipelineError> {
        let dir = self.store.stage_dir(&self.run_id, &pair.pair_id, "extract");
        let old = extract::extract_deb(&pair.old_pkg, &dir.join("old"))?;
        let new = extract::extract_deb(&pair.new_pkg, &dir.join("new"))?;
        // Targets must resolve on both sides before downstream stages start.
        extract::select_targets(&old, pair)?;
        extract::select_targets(&new, pair)?;
        self.write(pair, "extract", "extract.json", &ExtractOutput { old, new })
    }

    fn stage_inspect(&self, pair: &PairManifest) -> Result<String, PipelineError> {
        let roots: ExtractOutput = self.read(pair, "extract", "extract.json")?;
        let old_targets = extract::select_targets(&roots.old, pair)?;
        let new_targets = extract::select_targets(&roots.new, pair)?;
        let mut targets = Vec::new();
        for ((path, old_bytes), (_, new_bytes)) in old_targets.iter().zip(&new_targets) {
            let old_meta = elf::parse_elf(old_bytes, path)?;
            let new_meta = elf::parse_elf(new_bytes, path)?;
            let old_regions = elf::function_regions(&old_meta, old_bytes, &self.config.inspect);
            let new_regions = elf::function_regions(&new_meta, new_bytes, &self.config.inspect);
            targets.push(TargetInspection {
                target_path: path.clone(),
                old_meta,
                old_regions,
                new_meta,
                new_regions,
            });
        }
        self.write(pair, "inspect", "inspect.json", &InspectOutput { targets })
    }

    fn stage_diff(&self, pair: &PairManifest) -> Result<String, PipelineError> {
        let reports: Vec<DiffReport> = if let Some(path) = &self.options.external_diff {
            vec![diff::import_external_diff(path, &pair.pair_id, &self.config.diff)?]
        } else {
            let inspect: InspectOutput = self.read(pair, "inspect", "inspect.json")?;
            inspect
                .targets
                .iter()
                .map(|t| {
                    diff::diff_pair(
                        &pair.pair_id,
                        &t.target_path,
                        (&t.old_meta, &t.old_regions),
                        (&t.new_meta, &t.new_regions),
                        &self.config.diff,
                    )
                })
                .collect()
        };
        self.write(pair, "diff", "diff.json", &reports)
    }

    fn merged_report(&self, pair: &PairManifest) -> Result<DiffReport, PipelineError> {
        let reports: Vec<DiffReport> = self.read(pair, "diff", "diff.json")?;
        let mut merged = DiffReport {
            pair_id: pair.pair_id.clone(),
            target_path: reports.first().map(|r| r.target_path.clone()).unwrap_or_default(),
            source: reports.first().map(|r| r.source).unwrap_or(diff::DiffSource::Builtin),
            changed: Vec::new(),
            total_changed: 0,
        };
        for r in reports {
            merged.changed.extend(r.changed);
        }
        merged.total_changed = merged.changed.len();
        Ok(merged)
    }

    fn stage_rank(&self, pair: &PairManifest) -> Result<String, PipelineError> {
        let report = self.merged_report(pair)?;
        let mode = if self.options.raw_order { RankMode::RawOrder } else { RankMode::Weighted };
        let ranked = rank::rank(&report, &self.config.weights, mode);
        self.write(pair, "rank", "ranked.json", &RankOutput { mode, ranked })
    }

    fn stage_dossier(&self, pair: &PairManifest) -> Result<String, PipelineError> {
        let inspect: InspectOutput = self.read(pair, "inspect", "inspect.json")?;
        let reports: Vec<DiffReport> = self.read(pair, "diff", "diff.json")?;
        let rank_out: RankOutput = self.read(pair, "rank", "ranked.json")?;

        // Which target a candidate belongs to, by membership in its report.
        let target_of = |func_id: &str| -> usize {
            reports
                .iter()
                .position(|r| r.changed.iter().any(|cf| cf.func_id() == func_id))
                .unwrap_or(0)
        };

        let mut dossiers = Vec::new();
        for rc in rank_out.ranked.iter().take(self.config.dossier.candidate_cutoff) {
            let ti = inspect.targets.get(target_of(&rc.func_id)).or(inspect.targets.first());
            let (meta, regions): (&ElfMetadata, Vec<FunctionRegion>) = match ti {
                Some(t) => {
                    let mut all = t.new_regions.clone();
                    all.extend(t.old_regions.clone());
                    (&t.new_meta, all)
                }
                // External-diff runs can rank functions the local inspector
                // never saw; dossiers then rely on snippet evidence alone.
                None => {
                    return Err(DossierError::UnresolvedCandidate(rc.func_id.clone()).into());
                }
            };
            dossiers.push(build_dossier(rc, meta, &regions, &self.config.dossier)?);
        }

        let first = inspect.targets.first();
        let target_meta = json!({
            "pair_id": pair.pair_id,
            "binary_path": first.map(|t| t.new_meta.path.clone()).unwrap_or_default(),
            "machine": first.map(|t| t.new_meta.machine.clone()).unwrap_or_default(),
            "old_size": first.map(|t| t.old_regions.len()).unwrap_or(0),
            "new_size": first.map(|t| t.new_regions.len()).unwrap_or(0),
        });
        let ranked_summary: Vec<Value> = rank_out
            .ranked
            .iter()
            .map(|rc| {
                json!({
                    "rank": rc.rank,
                    "func_id": rc.func_id,
                    "score": rc.score,
                    "base_signal": rc.changed.base_signal,
                })
            })
            .collect();
        self.write(pair, "dossier", "dossiers.json", &DossierOutput { dossiers, target_meta, ranked_summary })
    }

    fn audit_stage_name(stage: PromptStage) -> &'static str {
        match stage {
            PromptStage::Preliminary => "audit_preliminary",
            PromptStage::Plan => "audit_plan",
            PromptStage::Final => "audit_final",
        }
    }

    fn stage_audit(&self, pair: &PairManifest, prompt_stage: PromptStage) -> Result<String, PipelineError> {
        let stage = Self::audit_stage_name(prompt_stage);
        let dossier_out: DossierOutput = self.read(pair, "dossier", "dossiers.json")?;

        let mut artifacts = StageArtifacts {
            target_meta: dossier_out.target_meta.clone(),
            dossiers: dossier_out.dossiers.clone(),
            ranked_summary: dossier_out.ranked_summary.clone(),
            ..StageArtifacts::default()
        };
        if prompt_stage != PromptStage::Preliminary {
            let prelim: AuditStageOutput = self.read(pair, "audit_preliminary", "stage.json")?;
            let audit = prelim.audit.ok_or(AgentError::MissingArtifact {
                stage: prompt_stage,
                what: "preliminary audit",
            })?;
            artifacts.preliminary_audit = Some(serde_json::to_value(&audit).expect("audit to value"));
        }
        if prompt_stage == PromptStage::Final {
            let plan_out: AuditStageOutput = self.read(pair, "audit_plan", "stage.json")?;
            let plan = plan_out.plan.ok_or(AgentError::MissingArtifact {
                stage: prompt_stage,
                what: "validation plan",
            })?;
            artifacts.validation_plan = Some(serde_json::to_value(&plan).expect("plan to value"));
            let results: Vec<ProbeResult> = self.read(pair, "validate", "results.json")?;
            artifacts.validation_results = Some(serde_json::to_value(&results).expect("results to value"));
        }

        let budget = self.config.dossier.prompt_budget;
        let (system, packed) = render_stage_prompt(prompt_stage, &artifacts, budget)?;
        let digest = prompt_digest(&system, &packed.document);
        let replay_dir = self.options.replay_dir.clone().unwrap_or_else(|| self.transcripts_dir());
        let mut backend = make_backend(&self.config.agent, &replay_dir)?;

        let mut synthesized = false;
        let raw = backend.complete(&system, &packed.document)?;
        crate::store::write_atomic(&self.transcripts_dir().join(format!("{digest}.txt")), raw.as_bytes())?;

        let max_actions = self.config.agent.max_actions;
        let parsed = match parse_audit(&raw, prompt_stage, &packed, max_actions) {
            Ok(p) => p,
            Err(AgentError::Unparseable) => {
                // One retry with an explicit format reminder, then synthesize.
                let retry_user = format!("{}\n\nReturn only a single JSON object.", packed.document);
                let retry_digest = prompt_digest(&system, &retry_user);
                match backend.complete(&system, &retry_user) {
                    Ok(retry_raw) => {
                        crate::store::write_atomic(
                            &self.transcripts_dir().join(format!("{retry_digest}.txt")),
                            retry_raw.as_bytes(),
                        )?;
                        match parse_audit(&retry_raw, prompt_stage, &packed, max_actions) {
                            Ok(p) => p,
                            Err(AgentError::Unparseable) => {
                                synthesized = true;
                                synthesize_stage(prompt_stage)
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    Err(AgentError::ReplayMiss(_)) => {
                        synthesized = true;
                        synthesize_stage(prompt_stage)
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Err(e) => return Err(e.into()),
        };

        let (audit, plan) = match parsed.artifact {
            StageArtifact::Audit(a) => (Some(a), None),
            StageArtifact::Plan(p) => (None, Some(p)),
        };
        let out = AuditStageOutput {
            packed,
            prompt_digest: digest,
            backend: backend.name().to_string(),
            violations: parsed.violations,
            synthesized,
            audit,
            plan,
        };
        if let Some(a) = &out.audit {
            self.store.write_text(&self.run_id, &pair.pair_id, stage, "audit.md", &agent::audit_markdown(a))?;
        }
        self.write(pair, stage, "stage.json", &out)
    }

    fn stage_validate(&self, pair: &PairManifest) -> Result<String, PipelineError> {
        let plan_out: AuditStageOutput = self.read(pair, "audit_plan", "stage.json")?;
        let plan = plan_out.plan.ok_or(AgentError::MissingArtifact {
            stage: PromptStage::Plan,
            what: "validation plan",
        })?;
        let roots: ExtractOutput = self.read(pair, "extract", "extract.json")?;
        let target_rel = pair.target_elf_paths[0].trim_start_matches('/');
        let old_bin = roots.old.root_dir.join(target_rel);
        let new_bin = roots.new.root_dir.join(target_rel);

        let cfg = &self.config.validate;
        let limits = ProbeLimits::from(cfg);
        let scratch = self.store.stage_dir(&self.run_id, &pair.pair_id, "validate").join("scratch");
        let mut results = Vec::new();
        let mut minimized_one = false;

        for action in &plan.actions {
            for probe in render_action(action, cfg.seed, cfg)? {
                if let Some(marker) = &probe.marker {
                    results.push(ProbeResult {
                        probe_id: probe.probe_id.clone(),
                        action: action.clone(),
                        skipped: Some(marker.clone()),
                        old: None,
                        new: None,
                        verdict: None,
                        minimized: None,
                    });
                    continue;
                }
                match validate::run_probe(&old_bin, &new_bin, &probe, &limits, &scratch) {
                    Ok((old, new)) => {
                        let verdict = detect_differential(&old, &new);
                        let minimized = if verdict.kind != DifferentialKind::None
                            && !minimized_one
                            && probe.files.iter().any(|(_, f)| matches!(f, validate::ProbeFile::Dense(_)))
                        {
                            minimized_one = true;
                            self.minimize_probe(&probe, &verdict.kind, &old_bin, &new_bin, &limits, &scratch)
                        } else {
                            None
                        };
                        results.push(ProbeResult {
                            probe_id: probe.probe_id.clone(),
                            action: action.clone(),
                            skipped: None,
                            old: Some(old),
                            new: Some(new),
                            verdict: Some(verdict),
                            minimized,
                        });
                    }
                    Err(ValidateError::SpawnError(bin, why)) => {
                        // Missing local executor is a skip, not a failure.
                        results.push(ProbeResult {
                            probe_id: probe.probe_id.clone(),
                            action: action.clone(),
                            skipped: Some(format!("spawn failed for {bin}: {why}")),
                            old: None,
                            new: None,
                            verdict: None,
                            minimized: None,
                        });
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let _ = std::fs::remove_dir_all(&scratch);
        self.write(pair, "validate", "results.json", &results)
    }

    fn minimize_probe(
        &self,
        probe: &ProbeInput,
        kind: &DifferentialKind,
        old_bin: &Path,
        new_bin: &Path,
        limits: &ProbeLimits,
        scratch: &Path,
    ) -> Option<MinimizedProbe> {
        let target_kind = *kind;
        let predicate = |candidate: &ProbeInput| {
            validate::run_probe(old_bin, new_bin, candidate, limits, scratch)
                .map(|(o, n)| detect_differential(&o, &n).kind == target_kind)
                .unwrap_or(false)
        };
        match validate::minimize(probe, predicate, &self.config.validate) {
            Ok((min_probe, stats)) => Some(MinimizedProbe { probe: min_probe, stats }),
            Err(e) => {
                log::warn!("minimization skipped for {}: {e}", probe.probe_id);
                None
            }
        }
    }

    fn stage_score(&self, pair: &PairManifest) -> Result<String, PipelineError> {
        let oracle_dir = self
            .options
            .oracle_dir
            .as_ref()
            .ok_or_else(|| StoreError::ArtifactMissing(PathBuf::from("oracle dir not set")))?;
        let path = oracle_dir.join(format!("{}.json", pair.pair_id));
        let data = std::fs::read(&path).map_err(|_| StoreError::ArtifactMissing(path.clone()))?;
        let annotation: OracleAnnotation = serde_json::from_slice(&data)
            .map_err(|e| StoreError::BadArtifact(path, e.to_string()))?;
        annotation.validate()?;

        let report = self.merged_report(pair)?;
        let rank_out: RankOutput = self.read(pair, "rank", "ranked.json")?;
        let prelim: AuditStageOutput = self.read(pair, "audit_preliminary", "stage.json")?;
        let final_out: AuditStageOutput = self.read(pair, "audit_final", "stage.json")?;
        let results: Vec<ProbeResult> = self.read(pair, "validate", "results.json")?;
        let plan_out: AuditStageOutput = self.read(pair, "audit_plan", "stage.json")?;

        let final_audit = final_out.audit.as_ref();
        let trace = oracle_cascade(
            &annotation,
            &CascadeInputs {
                diff: Some(&report),
                ranked: &rank_out.ranked,
                packed: Some(&prelim.packed),
                final_audit,
            },
        );
        let differential_count = results
            .iter()
            .filter(|r| r.verdict.as_ref().is_some_and(|v| v.kind != DifferentialKind::None))
            .count();
        let final_label = final_audit.map(|a| a.label.as_str()).unwrap_or("unknown");
        let bucket = assign_bucket(annotation.category, &trace, final_label, differential_count);

        // Canary sweep across everything the agent could have seen.
        let mut texts: Vec<String> = vec![
            prelim.packed.document.clone(),
            plan_out.packed.document.clone(),
            final_out.packed.document.clone(),
        ];
        let tdir = self.transcripts_dir();
        if let Ok(entries) = std::fs::read_dir(&tdir) {
            for entry in entries.flatten() {
                if let Ok(text) = std::fs::read_to_string(entry.path()) {
                    texts.push(text);
                }
            }
        }
        let hits = canary_hits(texts.iter().map(|s| s.as_str()));

        let record = ScoreRecord {
            pair_id: pair.pair_id.clone(),
            category: annotation.category,
            trace,
            bucket,
            final_label: final_label.to_string(),
            rubric: annotation.rubric,
            differential_count,
            canary_hits: hits,
        };
        self.write(pair, "score", "score.json", &record)
    }

    /// Collect score records across pairs and render the aggregate report.
    pub fn aggregate_report(&self, pairs: &[PairManifest]) -> Result<String, PipelineError> {
        let mut records = Vec::new();
        for pair in pairs {
            match self.read::<ScoreRecord>(pair, "score", "score.json") {
                Ok(r) => records.push(r),
                Err(_) => log::warn!("pair {} has no score record, skipped", pair.pair_id),
            }
        }
        let name = if self.options.raw_order { "raw_order" } else { "weighted" };
        let row = score::aggregate(name, &records);
        Ok(score::report_markdown(&[row]))
    }
}

/// Fallback artifact when the model never produced parseable output.
fn synthesize_stage(stage: PromptStage) -> agent::ParsedStage {
    let violations = vec!["model output unparseable after retry, synthesized fallback".to_string()];
    let artifact = match stage {
        PromptStage::Plan => StageArtifact::Plan(ValidationPlan {
            actions: vec![ValidationAction {
                action_type: ActionType::NoLocalHarness,
                candidate_id: String::new(),
                params: BTreeMap::new(),
            }],
            rationale: "synthesized: model output unparseable".into(),
        }),
        _ => StageArtifact::Audit(AuditReport::unknown(stage)),
    };
    agent::ParsedStage { artifact, violations }
}
