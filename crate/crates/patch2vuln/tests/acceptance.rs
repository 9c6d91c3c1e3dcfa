//! Acceptance gate: one test per criterion, each printing a single PASS/FAIL
//! line. Every check compares pipeline behavior against an independent oracle
//! (reference system tools, brute-force recomputation, or closed-form laws).

mod common;

use common::{build_deb, imm64, write_script, ElfBuilder, TestRng};
use patch2vuln::agent::AuditReport;
use patch2vuln::config::{RankWeights, RunConfig, ValidateConfig, SENTINEL_CONSTANTS};
use patch2vuln::diff::{ChangedFunction, DiffReport, DiffSource, FunctionMatch, MatchKind};
use patch2vuln::dossier::{pack_prompt, CandidateDossier, DiffMeta, PromptStage};
use patch2vuln::extract::{self, PairCategory, PairManifest};
use patch2vuln::pipeline::{Pipeline, PipelineOptions, ProbeResult};
use patch2vuln::rank::{rank, FeatureVector, RankMode};
use patch2vuln::score::{
    self, assign_bucket, Bucket, CascadeTrace, OracleCategory, ScoreRecord, ORACLE_CANARY,
    TOPK_LEVELS,
};
use patch2vuln::store::RunStore;
use patch2vuln::validate::{
    self, detect_differential, DifferentialKind, ProbeFile, ProbeInput, ProbeLimits,
};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn criterion(id: &str, desc: &str, f: impl FnOnce() -> Result<(), String>) {
    match f() {
        Ok(()) => println!("{id} PASS: {desc}"),
        Err(e) => {
            println!("{id} FAIL: {desc} -- {e}");
            panic!("{id} failed: {e}");
        }
    }
}

fn deadline(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let elapsed = start.elapsed();
    if elapsed > limit {
        return Err(format!("{what} took {elapsed:?}, limit {limit:?}"));
    }
    Ok(())
}

// ---------------------------------------------------------------- fixtures

/// Old/new ELF pair where `parse_record` gains an aligned INT_MAX compare
/// constant and a reference to a new "too large" error string; `helper_fmt`
/// changes trivially as ranking noise.
fn planted_pair(dir: &Path) -> PairManifest {
    let mut old = ElfBuilder::new();
    let old_note = old.rodata_string("records loaded");
    old.func("init_state", &[&[0x55u8, 0x48, 0x89, 0xe5, 0xc3, 0, 0, 0][..], &imm64(old_note)].concat());
    old.func("parse_record", &[&[0x55u8, 0x48, 0x89, 0xe5, 0x90, 0x90, 0x90, 0xc3][..], &imm64(0x1234)].concat());
    old.func("helper_fmt", &[0x48, 0x31, 0xc0, 0xc3, 0, 0, 0, 0]);

    let mut new = ElfBuilder::new();
    let new_note = new.rodata_string("records loaded");
    let err = new.rodata_string("record too large");
    new.func("init_state", &[&[0x55u8, 0x48, 0x89, 0xe5, 0xc3, 0, 0, 0][..], &imm64(new_note)].concat());
    new.func(
        "parse_record",
        &[&[0x55u8, 0x48, 0x89, 0xe5, 0x90, 0x90, 0x90, 0xc3][..], &imm64(0x7fff_ffff), &imm64(err)].concat(),
    );
    new.func("helper_fmt", &[0x48, 0x31, 0xdb, 0xc3, 0, 0, 0, 0]);

    let old_deb = dir.join("old.deb");
    let new_deb = dir.join("new.deb");
    build_deb(&old_deb, &[("usr/bin/fixture-app", &old.build(), 0o755)]);
    build_deb(&new_deb, &[("usr/bin/fixture-app", &new.build(), 0o755)]);
    PairManifest {
        pair_id: "planted-1".into(),
        category: PairCategory::Security,
        old_pkg: old_deb,
        new_pkg: new_deb,
        target_elf_paths: vec!["/usr/bin/fixture-app".into()],
        notes: String::new(),
    }
}

/// Old/new pair whose only change is feature-free: one instruction byte.
fn control_pair(dir: &Path) -> PairManifest {
    let build = |tweak: u8| {
        let mut b = ElfBuilder::new();
        b.func("init_state", &[0x55, 0x48, 0x89, 0xe5, 0xc3, 0, 0, 0]);
        b.func("helper_fmt", &[0x48, 0x31, tweak, 0xc3, 0, 0, 0, 0]);
        b.build()
    };
    let old_deb = dir.join("old.deb");
    let new_deb = dir.join("new.deb");
    build_deb(&old_deb, &[("usr/bin/fixture-app", &build(0xc0), 0o755)]);
    build_deb(&new_deb, &[("usr/bin/fixture-app", &build(0xdb), 0o755)]);
    PairManifest {
        pair_id: "control-1".into(),
        category: PairCategory::Control,
        old_pkg: old_deb,
        new_pkg: new_deb,
        target_elf_paths: vec!["/usr/bin/fixture-app".into()],
        notes: String::new(),
    }
}

fn write_oracle(dir: &Path, pair_id: &str, category: &str, aliases: &[&str]) {
    std::fs::create_dir_all(dir).unwrap();
    let ann = json!({
        "pair_id": pair_id,
        "category": category,
        "aliases": aliases,
        "canary": ORACLE_CANARY,
    });
    std::fs::write(dir.join(format!("{pair_id}.json")), serde_json::to_vec_pretty(&ann).unwrap()).unwrap();
}

fn pipeline_for(root: &Path, options: PipelineOptions) -> Pipeline {
    Pipeline::new(RunStore::new(root.join("runs")), RunConfig::default(), "acceptance", options)
}

// ---------------------------------------------------------------- criteria

#[test]
fn c01_extraction_round_trip_vs_dpkg() {
    criterion("C01", "deb extraction matches dpkg-deb and re-extraction is digest-stable", || {
        let start = Instant::now();
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let pair = planted_pair(tmp.path());

        let mine = tmp.path().join("mine");
        let root1 = extract::extract_deb(&pair.new_pkg, &mine).map_err(|e| e.to_string())?;

        let refdir = tmp.path().join("reference");
        std::fs::create_dir_all(&refdir).map_err(|e| e.to_string())?;
        let status = Command::new("dpkg-deb")
            .args(["-x"])
            .arg(&pair.new_pkg)
            .arg(&refdir)
            .status()
            .map_err(|e| format!("dpkg-deb unavailable: {e}"))?;
        ensure!(status.success(), "dpkg-deb -x failed");

        let mut ref_files = Vec::new();
        collect_files(&refdir, &refdir, &mut ref_files);
        ensure!(!ref_files.is_empty(), "reference extraction produced no files");
        for rel in &ref_files {
            let a = std::fs::read(refdir.join(rel)).map_err(|e| e.to_string())?;
            let b = std::fs::read(mine.join(rel))
                .map_err(|_| format!("file {rel} missing from our extraction"))?;
            ensure!(a == b, "content mismatch for {rel}");
        }
        ensure!(
            root1.file_index.len() == ref_files.len(),
            "file count mismatch: ours {} vs dpkg-deb {}",
            root1.file_index.len(),
            ref_files.len()
        );

        let mine2 = tmp.path().join("mine2");
        let root2 = extract::extract_deb(&pair.new_pkg, &mine2).map_err(|e| e.to_string())?;
        ensure!(
            root1.manifest_digest == root2.manifest_digest,
            "re-extraction changed the manifest digest"
        );
        deadline(start, Duration::from_secs(5), "extraction round trip")
    });
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let path = entry.path();
        if entry.file_type().unwrap().is_dir() {
            collect_files(root, &path, out);
        } else if entry.file_type().unwrap().is_file() {
            out.push(path.strip_prefix(root).unwrap().to_string_lossy().into_owned());
        }
    }
}

#[test]
fn c02_elf_parser_vs_readelf() {
    criterion("C02", "ELF header/section/symbol fields agree with readelf on a gcc binary", || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let src = tmp.path().join("sample.c");
        std::fs::write(
            &src,
            r#"
#include <stdio.h>
unsigned long acc_total = 7;
unsigned long fixture_alpha(unsigned long x) { return x * 3 + acc_total; }
unsigned long fixture_beta(unsigned long x) {
    unsigned long s = 0;
    for (unsigned long i = 0; i < x; i++) s += fixture_alpha(i);
    return s;
}
int main(void) { printf("%lu\n", fixture_beta(9)); return 0; }
"#,
        )
        .map_err(|e| e.to_string())?;
        let bin = tmp.path().join("sample");
        let status = Command::new("gcc")
            .arg("-O0")
            .arg("-o")
            .arg(&bin)
            .arg(&src)
            .status()
            .map_err(|e| format!("gcc unavailable: {e}"))?;
        ensure!(status.success(), "gcc failed");

        let data = std::fs::read(&bin).map_err(|e| e.to_string())?;
        let meta = patch2vuln::elf::parse_elf(&data, "sample").map_err(|e| e.to_string())?;
        let mut mismatches: Vec<String> = Vec::new();

        // Header fields vs readelf -h.
        let header = run_tool("readelf", &["-h".as_ref(), bin.as_os_str()])?;
        let expect_line = |needle: &str| header.lines().any(|l| l.contains(needle));
        if !expect_line("ELF64") {
            mismatches.push("readelf reports non-ELF64 class".into());
        }
        if meta.bitness != patch2vuln::elf::Bitness::B64 {
            mismatches.push(format!("bitness {:?}", meta.bitness));
        }
        if expect_line("little endian") != (meta.endianness == patch2vuln::elf::Endianness::Little) {
            mismatches.push("endianness disagrees".into());
        }
        if !(expect_line("X86-64") && meta.machine == "x86_64") {
            mismatches.push(format!("machine {} vs readelf", meta.machine));
        }
        let type_line = header.lines().find(|l| l.contains("Type:")).unwrap_or("");
        let expected_type = if type_line.contains("EXEC") {
            patch2vuln::elf::ElfType::Exec
        } else if type_line.contains("DYN") {
            if meta.sections.iter().any(|s| s.name == ".interp") {
                patch2vuln::elf::ElfType::Pie
            } else {
                patch2vuln::elf::ElfType::Shared
            }
        } else {
            patch2vuln::elf::ElfType::Other
        };
        if meta.elf_type != expected_type {
            mismatches.push(format!("elf_type {:?} vs readelf {type_line:?}", meta.elf_type));
        }

        // Section name sets vs readelf -S.
        let sections = run_tool("readelf", &["-S".as_ref(), "-W".as_ref(), bin.as_os_str()])?;
        let mut ref_names: Vec<String> = Vec::new();
        for line in sections.lines() {
            if let Some(idx) = line.find(']') {
                if line[..idx].contains('[') {
                    if let Some(name) = line[idx + 1..].split_whitespace().next() {
                        if name.starts_with('.') {
                            ref_names.push(name.to_string());
                        }
                    }
                }
            }
        }
        let mut mine: Vec<String> =
            meta.sections.iter().map(|s| s.name.clone()).filter(|n| !n.is_empty()).collect();
        ref_names.sort();
        mine.sort();
        if ref_names != mine {
            mismatches.push(format!("section names {mine:?} vs readelf {ref_names:?}"));
        }

        // Named function symbols vs readelf -s: vaddr and size must agree.
        let syms = run_tool("readelf", &["-s".as_ref(), "-W".as_ref(), bin.as_os_str()])?;
        for name in ["fixture_alpha", "fixture_beta", "main"] {
            let ref_line = syms
                .lines()
                .find(|l| l.contains("FUNC") && l.split_whitespace().last() == Some(name))
                .ok_or_else(|| format!("readelf lists no FUNC {name}"))?;
            let cols: Vec<&str> = ref_line.split_whitespace().collect();
            let ref_vaddr = u64::from_str_radix(cols[1], 16).map_err(|e| e.to_string())?;
            let ref_size: u64 = cols[2].parse().map_err(|_| format!("bad size col {:?}", cols[2]))?;
            let sym = meta
                .symbols
                .iter()
                .find(|s| {
                    s.name == name
                        && s.kind == patch2vuln::elf::SymbolKind::Function
                        && s.source == patch2vuln::elf::SymbolSource::Symtab
                })
                .ok_or_else(|| format!("our parser lists no symtab FUNC {name}"))?;
            if sym.vaddr != ref_vaddr || sym.size != ref_size {
                mismatches.push(format!(
                    "{name}: ours {:#x}/{} vs readelf {ref_vaddr:#x}/{ref_size}",
                    sym.vaddr, sym.size
                ));
            }
        }

        // Build id vs readelf -n.
        let notes = run_tool("readelf", &["-n".as_ref(), bin.as_os_str()])?;
        if let Some(line) = notes.lines().find(|l| l.contains("Build ID:")) {
            let ref_id = line.split(':').nth(1).unwrap_or("").trim().to_string();
            if meta.build_id.as_deref() != Some(ref_id.as_str()) {
                mismatches.push(format!("build id {:?} vs readelf {ref_id:?}", meta.build_id));
            }
        }

        ensure!(mismatches.is_empty(), "{} mismatches: {mismatches:?}", mismatches.len());
        Ok(())
    });
}

fn run_tool(tool: &str, args: &[&std::ffi::OsStr]) -> Result<String, String> {
    let out = Command::new(tool).args(args).output().map_err(|e| format!("{tool} unavailable: {e}"))?;
    if !out.status.success() {
        return Err(format!("{tool} exited with {:?}", out.status));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn c03_ranker_brute_force_equality() {
    criterion("C03", "ranker ordering equals brute-force recomputation on 200 random sets", || {
        let w = RankWeights::default();
        let mut rng = TestRng(0xc3);
        for set in 0..200 {
            let n = 5 + rng.below(20) as usize;
            let mut changed = Vec::new();
            for i in 0..n {
                let mut consts = vec![rng.below(1000) + 1_000_000];
                if rng.below(3) == 0 {
                    consts.push(SENTINEL_CONSTANTS[rng.below(5) as usize]);
                }
                let mut strings = Vec::new();
                if rng.below(4) == 0 {
                    strings.push("value too large".to_string());
                }
                if rng.below(5) == 0 {
                    strings.push("hello world".to_string());
                }
                changed.push(ChangedFunction {
                    matched: FunctionMatch {
                        old_id: Some(format!("fn{set}_{i}")),
                        new_id: Some(format!("fn{set}_{i}")),
                        match_kind: MatchKind::Name,
                        confidence: if rng.below(4) == 0 { 0.3 } else { 1.0 },
                    },
                    base_signal: rng.below(64) as f64 / 64.0,
                    size_delta: 0,
                    added_strings: strings,
                    removed_strings: vec![],
                    added_constants: consts,
                    removed_constants: vec![],
                    old_snippet: None,
                    new_snippet: None,
                    changed_call_args: None,
                    call_context: None,
                    raw_score: None,
                    is_dispatcher: rng.below(8) == 0,
                    new_vaddr: Some(0x1000 + rng.below(1 << 20)),
                });
            }
            let report = DiffReport {
                pair_id: "p".into(),
                target_path: "t".into(),
                source: DiffSource::Builtin,
                total_changed: changed.len(),
                changed: changed.clone(),
            };

            // Independent recomputation: recount features from the raw
            // inputs and mirror the documented score expression.
            let mut oracle: Vec<(f64, f64, u64, String)> = changed
                .iter()
                .map(|cf| {
                    let sent =
                        cf.added_constants.iter().filter(|c| SENTINEL_CONSTANTS.contains(c)).count() as u32;
                    let errs = cf
                        .added_strings
                        .iter()
                        .filter(|s| {
                            let l = s.to_lowercase();
                            ["too large", "short read", "invalid", "truncated"]
                                .iter()
                                .any(|m| l.contains(m))
                        })
                        .count() as u32;
                    let cap = |c: u32| c.min(w.feature_cap) as f64;
                    let mut s = cf.base_signal
                        + w.cmp_sentinel * cap(sent)
                        + w.len_check_before_alloc * cap(0)
                        + w.changed_alloc_size * cap(0)
                        + w.changed_copy_read_args * cap(0)
                        + w.parser_boundary_check * cap(0)
                        + w.captured_vs_declared_len * cap(0)
                        + w.new_error_strings * cap(errs);
                    if cf.is_dispatcher {
                        s -= w.penalty_dispatcher;
                    }
                    if cf.matched.confidence < 0.5 {
                        s -= w.penalty_low_confidence;
                    }
                    (s, cf.base_signal, cf.new_vaddr.unwrap(), cf.func_id().to_string())
                })
                .collect();
            oracle.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(b.1.partial_cmp(&a.1).unwrap())
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });

            let ranked = rank(&report, &w, RankMode::Weighted);
            for (i, (rc, (s, _, _, id))) in ranked.iter().zip(&oracle).enumerate() {
                ensure!(
                    rc.func_id == *id,
                    "set {set} position {i}: ranker {:?} vs oracle {:?}",
                    rc.func_id,
                    id
                );
                ensure!((rc.score - s).abs() < 1e-12, "set {set} score drift at {i}");
                ensure!(rc.rank == i + 1, "rank numbering broken at {i}");
            }

            // Raw-order baseline law: ordering by base signal only.
            let raw = rank(&report, &w, RankMode::RawOrder);
            for pair in raw.windows(2) {
                ensure!(
                    pair[0].changed.base_signal >= pair[1].changed.base_signal,
                    "raw-order baseline not sorted by base signal in set {set}"
                );
            }
        }
        Ok(())
    });
}

#[test]
fn c04_packing_vs_greedy_oracle() {
    criterion("C04", "prompt packing matches the greedy length oracle on 500 random sets", || {
        let mut rng = TestRng(0xc4);
        let scaffold = json!({"task": "audit", "notes": "fixture"});
        for set in 0..500 {
            let n = rng.below(12) as usize;
            let dossiers: Vec<CandidateDossier> = (0..n)
                .map(|i| CandidateDossier {
                    candidate_id: format!("C{}", i + 1),
                    binary_path: "/usr/bin/app".into(),
                    func_id: format!("fn_{set}_{i}"),
                    rank: i + 1,
                    score: 0.5,
                    features: FeatureVector::default(),
                    diff_meta: DiffMeta {
                        match_kind: MatchKind::Name,
                        confidence: 1.0,
                        size_delta: 0,
                        base_signal: 0.5,
                    },
                    nearby_strings: (0..rng.below(6)).map(|k| format!("string-{k}-{}", rng.below(100))).collect(),
                    imports_referenced: vec![],
                    old_snippet: Some("x".repeat(rng.below(400) as usize)),
                    new_snippet: Some("y".repeat(rng.below(400) as usize)),
                    call_context: None,
                })
                .collect();

            // Independent greedy oracle over serialized lengths.
            let mut doc = scaffold.clone();
            doc["candidate_dossiers"] = json!([]);
            doc["omitted_count"] = json!(n);
            let base = serde_json::to_string(&doc).unwrap().len();
            let sizes: Vec<usize> =
                dossiers.iter().map(|d| serde_json::to_string(d).unwrap().len()).collect();
            let budget = base + rng.below(2500) as usize;
            let mut cur = base;
            let mut expect_included = 0usize;
            for (i, size) in sizes.iter().enumerate() {
                let add = size + if i > 0 { 1 } else { 0 };
                if cur + add <= budget {
                    cur += add;
                    expect_included += 1;
                } else {
                    break;
                }
            }

            let packed = pack_prompt(PromptStage::Preliminary, &dossiers, &scaffold, budget)
                .map_err(|e| format!("set {set}: {e}"))?;
            ensure!(
                packed.included_candidate_ids.len() == expect_included,
                "set {set}: packed {} vs oracle {expect_included} (budget {budget})",
                packed.included_candidate_ids.len()
            );
            ensure!(packed.document.len() <= budget, "set {set}: document over budget");
            ensure!(
                packed.omitted_count == n - expect_included,
                "set {set}: omitted_count wrong"
            );
            let parsed: serde_json::Value = serde_json::from_str(&packed.document).unwrap();
            ensure!(
                parsed["omitted_count"] == json!(n - expect_included),
                "set {set}: document omitted_count disagrees"
            );
            for (i, id) in packed.included_candidate_ids.iter().enumerate() {
                ensure!(id == &format!("C{}", i + 1), "set {set}: non-prefix packing order");
            }
        }
        Ok(())
    });
}

#[test]
fn c05_planted_candidate_end_to_end() {
    criterion("C05", "planted candidate ranks first and scores localized_by_agent end to end", || {
        let start = Instant::now();
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let pair = planted_pair(tmp.path());
        let oracle_dir = tmp.path().join("oracle");
        write_oracle(&oracle_dir, &pair.pair_id, "security", &["parse_record"]);

        let pipeline = pipeline_for(
            tmp.path(),
            PipelineOptions { oracle_dir: Some(oracle_dir), ..PipelineOptions::default() },
        );
        pipeline.run_all(&pair).map_err(|e| e.to_string())?;

        let record: ScoreRecord = pipeline
            .store
            .read_artifact("acceptance", &pair.pair_id, "score", "score.json")
            .map_err(|e| e.to_string())?;
        ensure!(record.trace.in_diff, "planted function missing from diff");
        ensure!(
            record.trace.best_rank == Some(1),
            "planted function ranked {:?}, expected 1",
            record.trace.best_rank
        );
        ensure!(record.trace.in_prompt && record.trace.in_context, "planted function lost before prompt");
        ensure!(record.trace.mentioned_in_final, "final audit does not name the planted function");
        ensure!(
            record.bucket == Bucket::LocalizedByAgent,
            "bucket {:?}, expected localized_by_agent",
            record.bucket
        );

        let final_audit: patch2vuln::pipeline::AuditStageOutput = pipeline
            .store
            .read_artifact("acceptance", &pair.pair_id, "audit_final", "stage.json")
            .map_err(|e| e.to_string())?;
        let audit: &AuditReport = final_audit.audit.as_ref().ok_or("no final audit artifact")?;
        ensure!(
            audit.named_functions.iter().any(|n| n == "parse_record"),
            "final audit names {:?}",
            audit.named_functions
        );
        deadline(start, Duration::from_secs(30), "planted end-to-end run")
    });
}

#[test]
fn c06_negative_control_law() {
    criterion("C06", "feature-free control pair ends in control_accepted with zero differentials", || {
        let start = Instant::now();
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let pair = control_pair(tmp.path());
        let oracle_dir = tmp.path().join("oracle");
        write_oracle(&oracle_dir, &pair.pair_id, "control", &[]);

        let pipeline = pipeline_for(
            tmp.path(),
            PipelineOptions { oracle_dir: Some(oracle_dir), ..PipelineOptions::default() },
        );
        pipeline.run_all(&pair).map_err(|e| e.to_string())?;

        let record: ScoreRecord = pipeline
            .store
            .read_artifact("acceptance", &pair.pair_id, "score", "score.json")
            .map_err(|e| e.to_string())?;
        ensure!(record.differential_count == 0, "control produced differentials");
        ensure!(record.final_label == "unknown", "control labeled {:?}", record.final_label);
        ensure!(
            record.bucket == Bucket::ControlAccepted,
            "bucket {:?}, expected control_accepted",
            record.bucket
        );
        deadline(start, Duration::from_secs(10), "control end-to-end run")
    });
}

#[test]
fn c07_bucket_totality_and_aggregate_recount() {
    criterion("C07", "bucket assignment is total and lawful; aggregates match a recount oracle", || {
        // Exhaustive trace combinations x categories x labels x differentials.
        for bits in 0..32u32 {
            for rank in [None, Some(1), Some(7), Some(40)] {
                let mut topk = BTreeMap::new();
                for k in TOPK_LEVELS {
                    topk.insert(k, rank.is_some_and(|r| r <= k));
                }
                let trace = CascadeTrace {
                    in_diff: bits & 1 != 0,
                    best_rank: rank,
                    topk,
                    in_context: bits & 4 != 0,
                    in_prompt: bits & 8 != 0,
                    mentioned_in_final: bits & 16 != 0,
                };
                for category in [OracleCategory::Security, OracleCategory::Control] {
                    for label in ["unknown", "bounds_check"] {
                        for diffs in [0usize, 2] {
                            let b = assign_bucket(category, &trace, label, diffs);
                            match category {
                                OracleCategory::Control => {
                                    let accepted = label == "unknown" && diffs == 0;
                                    ensure!(
                                        (b == Bucket::ControlAccepted) == accepted
                                            && (b == Bucket::ControlAccepted || b == Bucket::ControlFailed),
                                        "control law violated for {b:?}"
                                    );
                                }
                                OracleCategory::Security => {
                                    ensure!(
                                        b != Bucket::ControlAccepted && b != Bucket::ControlFailed,
                                        "security pair landed in a control bucket"
                                    );
                                    if b == Bucket::LocalizedByAgent {
                                        ensure!(
                                            trace.mentioned_in_final && trace.in_prompt,
                                            "localized without final mention + prompt presence"
                                        );
                                    }
                                    // A final-audit mention outranks every
                                    // miss bucket; below that, absence from
                                    // the diff or prompt charges the front of
                                    // the pipeline.
                                    if !(trace.mentioned_in_final && trace.in_prompt)
                                        && (!trace.in_diff || !trace.in_prompt)
                                    {
                                        ensure!(
                                            b == Bucket::RankerOrDiffMiss,
                                            "expected ranker_or_diff_miss, got {b:?}"
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        // 100 random score records: aggregate vs independent recount.
        let mut rng = TestRng(0xc7);
        let buckets = [
            Bucket::LocalizedByAgent,
            Bucket::RankerOrDiffMiss,
            Bucket::ContextExportMiss,
            Bucket::ModelReasoningOrValidationMiss,
            Bucket::ControlAccepted,
            Bucket::ControlFailed,
        ];
        let records: Vec<ScoreRecord> = (0..100)
            .map(|i| {
                let bucket = buckets[rng.below(6) as usize];
                let category = match bucket {
                    Bucket::ControlAccepted | Bucket::ControlFailed => OracleCategory::Control,
                    _ => OracleCategory::Security,
                };
                let best_rank = if category == OracleCategory::Security && rng.below(4) != 0 {
                    Some(1 + rng.below(30) as usize)
                } else {
                    None
                };
                let mut topk = BTreeMap::new();
                for k in TOPK_LEVELS {
                    topk.insert(k, best_rank.is_some_and(|r| r <= k));
                }
                ScoreRecord {
                    pair_id: format!("p{i}"),
                    category,
                    trace: CascadeTrace {
                        in_diff: best_rank.is_some(),
                        best_rank,
                        topk,
                        in_context: rng.below(2) == 0,
                        in_prompt: rng.below(2) == 0,
                        mentioned_in_final: rng.below(2) == 0,
                    },
                    bucket,
                    final_label: "unknown".into(),
                    rubric: if rng.below(2) == 0 { Some(rng.below(4) as u8) } else { None },
                    differential_count: rng.below(3) as usize,
                    canary_hits: 0,
                }
            })
            .collect();
        let row = score::aggregate("check", &records);
        for k in TOPK_LEVELS {
            let expect = records
                .iter()
                .filter(|r| r.category == OracleCategory::Security)
                .filter(|r| r.trace.best_rank.is_some_and(|br| br <= k))
                .count();
            ensure!(row.topk[&k] == expect, "top-{k} recount mismatch: {} vs {expect}", row.topk[&k]);
        }
        for b in buckets {
            let expect = records.iter().filter(|r| r.bucket == b).count();
            let got = row.buckets.get(b.as_str()).copied().unwrap_or(0);
            ensure!(got == expect, "bucket {b:?} recount mismatch: {got} vs {expect}");
        }
        let total: usize = row.buckets.values().sum();
        ensure!(total == records.len(), "bucket counts do not partition the records");
        Ok(())
    });
}

#[test]
fn c08_probe_formats_vs_reference_readers() {
    criterion("C08", "generated probe archives and pcaps parse under reference readers", || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

        // Baseline ar under the system ar.
        let (name, data) = validate::archive::generate(validate::archive::ArchiveVariant::BaselineAr);
        let ar_path = tmp.path().join(name);
        std::fs::write(&ar_path, &data).map_err(|e| e.to_string())?;
        let listing = run_tool("ar", &["t".as_ref(), ar_path.as_os_str()])?;
        ensure!(
            listing.lines().collect::<Vec<_>>() == vec!["alpha.txt", "beta.txt"],
            "ar t listed {listing:?}"
        );

        // Baseline ustar under the system tar.
        let (name, data) = validate::archive::generate(validate::archive::ArchiveVariant::BaselineUstar);
        let tar_path = tmp.path().join(name);
        std::fs::write(&tar_path, &data).map_err(|e| e.to_string())?;
        let listing = run_tool("tar", &["-tf".as_ref(), tar_path.as_os_str()])?;
        ensure!(
            listing.lines().collect::<Vec<_>>() == vec!["alpha.txt", "beta.txt"],
            "tar -tf listed {listing:?}"
        );

        // pcap under an independent reader written against the format spec.
        let pkt = validate::pcap::udp_packet(3784, b"payload-bytes");
        let cap = validate::pcap::write_pcap(1, &[&pkt], false);
        let (linktype, records) = read_pcap_independent(&cap).ok_or("pcap rejected by reader")?;
        ensure!(linktype == 1 && records.len() == 1, "pcap structure wrong");
        ensure!(records[0].0 == records[0].1, "caplen differs without mismatch flag");
        let mismatch = validate::pcap::write_pcap(1, &[&pkt], true);
        let (_, records) = read_pcap_independent(&mismatch).ok_or("mismatch pcap rejected")?;
        ensure!(records[0].0 < records[0].1, "caplen_mismatch did not shorten incl_len");

        // IPv4 header checksum must validate to zero.
        let header = &pkt[14..34];
        let mut sum = 0u32;
        for c in header.chunks(2) {
            sum += u16::from_be_bytes([c[0], c[1]]) as u32;
        }
        while sum >> 16 != 0 {
            sum = (sum & 0xffff) + (sum >> 16);
        }
        ensure!(sum == 0xffff, "ipv4 checksum invalid");
        Ok(())
    });
}

fn read_pcap_independent(data: &[u8]) -> Option<(u32, Vec<(u32, u32)>)> {
    if data.len() < 24 || u32::from_le_bytes(data[0..4].try_into().unwrap()) != 0xa1b2_c3d4 {
        return None;
    }
    if u16::from_le_bytes(data[4..6].try_into().unwrap()) != 2
        || u16::from_le_bytes(data[6..8].try_into().unwrap()) != 4
    {
        return None;
    }
    let linktype = u32::from_le_bytes(data[20..24].try_into().unwrap());
    let mut records = Vec::new();
    let mut pos = 24;
    while pos < data.len() {
        if data.len() - pos < 16 {
            return None;
        }
        let incl = u32::from_le_bytes(data[pos + 8..pos + 12].try_into().unwrap());
        let orig = u32::from_le_bytes(data[pos + 12..pos + 16].try_into().unwrap());
        pos += 16 + incl as usize;
        if pos > data.len() {
            return None;
        }
        records.push((incl, orig));
    }
    Some((linktype, records))
}

#[test]
fn c09_differential_detection_and_minimization() {
    criterion("C09", "old/new differential is detected and minimized to a 1-minimal input", || {
        let start = Instant::now();
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let old_bin = tmp.path().join("old.sh");
        let new_bin = tmp.path().join("new.sh");
        write_script(
            &old_bin,
            "#!/bin/sh\nif grep -q DIFF \"$1\" 2>/dev/null; then kill -SEGV $$; fi\necho ok\n",
        );
        write_script(&new_bin, "#!/bin/sh\necho ok\n");

        let mut input = vec![b'.'; 2048];
        input[1000..1004].copy_from_slice(b"DIFF");
        let probe = ProbeInput {
            probe_id: "diff-token".into(),
            action: patch2vuln::agent::ValidationAction {
                action_type: patch2vuln::agent::ActionType::GenericMalformedFile,
                candidate_id: "C1".into(),
                params: BTreeMap::new(),
            },
            files: vec![("input.bin".into(), ProbeFile::Dense(input))],
            argv_template: vec!["{input.bin}".into()],
            stdin: None,
            marker: None,
        };
        let limits = ProbeLimits { wall: Duration::from_secs(5), output_cap: 64 * 1024 };
        let scratch = tmp.path().join("scratch");

        let (old, new) =
            validate::run_probe(&old_bin, &new_bin, &probe, &limits, &scratch).map_err(|e| e.to_string())?;
        let verdict = detect_differential(&old, &new);
        ensure!(
            verdict.kind == DifferentialKind::CrashOldOnly,
            "verdict {:?}, expected crash_old_only",
            verdict.kind
        );

        let cfg = ValidateConfig::default();
        let pred = |p: &ProbeInput| {
            validate::run_probe(&old_bin, &new_bin, p, &limits, &scratch)
                .map(|(o, n)| detect_differential(&o, &n).kind == DifferentialKind::CrashOldOnly)
                .unwrap_or(false)
        };
        let (min_probe, stats) = validate::minimize(&probe, pred, &cfg).map_err(|e| e.to_string())?;
        let ProbeFile::Dense(min_bytes) = &min_probe.files[0].1 else {
            return Err("minimized file shape changed".into());
        };
        ensure!(
            min_bytes.len() <= 2 * cfg.min_chunk,
            "minimized to {} bytes, allowed {}",
            min_bytes.len(),
            2 * cfg.min_chunk
        );
        ensure!(stats.minimal, "minimizer exhausted its budget");
        ensure!(pred(&min_probe), "minimized input no longer reproduces");

        // Independent 1-minimality check at chunk granularity.
        let parts = min_bytes.len().div_ceil(cfg.min_chunk);
        for i in 0..parts {
            let a = i * min_bytes.len() / parts;
            let b = (i + 1) * min_bytes.len() / parts;
            let mut trial = min_probe.clone();
            let mut reduced = min_bytes.clone();
            reduced.drain(a..b);
            trial.files[0].1 = ProbeFile::Dense(reduced);
            ensure!(!pred(&trial), "removing chunk {i} still reproduces: not 1-minimal");
        }
        deadline(start, Duration::from_secs(20), "differential + minimization")
    });
}

#[test]
fn c10_resumability_cache_hits() {
    criterion("C10", "re-running a finished pair is all cache hits with identical digests", || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let pair = planted_pair(tmp.path());
        let oracle_dir = tmp.path().join("oracle");
        write_oracle(&oracle_dir, &pair.pair_id, "security", &["parse_record"]);
        let pipeline = pipeline_for(
            tmp.path(),
            PipelineOptions { oracle_dir: Some(oracle_dir), ..PipelineOptions::default() },
        );

        let first = pipeline.run_all(&pair).map_err(|e| e.to_string())?;
        ensure!(first.iter().all(|o| !o.cached), "first run unexpectedly hit a cache");
        let second = pipeline.run_all(&pair).map_err(|e| e.to_string())?;
        ensure!(second.len() == first.len(), "stage counts differ across runs");
        for (a, b) in first.iter().zip(&second) {
            ensure!(b.cached, "stage {} re-ran instead of hitting the cache", b.stage);
            ensure!(
                a.output_digest == b.output_digest,
                "stage {} output digest changed across resume",
                a.stage
            );
        }
        Ok(())
    });
}

#[test]
fn c11_canary_never_reaches_agent_artifacts() {
    criterion("C11", "oracle canary token appears nowhere in agent-visible artifacts", || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let pair = planted_pair(tmp.path());
        let oracle_dir = tmp.path().join("oracle");
        write_oracle(&oracle_dir, &pair.pair_id, "security", &["parse_record"]);
        let pipeline = pipeline_for(
            tmp.path(),
            PipelineOptions { oracle_dir: Some(oracle_dir.clone()), ..PipelineOptions::default() },
        );
        pipeline.run_all(&pair).map_err(|e| e.to_string())?;

        let record: ScoreRecord = pipeline
            .store
            .read_artifact("acceptance", &pair.pair_id, "score", "score.json")
            .map_err(|e| e.to_string())?;
        ensure!(record.canary_hits == 0, "scorer counted {} canary hits", record.canary_hits);

        // Sweep every run artifact except the score stage's own record of
        // the annotation-derived result.
        let mut hits = Vec::new();
        sweep_canary(&tmp.path().join("runs"), &mut hits);
        ensure!(hits.is_empty(), "canary token found in {hits:?}");

        // The oracle file itself must carry the canary (sealing is real).
        let oracle_text =
            std::fs::read_to_string(oracle_dir.join(format!("{}.json", pair.pair_id))).unwrap();
        ensure!(oracle_text.contains(ORACLE_CANARY), "oracle file lost its canary");

        // Sanity: the validation results exist and were produced without
        // oracle access (skipped probes are fine, leaked labels are not).
        let results: Vec<ProbeResult> = pipeline
            .store
            .read_artifact("acceptance", &pair.pair_id, "validate", "results.json")
            .map_err(|e| e.to_string())?;
        ensure!(!results.is_empty(), "no validation probes were recorded");
        Ok(())
    });
}

fn sweep_canary(dir: &Path, hits: &mut Vec<PathBuf>) {
    let Ok(entries) = std::fs::read_dir(dir) else { return };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            sweep_canary(&path, hits);
        } else if let Ok(text) = std::fs::read_to_string(&path) {
            if text.contains(ORACLE_CANARY) {
                hits.push(path);
            }
        }
    }
}
