use clap::{Args, Parser, Subcommand, ValueEnum};
use patch2vuln::config::{BackendKind, RunConfig};
use patch2vuln::extract::PairManifest;
use patch2vuln::pipeline::{Pipeline, PipelineError, PipelineOptions};
use patch2vuln::store::RunStore;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "patch2vuln", about = "Local binary-diff vulnerability reconstruction pipeline")]
struct Cli {
    /// Pair manifest: one JSON object or an array of them.
    #[arg(long, global = true, default_value = "pairs.json")]
    pairs: PathBuf,
    /// Root directory for run artifacts.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    /// Run identifier; reuse one to resume.
    #[arg(long, global = true, default_value = "default")]
    run_id: String,
    /// Run configuration JSON; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Stub,
    Replay,
    Live,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Stub => BackendKind::Stub,
            BackendArg::Replay => BackendKind::Replay,
            BackendArg::Live => BackendKind::Live,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AuditStage {
    Preliminary,
    Plan,
    Final,
}

impl AuditStage {
    fn stage_name(self) -> &'static str {
        match self {
            AuditStage::Preliminary => "audit_preliminary",
            AuditStage::Plan => "audit_plan",
            AuditStage::Final => "audit_final",
        }
    }
}

#[derive(Args, Default)]
struct AgentArgs {
    /// Model backend override.
    #[arg(long)]
    backend: Option<BackendArg>,
    /// Directory of recorded transcripts for the replay backend.
    #[arg(long)]
    replay_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract both packages and verify the targets resolve.
    Extract,
    /// Parse target ELFs into metadata and function regions.
    Inspect,
    /// Produce the changed-function list.
    Diff {
        /// Import an external differ export instead of the built-in differ.
        #[arg(long)]
        external_diff: Option<PathBuf>,
    },
    /// Order changed functions by the weighted ranker.
    Rank {
        /// Rank by raw diff signal only (baseline).
        #[arg(long)]
        raw_order: bool,
    },
    /// Build candidate dossiers for the top-ranked functions.
    Dossier {
        /// Prompt byte budget override.
        #[arg(long)]
        budget: Option<usize>,
        /// Candidate cutoff override.
        #[arg(long)]
        cutoff: Option<usize>,
    },
    /// Run one audit stage against the configured backend.
    Audit {
        #[arg(long, value_enum)]
        stage: AuditStage,
        #[command(flatten)]
        agent: AgentArgs,
    },
    /// Execute the validation plan's probes against both binaries.
    Validate {
        /// Probe generation seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score finished runs against sealed ground truth.
    Score {
        #[arg(long)]
        oracle_dir: PathBuf,
        #[arg(long)]
        raw_order: bool,
    },
    /// Print the aggregate markdown report from existing score records.
    Report {
        #[arg(long)]
        raw_order: bool,
    },
    /// Run every stage in order for each pair.
    RunAll {
        #[command(flatten)]
        agent: AgentArgs,
        #[arg(long)]
        oracle_dir: Option<PathBuf>,
        #[arg(long)]
        external_diff: Option<PathBuf>,
        #[arg(long)]
        raw_order: bool,
    },
}

fn load_pairs(path: &PathBuf) -> Result<Vec<PairManifest>, String> {
    let data = std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    if let Ok(list) = serde_json::from_slice::<Vec<PairManifest>>(&data) {
        return Ok(list);
    }
    serde_json::from_slice::<PairManifest>(&data)
        .map(|p| vec![p])
        .map_err(|e| format!("bad pair manifest {}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let mut config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: cannot load config {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => RunConfig::default(),
    };

    let mut options = PipelineOptions::default();
    let mut stages: Vec<&str> = Vec::new();
    let mut report_only = false;

    match &cli.command {
        Command::Extract => stages.push("extract"),
        Command::Inspect => stages.push("inspect"),
        Command::Diff { external_diff } => {
            options.external_diff = external_diff.clone();
            stages.push("diff");
        }
        Command::Rank { raw_order } => {
            options.raw_order = *raw_order;
            stages.push("rank");
        }
        Command::Dossier { budget, cutoff } => {
            if let Some(b) = budget {
                config.dossier.prompt_budget = *b;
            }
            if let Some(c) = cutoff {
                config.dossier.candidate_cutoff = *c;
            }
            stages.push("dossier");
        }
        Command::Audit { stage, agent } => {
            if let Some(b) = agent.backend {
                config.agent.backend = b.into();
            }
            options.replay_dir = agent.replay_dir.clone();
            stages.push(stage.stage_name());
        }
        Command::Validate { seed } => {
            if let Some(s) = seed {
                config.validate.seed = *s;
            }
            stages.push("validate");
        }
        Command::Score { oracle_dir, raw_order } => {
            options.oracle_dir = Some(oracle_dir.clone());
            options.raw_order = *raw_order;
            stages.push("score");
        }
        Command::Report { raw_order } => {
            options.raw_order = *raw_order;
            report_only = true;
        }
        Command::RunAll { agent, oracle_dir, external_diff, raw_order } => {
            if let Some(b) = agent.backend {
                config.agent.backend = b.into();
            }
            options.replay_dir = agent.replay_dir.clone();
            options.oracle_dir = oracle_dir.clone();
            options.external_diff = external_diff.clone();
            options.raw_order = *raw_order;
        }
    }

    let pairs = match load_pairs(&cli.pairs) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    let store = RunStore::new(cli.runs_dir.clone());
    let pipeline = Pipeline::new(store, config, &cli.run_id, options);

    if report_only {
        return match pipeline.aggregate_report(&pairs) {
            Ok(md) => {
                println!("{md}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        };
    }

    let mut failed = false;
    for pair in &pairs {
        let result: Result<(), PipelineError> = if stages.is_empty() {
            pipeline.run_all(pair).map(|outcomes| {
                for o in outcomes {
                    println!(
                        "{} {} {}",
                        pair.pair_id,
                        o.stage,
                        if o.cached { "cached" } else { "ran" }
                    );
                }
            })
        } else {
            (|| {
                for stage in &stages {
                    let o = pipeline.run_stage(pair, stage)?;
                    println!(
                        "{} {} {}",
                        pair.pair_id,
                        o.stage,
                        if o.cached { "cached" } else { "ran" }
                    );
                }
                Ok(())
            })()
        };
        if let Err(e) = result {
            eprintln!("error: pair {}: {e}", pair.pair_id);
            failed = true;
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
