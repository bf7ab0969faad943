use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use chatmine_core::identities::{CandidateStatus, Decision, Registry};
use chatmine_core::orchestrator::{
    OrchestratorError, Phase, PhaseResult, Pipeline, PipelineConfig, ReviewServer, RunOptions,
    ServeOptions,
};
use chatmine_core::sources::SystemClock;
use chatmine_core::timestamp::Timestamp;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "miner", version, about = "Chat and issue-tracker mining pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config file (TOML).
    #[arg(long, short = 'c', global = true, default_value = "miner.toml")]
    config: PathBuf,
    /// Only this room (owner/name or owner_name).
    #[arg(long, global = true)]
    room: Option<String>,
    /// Fetch items updated at or after this instant instead of resuming.
    #[arg(long, global = true)]
    since: Option<Timestamp>,
    /// Inclusive analytics cutoff (overrides config).
    #[arg(long, global = true)]
    cutoff: Option<Timestamp>,
    /// Candidate similarity threshold (overrides config).
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Comment window in days (overrides config).
    #[arg(long = "window-days", global = true)]
    window_days: Option<u32>,
    /// Export directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Review service port (overrides config).
    #[arg(long, global = true)]
    port: Option<u16>,
    /// Repeat the phase every N seconds until interrupted.
    #[arg(long = "loop", global = true, value_name = "SECONDS")]
    loop_secs: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pull chat messages and tracker issues into the raw index.
    Fetch(Common),
    /// Rebuild enriched indices and register identities.
    Enrich(Common),
    /// Identity alignment.
    Identities {
        #[command(subcommand)]
        action: IdentityCommand,
        #[command(flatten)]
        common: Common,
    },
    /// Compute per-room reports.
    Analyze(Common),
    /// Write CSV and plot-data exports.
    Export(Common),
    /// Serve the review API and UI.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Listen on all interfaces instead of loopback.
        #[arg(long)]
        public: bool,
    },
    /// Rewrite raw files keeping only live records.
    Compact(Common),
}

#[derive(Subcommand)]
enum IdentityCommand {
    /// Propose merge candidates.
    Detect,
    /// Merge two clusters.
    Merge {
        uuid_a: String,
        uuid_b: String,
        #[arg(long)]
        actor: Option<String>,
    },
    /// Move an identity back into its own cluster.
    Unmerge {
        identity: String,
        #[arg(long)]
        actor: Option<String>,
    },
    /// Accept or reject a pending candidate.
    Decide {
        candidate: String,
        #[arg(value_parser = ["accept", "reject"])]
        action: String,
        #[arg(long)]
        actor: Option<String>,
    },
    /// List candidates.
    Candidates {
        #[arg(long)]
        status: Option<CandidateStatus>,
    },
}

fn actor(explicit: Option<String>) -> String {
    explicit
        .or_else(|| std::env::var("USER").ok())
        .unwrap_or_else(|| "cli".to_string())
}

fn load_config(common: &Common) -> Result<PipelineConfig, OrchestratorError> {
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(c) = common.cutoff {
        config.cutoff = Some(c);
    }
    if let Some(t) = common.threshold {
        config.threshold = t;
    }
    if let Some(w) = common.window_days {
        config.window_days = w;
    }
    if let Some(p) = common.port {
        config.serve_port = p;
    }
    config.validate()?;
    Ok(config)
}

fn report(result: &PhaseResult) {
    println!(
        "{}: {} processed, {} skipped, {} error(s)",
        result.phase.as_str(),
        result.items_processed,
        result.items_skipped,
        result.errors.len()
    );
    for e in &result.errors {
        eprintln!(
            "  [{}] {}: {}",
            e.code,
            e.room.as_deref().unwrap_or("-"),
            e.message
        );
    }
}

/// Runs `phase` once, or repeatedly with `--loop`. Returns whether every
/// run was clean.
fn run(common: &Common, phase: Phase) -> Result<bool, OrchestratorError> {
    let pipeline = Pipeline::new(load_config(common)?)?;
    let opts = RunOptions {
        room: common.room.clone(),
        since: common.since,
        out: common.out.clone(),
    };
    loop {
        let result = pipeline.run_phase(phase, &opts)?;
        report(&result);
        match common.loop_secs {
            None => return Ok(result.is_clean()),
            Some(secs) => std::thread::sleep(Duration::from_secs(secs.max(1))),
        }
    }
}

fn identities(common: &Common, action: IdentityCommand) -> Result<bool, OrchestratorError> {
    let pipeline = Pipeline::new(load_config(common)?)?;
    let result = match action {
        IdentityCommand::Detect => return run(common, Phase::Identities),
        IdentityCommand::Merge { uuid_a, uuid_b, actor: a } => pipeline.merge(&uuid_a, &uuid_b, &actor(a))?,
        IdentityCommand::Unmerge { identity, actor: a } => pipeline.unmerge(&identity, &actor(a))?,
        IdentityCommand::Decide { candidate, action, actor: a } => {
            let decision = if action == "accept" { Decision::Accept } else { Decision::Reject };
            pipeline.decide(&candidate, decision, &actor(a))?
        }
        IdentityCommand::Candidates { status } => {
            let registry = Registry::load(pipeline.storage_dir())?;
            for c in registry.candidates(status) {
                let name = |id: &str| {
                    registry
                        .identity(id)
                        .map(|i| format!("{}:{}", i.source, i.username))
                        .unwrap_or_else(|| id.to_string())
                };
                println!(
                    "{}\t{:?}\t{}\t{}\tname={:.4}\tusername={:.4}",
                    c.candidate_id,
                    c.status,
                    name(&c.identity_a),
                    name(&c.identity_b),
                    c.name_similarity,
                    c.username_similarity
                );
            }
            return Ok(true);
        }
    };
    report(&result);
    Ok(true)
}

fn serve(common: &Common, public: bool) -> Result<bool, OrchestratorError> {
    let config = load_config(common)?;
    let opts = ServeOptions {
        storage_dir: config.storage_dir.clone(),
        ui_dir: config.ui_dir.clone(),
        port: config.serve_port,
        public,
    };
    let server = ReviewServer::start(&opts, std::sync::Arc::new(SystemClock))?;
    println!("review service on http://{}/ (Ctrl-C to stop)", server.addr());
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|source| OrchestratorError::PortInUse {
            addr: server.addr().to_string(),
            source,
        })?;
    let _ = runtime.block_on(tokio::signal::ctrl_c());
    server.shutdown();
    Ok(true)
}

fn compact(common: &Common) -> Result<bool, OrchestratorError> {
    use chatmine_core::store::{RawIndex, StorageLock};
    let config = load_config(common)?;
    let _lock = StorageLock::acquire(&config.storage_dir)?;
    let rewritten = RawIndex::open(&config.storage_dir)?.compact()?;
    println!("compact: {rewritten} file(s) rewritten");
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fetch(c) => run(&c, Phase::Fetch),
        Command::Enrich(c) => run(&c, Phase::Enrich),
        Command::Analyze(c) => run(&c, Phase::Analyze),
        Command::Export(c) => run(&c, Phase::Export),
        Command::Identities { action, common } => identities(&common, action),
        Command::Serve { common, public } => serve(&common, public),
        Command::Compact(c) => compact(&c),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
