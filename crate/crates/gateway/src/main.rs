use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use etbot_core::analytics::{bug_stats, derive_phases, interaction_table, PhaseSpan};
use etbot_core::knowledge::Group;
use etbot_core::store::read_log;
use etbot_core::{Catalog, EventStore, JsonlStore};
use etbot_gateway::config::ServiceConfig;
use etbot_gateway::transcript::{run_transcript, Transcript};

#[derive(Parser)]
#[command(name = "etbot", version, about = "Chatbot companion for exploratory test sessions")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the WebSocket/HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        /// Audit log file (JSON lines).
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        attachments: Option<PathBuf>,
    },
    /// Replay transcripts against the engine on a virtual clock.
    Replay {
        #[arg(required = true)]
        transcripts: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the audit log of the (single) transcript here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Interaction metrics and bug counts from an audit log.
    Analyze {
        log: PathBuf,
        /// Explicit phases, e.g. `training=0..40,test=40..`. Defaults to
        /// splitting on session boundaries.
        #[arg(long)]
        phases: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Check a knowledge catalog file.
    ValidateCatalog { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ServiceConfig> {
    let mut config = match path {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok())?;
    Ok(config)
}

fn replay(config: ServiceConfig, transcripts: &[PathBuf], log: Option<&Path>) -> anyhow::Result<bool> {
    if log.is_some() && transcripts.len() != 1 {
        bail!("--log needs exactly one transcript");
    }
    let engine_config = config.engine_config()?;
    let mut all_passed = true;
    for path in transcripts {
        let source = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let script = Transcript::parse(&source).with_context(|| format!("parsing {}", path.display()))?;
        let outcome = run_transcript(&script, engine_config.clone(), config.seed);
        print!("{}: {}", path.display(), outcome.report);
        all_passed &= outcome.report.passed();
        if let Some(out) = log {
            if out.exists() {
                std::fs::remove_file(out)?;
            }
            let mut store = JsonlStore::open(out)?;
            for record in outcome.log {
                store.append(record.body)?;
            }
        }
    }
    Ok(all_passed)
}

fn analyze(log_path: &Path, phases: Option<&str>, format: Format) -> anyhow::Result<()> {
    let log = read_log(log_path)?;
    let spans = match phases {
        Some(spec) => PhaseSpan::parse_list(spec)?,
        None => derive_phases(&log),
    };
    let table = interaction_table(&log, &spans)?;
    let bugs = bug_stats(&log);
    match format {
        Format::Text => println!("{}\n\n{}", table.render_text(), bugs.render_text()),
        Format::Json => {
            let doc = serde_json::json!({ "interactions": table.to_json(), "bugs": bugs });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
    }
    Ok(())
}

fn validate_catalog(file: &Path) -> anyhow::Result<bool> {
    let catalog = Catalog::from_path(file)?;
    let per_group: Vec<String> = Group::ALL
        .iter()
        .map(|g| format!("{} {}", catalog.in_group(*g).count(), g.key()))
        .collect();
    println!("{} items ({})", catalog.len(), per_group.join(", "));
    let mut ok = true;
    for key in catalog.listed_keys() {
        if let Err(e) = catalog.lookup(key) {
            println!("dangling key: {e}");
            ok = false;
        }
    }
    for missing in catalog.missing_required() {
        println!("missing required topic: {missing}");
        ok = false;
    }
    println!("{}", if ok { "catalog ok" } else { "catalog invalid" });
    Ok(ok)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    let result = async {
        let mut config = load_config(cli.config.as_deref())?;
        match cli.command {
            Command::Serve {
                listen,
                store,
                seed,
                attachments,
            } => {
                config.listen = listen.unwrap_or(config.listen);
                config.store_path = store.unwrap_or(config.store_path);
                config.seed = seed.unwrap_or(config.seed);
                config.attachment_dir = attachments.unwrap_or(config.attachment_dir);
                etbot_gateway::server::serve(config).await?;
                Ok(true)
            }
            Command::Replay { transcripts, seed, log } => {
                config.seed = seed.unwrap_or(config.seed);
                replay(config, &transcripts, log.as_deref())
            }
            Command::Analyze { log, phases, format } => analyze(&log, phases.as_deref(), format).map(|_| true),
            Command::ValidateCatalog { file } => validate_catalog(&file),
        }
    }
    .await;
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
