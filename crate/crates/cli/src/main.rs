//! `evoarch` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use evoarch_core::analytics::{self, Taxonomy, TreeFormat};
use evoarch_core::cognition::CognitionBase;
use evoarch_core::config::CampaignConfig;
use evoarch_core::orchestrator::{Engine, COGNITION_FILE};
use evoarch_core::store::{Stage, HEADER_FILE};

#[derive(Parser)]
#[command(name = "evoarch", version, about = "Evolutionary architecture search campaigns")]
struct Cli {
    /// Campaign configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run exploration cycles until the stop condition holds.
    Run {
        /// Campaign directory, created on first use.
        dir: PathBuf,
    },
    /// Re-train promotable records at verification scale.
    Verify {
        dir: PathBuf,
        /// Verify at most this many records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write the lineage tree.
    ExportTree {
        dir: PathBuf,
        #[arg(long, default_value = "dot")]
        format: String,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print an analytics report as tab-separated text.
    Report {
        kind: ReportKind,
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "exploration")]
        stage: StageArg,
        /// Taxonomy file replacing the bundled one.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Add cognition documents to a campaign's knowledge base.
    IngestCognition {
        docs: PathBuf,
        #[arg(long)]
        campaign: PathBuf,
    },
    /// Run a short hermetic campaign twice and check it replays exactly.
    Selftest {
        #[arg(long, default_value_t = 24)]
        cycles: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Scaling,
    Components,
    Provenance,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Exploration,
    Verification,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Exploration => Stage::Exploration,
            StageArg::Verification => Stage::Verification,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<CampaignConfig> {
    match path {
        Some(p) => CampaignConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(CampaignConfig::default()),
    }
}

fn open_existing(config: CampaignConfig, dir: &Path) -> Result<Engine> {
    ensure!(
        dir.join(HEADER_FILE).exists(),
        "{} is not a campaign directory",
        dir.display()
    );
    Engine::open_or_create(config, dir).with_context(|| format!("opening {}", dir.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn selftest(cycles: u64, workers: usize) -> Result<()> {
    let mut config = CampaignConfig::default();
    config.stop.max_accepted = None;
    config.stop.max_cycles = Some(cycles);
    let run = |workers: usize| -> Result<(String, evoarch_core::orchestrator::CampaignSummary)> {
        let mut c = config.clone();
        c.workers = workers;
        let engine = Engine::hermetic(c, CognitionBase::new(config.embedding_dim))?;
        let summary = engine.run_campaign()?;
        Ok((engine.store().dump_jsonl()?, summary))
    };
    let (a, summary) = run(workers)?;
    let (b, _) = run(1)?;
    let mut failed = false;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        failed |= !ok;
    };
    check("every cycle recorded exactly once", summary.conserved && summary.cycles == cycles);
    check("no worker faults", summary.worker_faults == 0);
    check("replay is byte-identical across worker counts", a == b);
    check("at least one accepted candidate", summary.accepted_total > 1);
    if failed {
        bail!("selftest failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { dir } => {
            let engine = Engine::open_or_create(load_config(cli.config.as_deref())?, &dir)?;
            let summary = engine.run_campaign()?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Verify { dir, limit } => {
            let engine = open_existing(load_config(cli.config.as_deref())?, &dir)?;
            let summary = engine.run_verification(limit)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::ExportTree { dir, format, out } => {
            let format: TreeFormat = format.parse()?;
            let engine = open_existing(load_config(cli.config.as_deref())?, &dir)?;
            let export = engine.store().read(|a| analytics::export_tree(a, format))?;
            emit(out.as_deref(), &export.text)?;
            eprintln!("{} nodes, {} edges, {} roots", export.nodes, export.edges, export.roots);
        }
        Command::Report {
            kind,
            dir,
            stage,
            taxonomy,
        } => {
            let engine = open_existing(load_config(cli.config.as_deref())?, &dir)?;
            let archive = engine.store().snapshot();
            if let ReportKind::Scaling = kind {
                let report = analytics::report_scaling(archive.records(), stage.into());
                print!("{}", report.to_tsv());
                return Ok(());
            }
            let taxonomy = match taxonomy {
                Some(p) => Taxonomy::parse(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => Taxonomy::builtin(),
            };
            let records: Vec<_> = archive
                .records()
                .iter()
                .filter(|r| r.body.stage == Stage::Exploration && r.body.parent_id.is_some())
                .cloned()
                .collect();
            let labels = analytics::classify_motivations(
                engine.gateway(),
                engine.prompts(),
                &taxonomy,
                &archive,
                engine.cognitions(),
                engine.gateway().as_ref(),
                &records,
            );
            match kind {
                ReportKind::Components => print!("{}", analytics::component_histogram(&labels).to_tsv()),
                _ => print!("{}", analytics::provenance_table(&labels).to_tsv()),
            }
        }
        Command::IngestCognition { docs, campaign } => {
            let config = load_config(cli.config.as_deref())?;
            let mut engine = open_existing(config, &campaign)?;
            let mut base = engine.cognitions().clone();
            let out = base.ingest_dir(&docs, engine.gateway().as_ref())?;
            engine.set_cognitions(base)?;
            println!(
                "added {} entries, skipped {} duplicates; {} in {}",
                out.added,
                out.skipped_duplicates,
                engine.cognitions().len(),
                campaign.join(COGNITION_FILE).display()
            );
        }
        Command::Selftest { cycles, workers } => selftest(cycles, workers)?,
    }
    Ok(())
}
