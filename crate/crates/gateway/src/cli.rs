use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hilo_core::baselines::Strategy;
use hilo_core::coordinator::write_traces;
use hilo_core::datamodel::{generate_dataset, save_dataset, DatasetSpec};
use hilo_core::engine::{load_scenes, run_with_strategy, Engine};
use hilo_core::{ExperimentConfig, MetricsReport};

#[derive(Debug, Parser)]
#[command(name = "hilo", version, about = "Cloud-fog video analytics experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and write it as JSON lines.
    GenerateDataset {
        /// Dataset spec as JSON; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment; prints the metrics JSON.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config strategy, by name.
        #[arg(long)]
        strategy: Option<String>,
        /// Directory for metrics.json and traces.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every strategy on the same dataset and print a table.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Print a table from saved metrics files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Start the HTTP API.
    Serve {
        #[arg(long, env = "HILO_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Seed for datasets and experiments that do not set one.
        #[arg(long)]
        seed: Option<u64>,
    },
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de)
                .map_err(|e| anyhow::anyhow!("invalid config at `{}`: {}", e.path(), e.inner()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Err(errs) = cfg.validate() {
        let lines: Vec<String> = errs.iter().map(|e| format!("  {e}")).collect();
        bail!("invalid config:\n{}", lines.join("\n"));
    }
    Ok(cfg)
}

/// One row per report: normalized bandwidth, F1, cloud cost and p50 latency.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>10} {:>7} {:>9} {:>9}",
        "strategy", "bandwidth", "f1", "cost", "p50_s"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<14} {:>10.4} {:>7.3} {:>9.4} {:>9.3}",
            r.strategy, r.normalized_bandwidth, r.f1, r.cloud_cost, r.latency.p50_s
        );
    }
    s
}

pub fn compare(cfg: &ExperimentConfig) -> Result<Vec<MetricsReport>> {
    let scenes = load_scenes(&cfg.dataset, cfg.seed)?;
    Strategy::all()
        .into_iter()
        .map(|s| Ok(run_with_strategy(cfg, &scenes, s)?.report))
        .collect()
}

pub fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateDataset { spec, seed, out } => {
            let spec: DatasetSpec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => DatasetSpec::default(),
            };
            let scenes = generate_dataset(&spec, seed)?;
            save_dataset(&scenes, &out)?;
            eprintln!("wrote {} scene(s) to {}", scenes.len(), out.display());
        }
        Command::Run {
            config,
            seed,
            strategy,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(name) = strategy {
                cfg.strategy = Strategy::from_name(&name).with_context(|| format!("unknown strategy `{name}`"))?;
            }
            let output = Engine::from_config(cfg)?.run()?;
            let metrics = serde_json::to_string_pretty(&output.report)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("metrics.json"), &metrics)?;
                write_traces(&output.traces, BufWriter::new(File::create(dir.join("traces.jsonl"))?))?;
            }
            println!("{metrics}");
        }
        Command::Compare { config, seed, json } => {
            let reports = compare(&load_config(config.as_deref(), seed)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                print!("{}", format_table(&reports));
            }
        }
        Command::Report { metrics } => {
            let reports = metrics
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<MetricsReport>>>()?;
            print!("{}", format_table(&reports));
        }
        Command::Serve { port, host, seed } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::serve(&host, port, seed))?;
        }
    }
    Ok(())
}
