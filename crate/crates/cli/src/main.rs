use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ncdss_cli::pipeline::{self, StageCache};
use ncdss_cli::{report, RunConfig};

/// Novel class discovery on synthetic segmentation benchmarks.
#[derive(Parser)]
#[command(name = "ncdss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate base, novel and val splits.
    Synth {
        /// Config file; defaults apply to unset keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every configured seed.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage cache location [default: <bench>/cache].
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        no_cache: bool,
        /// Comma-separated seeds, overriding `run.seeds`.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Ablation table and sweep curves over run directories.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a benchmark split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    })
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref())?;
            pipeline::cmd_synth(&cfg, &out)?;
        }
        Command::Run {
            config,
            bench,
            out,
            cache_dir,
            no_cache,
            seeds,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seeds {
                cfg.set("run.seeds", &s)?;
            }
            if no_cache {
                cfg.cache = false;
            }
            cfg.output_dir = Some(out.clone());
            let cache = cfg.cache.then(|| StageCache {
                dir: cache_dir.unwrap_or_else(|| bench.join("cache")),
            });
            let results = pipeline::cmd_run(&cfg, &bench, &out, cache.as_ref())?;
            print!("{}", pipeline::summary_csv(&results));
        }
        Command::Report { runs, out } => {
            let r = report::cmd_report(&runs, out.as_deref())?;
            print!("{}", r.to_text());
        }
        Command::Eval {
            config,
            bench,
            model,
            split,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let r = pipeline::cmd_eval(&cfg, &bench, &model, &split)?;
            print!("{}", r.to_text());
            if let Some(path) = out {
                std::fs::write(&path, r.to_text()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NCDSS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
