//! Command-line shell over the `roadfusion` pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use roadfusion::config::LoadedConfig;
use roadfusion::pipeline::{report, Run, RunOptions};
use roadfusion::toy::{write_toy_dataset, ToySpec};
use roadfusion::Exec;

#[derive(Parser)]
#[command(name = "roadfusion", version, about = "Pavement defect detection with synthesized anomalies")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads; 1 runs sequentially. Defaults to the core count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for the split, the anomaly pool and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluate even if the checkpoint was trained under another config.
    #[arg(long, global = true)]
    force: bool,
    /// Write heat-map overlays next to the raw score maps.
    #[arg(long, global = true)]
    emit_overlays: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset and synthesize the anomaly pool.
    Generate,
    /// Train adaptors and discriminator.
    Train,
    /// Write anomaly maps for the test split or the given images.
    Infer { images: Vec<PathBuf> },
    /// Compute all metrics on the test split.
    Evaluate,
    /// Tabulate evaluated runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the normalized config with the origin of every value.
    ValidateConfig,
    /// Write a procedurally textured toy corpus.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        normals: usize,
        #[arg(long, default_value_t = 20)]
        defects: usize,
    },
}

fn load_config(g: &Global) -> Result<LoadedConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("dataset.seed={s}"));
        overrides.push(format!("train.seed={s}"));
    }
    let cfg = match &g.config {
        Some(p) => LoadedConfig::load(p, &overrides),
        None => LoadedConfig::from_str("", &overrides),
    };
    Ok(cfg?)
}

fn exec(jobs: Option<usize>) -> Result<Exec> {
    match jobs {
        Some(0) => anyhow::bail!("--jobs must be at least 1"),
        Some(1) => Ok(Exec::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the worker pool")?;
            Ok(Exec::Parallel)
        }
        None => Ok(Exec::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let opts = || -> Result<RunOptions> {
        Ok(RunOptions {
            exec: exec(g.jobs)?,
            force: g.force,
            emit_overlays: g.emit_overlays,
        })
    };
    match cli.command {
        Command::ValidateConfig => print!("{}", load_config(g)?.echo()),
        Command::ToyData {
            out,
            size,
            normals,
            defects,
        } => {
            let spec = ToySpec {
                size,
                normals,
                defects,
                seed: g.seed.unwrap_or(0),
            };
            write_toy_dataset(&out, &spec)?;
            println!("wrote {} images to {}", normals + defects, out.display());
        }
        Command::Report { runs } => print!("{}", report(&runs)?),
        Command::Generate => {
            let run = Run::new(load_config(g)?.config, opts()?);
            let pool = run.generate()?;
            println!(
                "generated {} samples ({} rejected) in {}",
                pool.entries.len(),
                pool.rejections,
                run.pool_dir().display()
            );
        }
        Command::Train => {
            let run = Run::new(load_config(g)?.config, opts()?);
            let s = run.train()?;
            println!(
                "final loss {:.6}; checkpoint {} ({})",
                s.epoch_losses.last().copied().unwrap_or(f64::NAN),
                run.model_path().display(),
                s.checkpoint_digest
            );
        }
        Command::Infer { images } => {
            let run = Run::new(load_config(g)?.config, opts()?);
            let scores = run.infer(&images)?;
            println!("scored {} images into {}", scores.len(), run.dir.join("infer").display());
        }
        Command::Evaluate => {
            let run = Run::new(load_config(g)?.config, opts()?);
            print!("{}", run.evaluate()?.to_key_value());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
