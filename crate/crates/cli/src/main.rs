use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use condseg::data::{generate_synthetic_dataset, write_acdc_layout, SyntheticConfig};
use condseg::evaluation::aggregate;
use condseg::experiment::{
    evaluate_cell, load_dataset, prepare_data, report, run_cell, run_grid, Cell, CellFilter,
    CellStatus, ExperimentConfig,
};
use condseg::networks::{Architecture, Variant};
use condseg::{Error, Result};

#[derive(Parser)]
#[command(name = "condseg", version, about = "Conditioned segmentation experiment driver")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output` in the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Global seed, overriding `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a configuration key, e.g. `--set train.max_epochs=30`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess the dataset into the slice cache.
    PrepareData,
    /// Write a synthetic dataset in ACDC layout.
    SynthData {
        /// Destination root (defaults to `data.root`).
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Train and evaluate a single grid cell.
    Train {
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Run every configured cell, skipping completed ones.
    Grid {
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Filter, e.g. `arch=unet,variant=baseline|film_decoder,repeat=0`.
        #[arg(long)]
        cells: Option<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Re-evaluate a trained cell on its test subjects.
    Evaluate {
        #[command(flatten)]
        cell: CellArgs,
        /// Permute conditioning vectors across test volumes with this seed.
        #[arg(long, value_name = "SEED")]
        shuffle_z: Option<u64>,
    },
    /// Write result tables from completed cells.
    Report,
}

#[derive(Args)]
struct CellArgs {
    #[arg(long)]
    arch: Architecture,
    #[arg(long)]
    variant: Variant,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    repeat: usize,
}

impl CellArgs {
    fn cell(&self) -> Cell {
        Cell {
            architecture: self.arch,
            variant: self.variant,
            fraction: self.fraction,
            repeat: self.repeat,
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.output {
        cfg.output = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::PrepareData => {
            let r = prepare_data(&cfg)?;
            for (subject, msg) in &r.failed {
                eprintln!("warning: {subject}: {msg}");
            }
            println!(
                "prepared {} subjects ({} reused, {} failed): {} volumes, {} slices -> {}",
                r.processed.len(),
                r.skipped.len(),
                r.failed.len(),
                r.volumes,
                r.slices,
                r.manifest.display()
            );
        }
        Command::SynthData { root, subjects } => {
            let root = root.unwrap_or_else(|| cfg.data.root.clone());
            let syn = SyntheticConfig {
                n_subjects: subjects.unwrap_or(cfg.data.synthetic.n_subjects),
                seed: cli.common.seed.unwrap_or(cfg.data.synthetic.seed),
                ..cfg.data.synthetic.clone()
            };
            let written = write_acdc_layout(&root, &generate_synthetic_dataset(&syn))?;
            println!("wrote {} files under {}", written.len(), root.display());
        }
        Command::Train { cell } => {
            let cell = cell.cell();
            let dataset = load_dataset(&cfg)?;
            let plans = condseg::data::make_splits(
                &dataset.subjects(),
                cfg.grid.repeats.max(cell.repeat + 1),
                cfg.grid.split_ratios,
                cfg.seed,
            )?;
            match run_cell(&cfg, &dataset, &plans, &cell, true)? {
                CellStatus::Completed(s) => println!(
                    "{}: mean Dice {:.4} ± {:.4} over {} volumes (best epoch {})",
                    s.run_id, s.mean_dice, s.std_dice, s.test_volumes, s.best_epoch
                ),
                CellStatus::Skipped(s) => {
                    println!("{}: already complete, mean Dice {:.4}", s.run_id, s.mean_dice)
                }
                CellStatus::Failed(msg) => return Err(Error::Input(msg)),
            }
        }
        Command::Grid { jobs, cells, quiet } => {
            let filter = CellFilter::parse(cells.as_deref().unwrap_or(""))?;
            let s = run_grid(&cfg, &filter, jobs, !quiet)?;
            println!(
                "grid: {} completed, {} skipped, {} failed",
                s.completed.len(),
                s.skipped.len(),
                s.failed.len()
            );
            for (id, msg) in &s.failed {
                eprintln!("failed: {id}: {msg}");
            }
            if !s.failed.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate { cell, shuffle_z } => {
            let cell = cell.cell();
            let dataset = load_dataset(&cfg)?;
            let records = evaluate_cell(&cfg, &dataset, &cell, shuffle_z)?;
            println!("subject,phase,rv,myo,lv,mean_dice");
            for r in &records {
                println!(
                    "{},{},{:.4},{:.4},{:.4},{:.4}",
                    r.subject_id,
                    r.phase.as_str(),
                    r.rv,
                    r.myo,
                    r.lv,
                    r.mean_dice
                );
            }
            let (m, sd) = aggregate(&records)?;
            println!("# {cell}: mean Dice {m:.4} ± {sd:.4}");
        }
        Command::Report => {
            let s = report(&cfg.output)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            for f in &s.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
