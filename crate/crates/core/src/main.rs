use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use semedit::pipeline::commands::{self, Report, RunOptions};
use semedit::pipeline::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "semedit",
    version,
    about = "Inversion-based semantic editing at desk scale"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the inversion seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write per-step mask images during `edit`.
    #[arg(long, global = true)]
    dump_masks: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert the input and store the latent cache.
    Invert,
    /// Edit the input, reusing a matching latent cache.
    Edit,
    /// Edit once per seed in `experiment.seeds`.
    Variations,
    /// Projection of the edit onto its top-scale direction across scales.
    SweepScale,
    /// Endpoint error against the closed-form solution across step counts.
    Convergence,
    /// IoU of attention, noise and intersection masks on the shape dataset.
    EvalMasks,
    /// Model-evaluation counts and wall time of one inversion and edit.
    BenchEvals,
    /// Train the tiny attention denoiser on the shape dataset.
    TrainTiny {
        /// Print the mean loss every N steps (0 disables).
        #[arg(long, default_value_t = 500)]
        log_every: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<Report> {
    let path = cli.config.context("--config is required")?;
    let mut cfg =
        RunConfig::load(&path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let opts = RunOptions {
        out: cli.out,
        dump_masks: cli.dump_masks,
    };
    // validate before touching the output directory
    if matches!(cli.command, Command::TrainTiny { .. }) {
        cfg.build_schedule()?;
    } else {
        cfg.resolve()?;
    }
    std::fs::create_dir_all(&opts.out)
        .with_context(|| format!("creating {}", opts.out.display()))?;
    let report = match cli.command {
        Command::Invert => commands::cmd_invert(&cfg, &opts)?.0,
        Command::Edit => commands::cmd_edit(&cfg, &opts)?.report,
        Command::Variations => commands::cmd_variations(&cfg, &opts)?.0,
        Command::SweepScale => commands::cmd_sweep_scale(&cfg, &opts)?.0,
        Command::Convergence => commands::cmd_convergence(&cfg, &opts)?.0,
        Command::EvalMasks => commands::cmd_eval_masks(&cfg, &opts)?.0,
        Command::BenchEvals => commands::cmd_bench_evals(&cfg, &opts)?.0,
        Command::TrainTiny { log_every } => commands::cmd_train_tiny(&cfg, log_every)?,
    };
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            for l in &report.lines {
                println!("{l}");
            }
            match report.failure {
                None => ExitCode::SUCCESS,
                Some(msg) => {
                    eprintln!("assertion failed: {msg}");
                    ExitCode::from(2)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
