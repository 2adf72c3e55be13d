//! `curvrestore`: runs the restoration pipeline stage by stage.
//!
//! Settings are layered: built-in defaults, then the `--config` TOML file,
//! then `CURVRESTORE_OUT` for the output root, then command-line flags.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use curvrestore::pipeline::{
    cmd_landscape, cmd_report, cmd_restore, cmd_scenario, CheckpointLabel, LandscapeData, RestoreOverrides, RunConfig,
    OUTPUT_ENV,
};
use curvrestore::Error;

#[derive(Debug, Parser)]
#[command(name = "curvrestore", version, about = "Curvature-aware restoration on micro adapter models")]
struct Cli {
    /// Run configuration (TOML). Defaults apply to anything it omits.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root directory for runs. Overrides `output_dir` in the config.
    #[arg(long, global = true, env = OUTPUT_ENV, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Run directory. Defaults to `<out>/run-<config hash prefix>`.
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,

    /// Global seed for restoration, basin and trajectory streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for grid evaluation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate the corpus and train the tuned adapters.
    Scenario,
    /// Run the influence-update restoration from the tuned checkpoint.
    Restore {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Retain-loss budget.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Step sizes to try each iteration, comma separated.
        #[arg(long, value_delimiter = ',')]
        eta_grid: Option<Vec<f64>>,
    },
    /// Evaluate loss grids, cross-sections and StructDiff.
    Landscape {
        #[arg(long, value_delimiter = ',', default_value = "base,tuned")]
        checkpoints: Vec<Ckpt>,
        #[arg(long, value_delimiter = ',', default_value = "forget,retain")]
        datasets: Vec<Data>,
    },
    /// Consolidated analysis of a restored run.
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Ckpt {
    Base,
    Tuned,
    Restored,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Data {
    Forget,
    Retain,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let run_dir = cli.run_dir.clone().unwrap_or_else(|| cfg.default_run_dir());
    let threads = cli.threads as usize;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Scenario => {
            let out = cmd_scenario(&cfg, &run_dir)?;
            print!("{}", out.summary.to_text(&out.stage.manifest.config_hash));
            eprintln!("wrote {}", out.stage.path().display());
        }
        Command::Restore {
            iterations,
            lambda,
            epsilon,
            eta_grid,
        } => {
            let ov = RestoreOverrides {
                iterations,
                lambda,
                epsilon,
                eta_grid,
            };
            let out = cmd_restore(&run_dir, &ov)?;
            print!("{}", out.summary.to_text(&out.stage.manifest.config_hash));
            eprintln!("wrote {}", out.stage.path().display());
        }
        Command::Landscape { checkpoints, datasets } => {
            let checkpoints: Vec<CheckpointLabel> = checkpoints
                .into_iter()
                .map(|c| match c {
                    Ckpt::Base => CheckpointLabel::Base,
                    Ckpt::Tuned => CheckpointLabel::Tuned,
                    Ckpt::Restored => CheckpointLabel::Restored,
                })
                .collect();
            let datasets: Vec<LandscapeData> = datasets
                .into_iter()
                .map(|d| match d {
                    Data::Forget => LandscapeData::Forget,
                    Data::Retain => LandscapeData::Retain,
                })
                .collect();
            let out = cmd_landscape(&run_dir, &checkpoints, &datasets, threads)?;
            println!("dataset\ta\tb\tstruct_diff");
            for r in &out.struct_diffs {
                println!("{}\t{}\t{}\t{:?}", r.dataset, r.a, r.b, r.struct_diff);
            }
            eprintln!("wrote {}", out.stage.path().display());
        }
        Command::Report => {
            let out = cmd_report(&run_dir)?;
            print!("{}", out.summary.render());
            let how = if out.cached { "reused" } else { "wrote" };
            eprintln!("{how} {}", out.stage.path().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.downcast_ref::<Error>() {
                Some(Error::ConstraintBlockedAllIterations) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
