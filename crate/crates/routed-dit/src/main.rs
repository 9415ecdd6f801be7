use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use routed_dit::commands::{self, SampleArgs};
use routed_dit::config::RunConfig;

#[derive(Parser)]
#[command(name = "routed-dit", about = "Routed diffusion-transformer experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, logging the ratio trajectory and writing checkpoints.
    Train {
        /// TOML config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        target_ratio: Option<f64>,
        #[arg(long)]
        regions: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample images from a checkpoint with the snapped ratio table.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<String>,
        /// Ignore the ratio table and sample from the dense model.
        #[arg(long)]
        dense: bool,
    },
    /// Wall-clock routing benchmark.
    Bench {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.3,0.5")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value = "run")]
        out: String,
    },
    /// Emit router maps and the layer x region ratio heatmap.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<String>,
    },
    /// Print a checkpoint's manifest.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cmd: Cmd) -> routed_dit::Result<()> {
    match cmd {
        Cmd::Train { config, seed, out, target_ratio, regions, steps } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(r) = target_ratio {
                cfg.model.target_ratio = r;
            }
            if let Some(r) = regions {
                cfg.model.regions = r;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            commands::cmd_train(&cfg)
        }
        Cmd::Sample { checkpoint, class, count, seed, out, dense } => {
            commands::cmd_sample(&SampleArgs { checkpoint, class, count, seed, out, dense })
        }
        Cmd::Bench { n, d, ratios, reps, out } => {
            commands::cmd_bench(n, d, &ratios, reps, std::path::Path::new(&out))
        }
        Cmd::Viz { checkpoint, out } => commands::cmd_viz(&checkpoint, out.as_deref()),
        Cmd::Inspect { checkpoint } => commands::cmd_inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
