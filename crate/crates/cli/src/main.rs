use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pnpttt_cli::commands;
use pnpttt_cli::config::ExperimentConfig;
use pnpttt_cli::{CliError, Result};
use pnpttt_core::experiment::PriorLabel;

#[derive(Parser)]
#[command(name = "pnpttt", version, about = "Plug-and-play reconstruction with test-time training")]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets every seed (data, mask, init, measurement).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prior {
    Natural,
    Matched,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom and texture training sets plus test phantoms.
    GenData {
        #[arg(long)]
        size: Option<usize>,
        /// Images per training set.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Train a denoiser prior on a dataset.
    TrainPrior {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// PnP reconstruction with a fixed prior.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Label written to the result rows.
        #[arg(long, value_enum, default_value = "natural")]
        prior: Prior,
        /// Also write 8-bit PGM previews.
        #[arg(long)]
        pgm: bool,
    },
    /// Test-time training of a prior on each test measurement.
    Ttt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        num_iter: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        record_every: Option<usize>,
        /// Directory for the adapted checkpoints.
        #[arg(long)]
        save_adapted: Option<PathBuf>,
    },
    /// Natural, matched and adapted priors over every ratio and test image.
    Sweep,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds.set_all(seed);
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenData { size, count, test_count } => {
            cfg.image_size = size.unwrap_or(cfg.image_size);
            cfg.num_train_images = count.unwrap_or(cfg.num_train_images);
            cfg.num_test_images = test_count.unwrap_or(cfg.num_test_images);
        }
        Command::TrainPrior { epochs, .. } => cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs),
        Command::Reconstruct { ratios, .. } => {
            if let Some(r) = ratios {
                cfg.cs_ratios = r.clone();
            }
        }
        Command::Ttt { ratios, num_iter, lr, record_every, .. } => {
            if let Some(r) = ratios {
                cfg.cs_ratios = r.clone();
            }
            cfg.ttt.num_iter = num_iter.unwrap_or(cfg.ttt.num_iter);
            cfg.ttt.lr = lr.unwrap_or(cfg.ttt.lr);
            cfg.ttt.record_every = record_every.unwrap_or(cfg.ttt.record_every);
        }
        Command::Sweep => {}
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::GenData { .. } => {
            commands::gen_data(&cfg, &out)?;
        }
        Command::TrainPrior { data, output, .. } => {
            commands::train_prior(&cfg, &data, &output)?;
        }
        Command::Reconstruct { checkpoint, data, prior, pgm, .. } => {
            let label = match prior {
                Prior::Natural => PriorLabel::Natural,
                Prior::Matched => PriorLabel::Matched,
            };
            commands::reconstruct(&cfg, &checkpoint, data.as_deref(), label, &out, pgm)?;
        }
        Command::Ttt { checkpoint, data, save_adapted, .. } => {
            let o = commands::ttt(&cfg, &checkpoint, data.as_deref(), &out, save_adapted.as_deref())?;
            for (ratio, image, msg) in &o.failures {
                eprintln!("failed: ratio {ratio}, image {image}: {msg}");
            }
        }
        Command::Sweep => {
            let o = commands::sweep(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&o.summary.table)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
