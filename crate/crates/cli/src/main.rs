use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use volgibbs::hedge::Strategy;
use volgibbs::pipeline::{self, PipelineConfig};

/// Swaption volatility cube imputation, SABR calibration and hedging.
#[derive(Parser, Debug)]
#[command(name = "volgibbs", version)]
struct Cli {
    /// Pipeline configuration (JSON). Defaults to the chosen profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in profile used when no --config is given: desk or full.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,

    /// Master seed; the training, sampling and hedging seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the synthetic generators and write training and held-out cubes.
    Synth {
        /// Number of training cubes (overrides the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the VAE on a training-set directory.
    Train {
        /// Training-set directory (default: <out>/training_set).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
    },
    /// Impute the missing quotes of a cube CSV.
    Impute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        /// Mask a fully observed cube at this rate first and score the
        /// imputation against the hidden quotes.
        #[arg(long)]
        mask_rate: Option<f64>,
        #[arg(long)]
        chain: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
    },
    /// Calibrate shifted SABR on every slice of a cube CSV.
    Calibrate {
        #[arg(long)]
        cube: PathBuf,
        /// Forward matrix CSV; without it every node uses the default forward.
        #[arg(long)]
        forwards: Option<PathBuf>,
    },
    /// Run the delta-hedging study.
    Hedge {
        /// Trained model, required by the imputation strategy.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated strategies: theoretical, imputation, interpolation.
        #[arg(long, value_delimiter = ',', default_value = "theoretical,imputation,interpolation")]
        strategies: Vec<Strategy>,
        #[arg(long)]
        paths: Option<usize>,
        /// Also write per-rebalance ledgers for the first paths.
        #[arg(long)]
        ledger: bool,
    },
    /// Latent activity and latent trace of a trained model.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory (default: <out>/training_set).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::read(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::profile(&cli.profile)?,
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = load_config(&cli)?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no command given (expected one of synth, train, impute, calibrate, hedge, diagnose)");
    };
    let default_data = cfg.out_dir.join("training_set");
    let summary = match command {
        Command::Synth { count } => {
            if let Some(n) = count {
                cfg.n_train = n;
            }
            pipeline::cmd_synth(&cfg)?
        }
        Command::Train {
            data,
            epochs,
            latent_dim,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(d) = latent_dim {
                cfg.latent_dim = d;
            }
            pipeline::cmd_train(&cfg, &data.unwrap_or(default_data))?
        }
        Command::Impute {
            model,
            cube,
            mask_rate,
            chain,
            burn_in,
        } => {
            if let Some(c) = chain {
                cfg.gibbs.chain_length = c;
            }
            if let Some(b) = burn_in {
                cfg.gibbs.burn_in = b;
            }
            pipeline::cmd_impute(&cfg, &model, &cube, mask_rate)?
        }
        Command::Calibrate { cube, forwards } => pipeline::cmd_calibrate(&cfg, &cube, forwards.as_deref())?,
        Command::Hedge {
            model,
            strategies,
            paths,
            ledger,
        } => {
            if let Some(n) = paths {
                cfg.hedge.n_paths = n;
            }
            pipeline::cmd_hedge(&cfg, model.as_deref(), &strategies, ledger)?.0
        }
        Command::Diagnose { model, data } => pipeline::cmd_diagnose(&cfg, &model, &data.unwrap_or(default_data))?,
    };
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
