mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smmil::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "smmil", version, about = "Semi-supervised multimodal MIL: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(Base),
    /// Supervised training on the labeled split.
    Train {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Curriculum pseudo-labeling over the unlabeled split.
    Ssl {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        fit: FitArgs,
        /// Train on labeled bags only (no pseudo-labeling).
        #[arg(long)]
        ablate_ssl: bool,
    },
    /// Write class probabilities for one split as CSV.
    Predict {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Balanced accuracy, screening AUROC/AUPR with bootstrap intervals, confusion matrix.
    Eval {
        #[command(flatten)]
        base: Base,
        /// Prediction CSV; alternatively give --data and --checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArgs,
        /// Bootstrap resamples.
        #[arg(long)]
        n_boot: Option<usize>,
    },
}

#[derive(Args)]
struct Base {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    /// Drop the doppler branch.
    #[arg(long)]
    ablate_doppler: bool,
    /// Weight of the attention-supervision loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Relevance temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

fn base_config(base: &Base) -> smmil::Result<RunConfig> {
    let mut cfg = match &base.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if base.seed.is_some() {
        cfg.seed = base.seed;
    }
    if base.out.is_some() {
        cfg.paths.out = base.out.clone();
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArg) {
    if data.data.is_some() {
        cfg.paths.data = data.data.clone();
    }
}

fn apply_model(cfg: &mut RunConfig, model: &ModelArgs) {
    if model.checkpoint.is_some() {
        cfg.paths.checkpoint = model.checkpoint.clone();
    }
    if let Some(split) = &model.split {
        cfg.eval.split = split.clone();
    }
}

fn apply_fit(cfg: &mut RunConfig, fit: &FitArgs) {
    if fit.ablate_doppler {
        cfg.model.use_doppler = false;
    }
    if let Some(v) = fit.lambda {
        cfg.model.lambda = v;
    }
    if let Some(v) = fit.tau {
        cfg.model.tau = v;
    }
    if let Some(v) = fit.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = fit.weight_decay {
        cfg.train.weight_decay = v;
    }
}

fn run(cli: Cli) -> smmil::Result<()> {
    match cli.command {
        Command::GenData(base) => commands::gen_data(base_config(&base)?.resolve("gen-data")?),
        Command::Train { base, data, fit } => {
            let mut cfg = base_config(&base)?;
            apply_data(&mut cfg, &data);
            apply_fit(&mut cfg, &fit);
            commands::train(cfg.resolve("train")?)
        }
        Command::Ssl {
            base,
            data,
            fit,
            ablate_ssl,
        } => {
            let mut cfg = base_config(&base)?;
            apply_data(&mut cfg, &data);
            apply_fit(&mut cfg, &fit);
            cfg.ablate_ssl |= ablate_ssl;
            commands::ssl(cfg.resolve("ssl")?)
        }
        Command::Predict { base, data, model } => {
            let mut cfg = base_config(&base)?;
            apply_data(&mut cfg, &data);
            apply_model(&mut cfg, &model);
            commands::predict(cfg.resolve("predict")?)
        }
        Command::Eval {
            base,
            predictions,
            data,
            model,
            n_boot,
        } => {
            let mut cfg = base_config(&base)?;
            apply_data(&mut cfg, &data);
            apply_model(&mut cfg, &model);
            if predictions.is_some() {
                cfg.paths.predictions = predictions;
            }
            if let Some(n) = n_boot {
                cfg.eval.n_boot = n;
            }
            commands::eval(cfg.resolve("eval")?)
        }
    }
}

/// 1: usage or configuration, 2: data or file format, 3: numeric failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Format { .. }
        | Error::Data { .. }
        | Error::EmptyBag(_)
        | Error::Io { .. }
        | Error::Contract(_)
        | Error::Dimension { .. }
        | Error::Metric(_) => 2,
        Error::Numeric(_) | Error::Domain { .. } => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
