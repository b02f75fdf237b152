//! `disent`: generate corpora, train, evaluate, export and run the ablation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commands::Model;
use config::ExperimentConfig;
use disent::Error;

#[derive(Parser)]
#[command(name = "disent", version, about = "Pose/identity disentanglement on synthetic faces")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set stage2.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the base and target corpora.
    Generate,
    /// Train one model variant.
    Train {
        /// 2, 3, ss, ssft or l2.
        #[arg(long, value_parser = parse_stage)]
        stage: Model,
    },
    /// Pose-binned rank-1 and the pose-leakage probe on the test identities.
    Eval {
        #[arg(long, value_enum, default_value = "stage3")]
        model: Model,
        /// Evaluate this checkpoint file instead of a run model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the five-row ladder over the configured seeds.
    Ablate,
    /// Write identity and non-identity embeddings of the test identities.
    Export {
        #[arg(long, value_enum, default_value = "stage3")]
        model: Model,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every training objective.
    Gradcheck,
    /// Render one random identity across a yaw sweep as PGM images.
    Render {
        #[arg(long, default_value_t = 0)]
        identity_seed: u64,
        #[arg(long, default_value_t = 15.0)]
        step: f64,
    },
}

fn parse_stage(s: &str) -> Result<Model, String> {
    match s {
        "2" => Ok(Model::Stage2),
        "3" => Ok(Model::Stage3),
        "ss" => Ok(Model::Ss),
        "ssft" => Ok(Model::Ssft),
        "l2" => Ok(Model::L2),
        other => Err(format!("unknown stage `{other}` (expected 2, 3, ss, ssft or l2)")),
    }
}

/// Exit code and short kind for the one-line error report.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) => (2, "config"),
        Error::Io(_) | Error::Container(_) => (3, "io"),
        Error::NonFiniteGradient { .. } | Error::Divergence { .. } => (4, "nan"),
        _ => (1, "data"),
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Generate => commands::generate(cfg)?,
        Command::Train { stage } => commands::train(cfg, stage)?,
        Command::Eval { model, checkpoint } => commands::eval(cfg, model, checkpoint.as_deref())?,
        Command::Ablate => commands::ablate(cfg)?,
        Command::Export { model, checkpoint } => commands::export(cfg, model, checkpoint.as_deref())?,
        Command::Gradcheck => return commands::gradcheck(cfg),
        Command::Render { identity_seed, step } => commands::render(cfg, identity_seed, step)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error kind=gradcheck msg=\"relative error above tolerance\"");
            ExitCode::from(1)
        }
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("error kind={kind} msg={:?}", e.to_string());
            ExitCode::from(code)
        }
    }
}
