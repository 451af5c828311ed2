use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clickprompt::cli::{self, Overrides, RunConfig};
use clickprompt::ctr::Backbone;
use clickprompt::train::Mode;

#[derive(Parser)]
#[command(version, about = "Soft prompts from CTR models for a small transformer encoder")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    backbone: Option<Backbone>,
    /// Prompts per layer.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    no_layerwise: bool,
    #[arg(long, global = true)]
    no_prompt: bool,
    #[arg(long, global = true)]
    no_pretrain: bool,
    /// Checkpoint to initialise from (finetune) or to score (evaluate).
    #[arg(long, global = true)]
    init: Option<PathBuf>,
    /// Field whose value is masked for the prompt-attention probe.
    #[arg(long, global = true)]
    probe_field: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic click log.
    Synth,
    /// Build field dictionaries and the token vocabulary.
    BuildVocab,
    /// Prompt-augmented MLM pretraining.
    Pretrain,
    /// Finetune in the configured mode.
    Finetune,
    /// Score a finetuned checkpoint on the test split.
    Evaluate,
}

fn run(args: Args) -> clickprompt::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: args.seed,
        mode: args.mode,
        backbone: args.backbone,
        k: args.k,
        no_layerwise: args.no_layerwise,
        no_prompt: args.no_prompt,
        no_pretrain: args.no_pretrain,
        out: args.out.clone(),
    })?;
    let init = args.init.as_deref();
    let outcome = match args.command {
        Command::Synth => cli::cmd_synth(&cfg)?,
        Command::BuildVocab => cli::cmd_build_vocab(&cfg)?,
        Command::Pretrain => cli::cmd_pretrain(&cfg)?,
        Command::Finetune => cli::cmd_finetune(&cfg, init)?,
        Command::Evaluate => cli::cmd_evaluate(&cfg, init, args.probe_field.as_deref())?,
    };
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(report) = &outcome.report {
        print!("{report}");
    }
    for f in &outcome.files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
