//! The command sequence of the `clickprompt` binary driven from the
//! library: synth, build-vocab, pretrain, finetune, evaluate with a probe.
//!
//! cargo run --example cli_pipeline [-- path/to/config.toml]

use clickprompt::cli::{self, RunConfig};

fn main() -> clickprompt::error::Result<()> {
    let mut cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => {
            let mut c = RunConfig::load("configs/synthetic.toml".as_ref())?;
            c.synth.n_samples = 3000;
            c.train.epochs = 2;
            c.train.pretrain_epochs = 2;
            c
        }
    };
    cfg.out = std::env::temp_dir().join("clickprompt-cli-example");
    for step in ["synth", "build-vocab", "pretrain", "finetune", "evaluate"] {
        let out = match step {
            "synth" => cli::cmd_synth(&cfg)?,
            "build-vocab" => cli::cmd_build_vocab(&cfg)?,
            "pretrain" => cli::cmd_pretrain(&cfg)?,
            "finetune" => cli::cmd_finetune(&cfg, None)?,
            _ => cli::cmd_evaluate(&cfg, None, Some("gender"))?,
        };
        println!("== {step}: {} files", out.files.len());
        if let Some(r) = out.report {
            println!("{r}");
        }
    }
    Ok(())
}
