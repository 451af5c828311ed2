//! Configuration and the `synth` / `build-vocab` / `pretrain` / `finetune`
//! / `evaluate` commands.

mod commands;
mod config;

pub use commands::{cmd_build_vocab, cmd_evaluate, cmd_finetune, cmd_pretrain, cmd_synth, Outcome};
pub use config::{DataConfig, EvalConfig, Overrides, RunConfig};
