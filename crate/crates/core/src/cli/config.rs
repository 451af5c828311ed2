use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctr::{Backbone, CtrConfig};
use crate::data::{SynthConfig, DEFAULT_Z_MAX};
use crate::error::{Error, Result};
use crate::eval::TailBasis;
use crate::plm::EncoderConfig;
use crate::train::{Ablation, Architecture, Mode, TrainConfig};

/// Where the dataset and its dictionaries live. Empty paths default to
/// files inside the run's output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub csv: PathBuf,
    /// Columns used as fields; empty means every column except label and
    /// timestamp.
    pub fields: Vec<String>,
    pub schema: PathBuf,
    pub vocab: PathBuf,
    pub min_freq: usize,
    pub max_vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv: PathBuf::new(),
            fields: Vec::new(),
            schema: PathBuf::new(),
            vocab: PathBuf::new(),
            min_freq: 1,
            max_vocab: 30_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub user_field: String,
    pub item_field: String,
    pub tail_quantile: f64,
    pub tail_basis: TailBasis,
    /// Test samples averaged by the prompt-attention probe.
    pub probe_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            user_field: crate::data::USER_FIELD.into(),
            item_field: crate::data::ITEM_FIELD.into(),
            tail_quantile: 0.1,
            tail_basis: TailBasis::Entity,
            probe_samples: 64,
        }
    }
}

/// Everything a command needs. Every key has a default; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub ctr: CtrConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            ctr: CtrConfig::default(),
            encoder: EncoderConfig {
                z_max: DEFAULT_Z_MAX,
                ..EncoderConfig::default()
            },
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub backbone: Option<Backbone>,
    pub k: Option<usize>,
    pub no_layerwise: bool,
    pub no_prompt: bool,
    pub no_pretrain: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies flag overrides. `--seed` also reseeds the synthetic generator.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
            self.synth.seed = s;
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(b) = o.backbone {
            self.ctr.backbone = b;
        }
        if let Some(k) = o.k {
            self.encoder.k = k;
        }
        self.ablation.no_layerwise |= o.no_layerwise;
        self.ablation.no_prompt |= o.no_prompt;
        self.ablation.no_pretrain |= o.no_pretrain;
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.ctr.embed_dim == 0 {
            return Err(Error::Config("ctr.embed_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval.tail_quantile) {
            return Err(Error::Config("eval.tail_quantile must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn or_out(&self, p: &Path, default: &str) -> PathBuf {
        if p.as_os_str().is_empty() {
            self.out.join(default)
        } else {
            p.to_path_buf()
        }
    }

    pub fn csv_path(&self) -> PathBuf {
        self.or_out(&self.data.csv, crate::data::DATA_FILE)
    }

    pub fn schema_path(&self) -> PathBuf {
        self.or_out(&self.data.schema, "schema.json")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.or_out(&self.data.vocab, "vocab.json")
    }

    /// Directory name of a PA-MLM run under these ablation flags.
    pub fn pretrain_name(&self) -> String {
        let mut name = String::from("pretrain");
        if self.ablation.no_layerwise {
            name.push_str("-no-layerwise");
        }
        if self.ablation.no_prompt {
            name.push_str("-no-prompt");
        }
        name
    }

    /// Directory name of a finetuning run: mode plus active ablations.
    pub fn finetune_name(&self) -> String {
        let mut name = self.train.mode.to_string();
        let a = &self.ablation;
        if self.train.mode == Mode::FtWithPlm {
            if a.no_layerwise {
                name.push_str("-no-layerwise");
            }
            if a.no_prompt {
                name.push_str("-no-prompt");
            }
        }
        if a.no_pretrain && self.train.mode != Mode::CtrScratch {
            name.push_str("-no-pretrain");
        }
        name
    }

    pub fn architecture(&self, cardinalities: Vec<usize>, vocab_size: usize) -> Architecture {
        Architecture {
            ctr: self.ctr.clone(),
            encoder: self.encoder.clone(),
            layerwise: !self.ablation.no_layerwise,
            cardinalities,
            vocab_size,
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
