//! Flat key=value configuration with command-line overrides; later settings
//! win, unknown keys are hard errors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::DepthMode;
use crate::optim::{Hyper, OptimizerKind};
use crate::seq2seq::{AlignMode, Arch, Seq2SeqConfig};

/// Every key the toolkit understands, namespaced by subsystem.
pub const KNOWN_KEYS: &[&str] = &[
    // model architecture
    "model.arch",
    "model.embed-dim",
    "model.hidden-dim",
    "model.depth-enc",
    "model.depth-dec",
    "model.depth-mode",
    "model.attention",
    "model.coverage",
    "model.fertility-cap",
    "model.dropout",
    "model.init-from-source",
    // data files and preparation
    "data.train-src",
    "data.train-tgt",
    "data.valid-src",
    "data.valid-tgt",
    "data.src-vocab",
    "data.tgt-vocab",
    "data.merges-src",
    "data.merges-tgt",
    "data.vocab-limit",
    "data.max-len",
    // training
    "train.optimizer",
    "train.lr",
    "train.clip",
    "train.epochs",
    "train.maxi-batch",
    "train.mini-batch",
    "train.seed",
    "train.checkpoint-every",
    "train.validation-every",
    "train.patience",
    "train.grad-mode",
    "train.align-weight",
    "train.align-mode",
    "train.threads",
    // decoding
    "decode.beam",
    "decode.nbest",
    "decode.normalize",
    "decode.max-len-factor",
    "decode.coverage-over-weight",
    "decode.coverage-under-weight",
    "decode.coverage-in-search",
];

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Config {
        Config::default()
    }

    /// Parses a config file: one `key=value` per line, `#` comments and
    /// blank lines allowed.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Config::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Sets a key, replacing any earlier value. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        self.values.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {key}={raw}"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parse(key, default)
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse(key, default)
    }

    pub fn get_f32(&self, key: &str, default: f32) -> Result<f32> {
        self.parse(key, default)
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(raw) => Err(Error::Config(format!("cannot parse {key}={raw} as bool"))),
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Model architecture from the `model.*` keys.
    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> Result<Seq2SeqConfig> {
        let arch_name = self.get("model.arch").unwrap_or("gru");
        let arch = Arch::parse(arch_name)
            .ok_or_else(|| Error::Config(format!("unknown model.arch `{arch_name}`")))?;
        let mode_name = self.get("model.depth-mode").unwrap_or("stacked");
        let depth_mode = DepthMode::parse(mode_name)
            .ok_or_else(|| Error::Config(format!("unknown model.depth-mode `{mode_name}`")))?;
        let fertility = self.get_f32("model.fertility-cap", 0.0)?;
        Ok(Seq2SeqConfig {
            arch,
            src_vocab,
            tgt_vocab,
            embed_dim: self.get_usize("model.embed-dim", 32)?,
            hidden_dim: self.get_usize("model.hidden-dim", 64)?,
            depth_enc: self.get_usize("model.depth-enc", 1)?,
            depth_dec: self.get_usize("model.depth-dec", 1)?,
            depth_mode,
            attention: self.get_bool("model.attention", true)?,
            coverage: self.get_bool("model.coverage", false)?,
            fertility_cap: (fertility > 0.0).then_some(fertility),
            dropout: self.get_f32("model.dropout", 0.0)?,
            init_from_source: self.get_bool("model.init-from-source", true)?,
        })
    }

    /// Optimizer choice and hyperparameters from the `train.*` keys.
    pub fn optimizer(&self) -> Result<(OptimizerKind, Hyper)> {
        let name = self.get("train.optimizer").unwrap_or("adam");
        let kind = OptimizerKind::parse(name)
            .ok_or_else(|| Error::Config(format!("unknown train.optimizer `{name}`")))?;
        let clip = self.get_f32("train.clip", crate::optim::DEFAULT_CLIP as f32)?;
        let hyper = Hyper {
            lr: self.get_f32("train.lr", kind.default_lr())?,
            clip: (clip > 0.0).then_some(clip as f64),
            ..Hyper::default()
        };
        Ok((kind, hyper))
    }

    pub fn align_mode(&self) -> Result<AlignMode> {
        match self.get("train.align-mode").unwrap_or("ce") {
            "ce" => Ok(AlignMode::CrossEntropy),
            "mse" => Ok(AlignMode::MeanSquared),
            other => Err(Error::Config(format!("unknown train.align-mode `{other}`"))),
        }
    }
}
