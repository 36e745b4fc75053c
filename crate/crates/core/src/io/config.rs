//! Flat `key=value` run configuration.
//!
//! `#` starts a comment. Every key has a default; unknown or repeated keys
//! are errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{EncoderConfig, ModelConfig, WordLayerConfig, WordLayerKind};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub encoder_heads: usize,
    pub encoder_ffn: usize,
    pub max_positions: usize,
    pub word_kind: WordLayerKind,
    pub word_heads: usize,
    pub word_ffn: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub constrained_training: bool,
    /// Subword vocabulary file; built from the training words when absent.
    pub vocab: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder_layers: 2,
            encoder_hidden: 64,
            encoder_heads: 4,
            encoder_ffn: 256,
            max_positions: 256,
            word_kind: WordLayerKind::Transformer,
            word_heads: 4,
            word_ffn: 256,
            dropout: 0.1,
            init_std: 0.02,
            constrained_training: false,
            vocab: None,
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "encoder.layers",
    "encoder.hidden",
    "encoder.heads",
    "encoder.ffn",
    "encoder.max_positions",
    "word_layer.kind",
    "word_layer.heads",
    "word_layer.ffn",
    "dropout",
    "init_std",
    "crf.constrained_training",
    "vocab",
    "lr",
    "batch_size",
    "epochs",
    "ema.enabled",
    "ema.lambda",
    "seed",
    "grad_clip",
    "parallel",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "encoder.layers" => self.encoder_layers = value(key, raw)?,
            "encoder.hidden" => self.encoder_hidden = value(key, raw)?,
            "encoder.heads" => self.encoder_heads = value(key, raw)?,
            "encoder.ffn" => self.encoder_ffn = value(key, raw)?,
            "encoder.max_positions" => self.max_positions = value(key, raw)?,
            "word_layer.kind" => self.word_kind = raw.parse()?,
            "word_layer.heads" => self.word_heads = value(key, raw)?,
            "word_layer.ffn" => self.word_ffn = value(key, raw)?,
            "dropout" => self.dropout = value(key, raw)?,
            "init_std" => self.init_std = value(key, raw)?,
            "crf.constrained_training" => self.constrained_training = value(key, raw)?,
            "vocab" => self.vocab = (!raw.is_empty()).then(|| PathBuf::from(raw)),
            "lr" => self.train.learning_rate = value(key, raw)?,
            "batch_size" => self.train.batch_size = value(key, raw)?,
            "epochs" => self.train.max_epochs = value(key, raw)?,
            "ema.enabled" => self.train.ema_enabled = value(key, raw)?,
            "ema.lambda" => self.train.ema_lambda = value(key, raw)?,
            "seed" => self.train.seed = value(key, raw)?,
            "grad_clip" => {
                self.train.grad_clip_norm = match raw {
                    "none" | "" => None,
                    v => Some(value(key, v)?),
                }
            }
            "parallel" => {
                self.train.execution = if value(key, raw)? {
                    Execution::Parallel
                } else {
                    Execution::Sequential
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Full model configuration once the data fixes vocabulary and labels.
    pub fn model_config(&self, vocab_size: usize, num_labels: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_layers: self.encoder_layers,
                hidden_dim: self.encoder_hidden,
                num_heads: self.encoder_heads,
                ffn_dim: self.encoder_ffn,
                max_positions: self.max_positions,
                vocab_size,
            },
            word_layer: WordLayerConfig {
                kind: self.word_kind,
                hidden_dim: self.encoder_hidden,
                num_heads: self.word_heads,
                ffn_dim: self.word_ffn,
            },
            num_labels,
            dropout: self.dropout,
            constrained_training: self.constrained_training,
            init_std: self.init_std,
        }
    }
}

pub fn parse_config_str(text: &str, origin: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::Data {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected key=value, found `{line}`")))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(at(format!("duplicate key `{key}`")));
        }
        cfg.set(key, raw.trim()).map_err(|e| at(e.to_string()))?;
    }
    cfg.train.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config_str("", "c").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().train.learning_rate, 3e-5);
    }

    #[test]
    fn keys_and_comments() {
        let cfg = parse_config_str(
            "# run\nencoder.layers = 3\nword_layer.kind=bilstm  # ablation\nlr=1e-3\nema.enabled=false\ngrad_clip=1.5\nparallel=false\n",
            "c",
        )
        .unwrap();
        assert_eq!(cfg.encoder_layers, 3);
        assert_eq!(cfg.word_kind, WordLayerKind::Bilstm);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert!(!cfg.train.ema_enabled);
        assert_eq!(cfg.train.grad_clip_norm, Some(1.5));
        assert_eq!(cfg.train.execution, Execution::Sequential);
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let raw = match *key {
                "word_layer.kind" => "none",
                "crf.constrained_training" | "ema.enabled" | "parallel" => "true",
                "vocab" => "v.txt",
                "grad_clip" | "dropout" | "init_std" | "ema.lambda" | "lr" => "0.5",
                _ => "4",
            };
            cfg.set(key, raw).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [("lr=1\nbogus=3\n", 2), ("seed=1\nseed=2\n", 2), ("no equals sign\n", 1), ("epochs=many\n", 1)] {
            match parse_config_str(text, "c") {
                Err(Error::Data { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(parse_config_str("lr=0\n", "c").is_err());
    }
}
