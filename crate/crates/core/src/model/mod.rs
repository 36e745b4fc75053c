//! Subword encoder → first-subtoken gather → word-level layer → label
//! projection, with the CRF scores stored alongside the network weights.

mod encoder;
mod lstm;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crf::{self, ConstraintMask, CrfParameters};
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tape, Tensor, Var};
use crate::tokenizer::TokenizedSentence;

pub use encoder::{encode_subwords, transformer_layer};
pub use lstm::bilstm;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 || self.max_positions == 0 || self.vocab_size == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "encoder hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordLayerKind {
    Transformer,
    Bilstm,
    None,
}

impl std::str::FromStr for WordLayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(WordLayerKind::Transformer),
            "bilstm" => Ok(WordLayerKind::Bilstm),
            "none" => Ok(WordLayerKind::None),
            _ => Err(Error::Config(format!("unknown word layer kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordLayerConfig {
    pub kind: WordLayerKind,
    pub hidden_dim: usize,
    /// Transformer only.
    pub num_heads: usize,
    /// Transformer only.
    pub ffn_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub word_layer: WordLayerConfig,
    pub num_labels: usize,
    pub dropout: f64,
    /// Restrict the training partition function to BIO-valid paths.
    pub constrained_training: bool,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let w = &self.word_layer;
        let d = self.encoder.hidden_dim;
        if w.kind != WordLayerKind::None && w.hidden_dim != d {
            return Err(Error::Config(format!(
                "word layer hidden_dim {} does not match encoder hidden_dim {d}",
                w.hidden_dim
            )));
        }
        match w.kind {
            WordLayerKind::Transformer if w.num_heads == 0 || !d.is_multiple_of(w.num_heads) || w.ffn_dim == 0 => {
                Err(Error::Config(format!(
                    "word transformer needs hidden_dim {d} divisible by num_heads {} and ffn_dim > 0",
                    w.num_heads
                )))
            }
            WordLayerKind::Bilstm if !d.is_multiple_of(2) => Err(Error::Config(format!(
                "bilstm word layer needs an even hidden_dim, got {d}"
            ))),
            _ if self.num_labels == 0 => Err(Error::Config("num_labels must be positive".into())),
            _ if !(0.0..1.0).contains(&self.dropout) => {
                Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)))
            }
            _ => Ok(()),
        }
    }
}

/// Dropout switch threaded through a forward pass.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn disabled() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn enabled(p: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    pub(crate) fn apply(&mut self, tape: &mut Tape<'_>, v: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => tape.dropout(v, self.p, rng),
            _ => v,
        }
    }
}

fn layer_param_shapes(prefix: &str, d: usize, f: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    for name in ["query", "key", "value", "output"] {
        out.push((format!("{prefix}.attn.{name}.weight"), vec![d, d], Init::Normal));
        out.push((format!("{prefix}.attn.{name}.bias"), vec![d], Init::Zeros));
    }
    out.push((format!("{prefix}.attn_norm.gamma"), vec![d], Init::Ones));
    out.push((format!("{prefix}.attn_norm.beta"), vec![d], Init::Zeros));
    out.push((format!("{prefix}.ffn.inner.weight"), vec![d, f], Init::Normal));
    out.push((format!("{prefix}.ffn.inner.bias"), vec![f], Init::Zeros));
    out.push((format!("{prefix}.ffn.outer.weight"), vec![f, d], Init::Normal));
    out.push((format!("{prefix}.ffn.outer.bias"), vec![d], Init::Zeros));
    out.push((format!("{prefix}.ffn_norm.gamma"), vec![d], Init::Ones));
    out.push((format!("{prefix}.ffn_norm.beta"), vec![d], Init::Zeros));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

impl ModelConfig {
    /// Every parameter name with its shape, in store order.
    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let e = &self.encoder;
        let d = e.hidden_dim;
        let l = self.num_labels;
        let mut out = vec![
            ("embeddings.token".to_string(), vec![e.vocab_size, d], Init::Normal),
            ("embeddings.position".to_string(), vec![e.max_positions, d], Init::Normal),
        ];
        for i in 0..e.num_layers {
            out.extend(layer_param_shapes(&format!("encoder.{i}"), d, e.ffn_dim));
        }
        match self.word_layer.kind {
            WordLayerKind::Transformer => {
                out.extend(layer_param_shapes("word", d, self.word_layer.ffn_dim));
            }
            WordLayerKind::Bilstm => {
                let h = d / 2;
                for dir in ["forward", "backward"] {
                    out.push((format!("word.{dir}.input_weight"), vec![d, 4 * h], Init::Normal));
                    out.push((format!("word.{dir}.hidden_weight"), vec![h, 4 * h], Init::Normal));
                    out.push((format!("word.{dir}.bias"), vec![4 * h], Init::Zeros));
                }
            }
            WordLayerKind::None => {}
        }
        out.push(("classifier.weight".to_string(), vec![d, l], Init::Normal));
        out.push(("classifier.bias".to_string(), vec![l], Init::Zeros));
        out.push(("crf.transitions".to_string(), vec![l, l], Init::Zeros));
        out.push(("crf.start".to_string(), vec![l], Init::Zeros));
        out.push(("crf.end".to_string(), vec![l], Init::Zeros));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_layout().into_iter().map(|(n, _, _)| n).collect()
    }

    /// Normal(0, init_std) weights, zero biases, unit layer-norm gains.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let normal = Normal::new(0.0, self.init_std)
            .map_err(|e| Error::Config(format!("init_std {}: {e}", self.init_std)))?;
        let mut store = ParamStore::new();
        for (name, shape, init) in self.param_layout() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| normal.sample(rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    /// Checks that `params` has exactly this configuration's names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let layout = self.param_layout();
        let expected: Vec<&str> = layout.iter().map(|(n, _, _)| n.as_str()).collect();
        let missing: Vec<&str> = expected.iter().copied().filter(|n| params.id(n).is_none()).collect();
        let extra: Vec<&str> = params
            .names()
            .iter()
            .map(String::as_str)
            .filter(|n| !expected.contains(n))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: missing {missing:?}, extra {extra:?}"
            )));
        }
        for (name, shape, _) in &layout {
            let t = params.by_name(name).unwrap();
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Total number of trainable scalars.
pub fn count_parameters(params: &ParamStore) -> usize {
    params.num_scalars()
}

/// Row `i` of the output is row `word_first_index[i]` of `hidden`.
pub fn gather_first_subtokens(tape: &mut Tape<'_>, hidden: Var, word_first_index: &[usize]) -> Result<Var> {
    tape.gather_rows(hidden, word_first_index)
}

pub fn word_interaction(
    tape: &mut Tape<'_>,
    words: Var,
    cfg: &WordLayerConfig,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let d = tape.value(words).dims2().1;
    if cfg.kind != WordLayerKind::None && cfg.hidden_dim != d {
        return Err(Error::shape(
            "word_interaction",
            format!("input dim {d}, layer dim {}", cfg.hidden_dim),
        ));
    }
    match cfg.kind {
        WordLayerKind::None => Ok(words),
        WordLayerKind::Transformer => transformer_layer(tape, "word", words, None, cfg.num_heads, dropout),
        WordLayerKind::Bilstm => bilstm(tape, "word", words),
    }
}

/// Affine map `hidden · W + b`.
pub fn project_to_labels(tape: &mut Tape<'_>, hidden: Var) -> Result<Var> {
    let w = tape.param_by_name("classifier.weight")?;
    let b = tape.param_by_name("classifier.bias")?;
    let h = tape.matmul(hidden, w)?;
    tape.add_row(h, b)
}

/// The full network for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config })
    }

    /// Word-level emission scores `[W × L]`.
    pub fn emissions(
        &self,
        tape: &mut Tape<'_>,
        sent: &TokenizedSentence,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let h = encode_subwords(tape, sent, &self.config.encoder, dropout)?;
        let hw = gather_first_subtokens(tape, h, &sent.word_first_index)?;
        let hw = word_interaction(tape, hw, &self.config.word_layer, dropout)?;
        project_to_labels(tape, hw)
    }

    pub fn nll(
        &self,
        tape: &mut Tape<'_>,
        sent: &TokenizedSentence,
        gold: &[usize],
        mask: Option<&ConstraintMask>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let em = self.emissions(tape, sent, dropout)?;
        let t = tape.param_by_name("crf.transitions")?;
        let s = tape.param_by_name("crf.start")?;
        let e = tape.param_by_name("crf.end")?;
        crf::crf_nll(tape, em, t, s, e, gold, mask)
    }

    pub fn crf_parameters(&self, params: &ParamStore) -> Result<CrfParameters> {
        let get = |n: &str| params.by_name(n).map(|t| t.data().to_vec()).ok_or_else(|| Error::InvalidValue(format!("missing `{n}`")));
        CrfParameters::new(self.config.num_labels, get("crf.transitions")?, get("crf.start")?, get("crf.end")?)
    }

    /// Constrained Viterbi over the model's emissions.
    pub fn decode(
        &self,
        params: &ParamStore,
        sent: &TokenizedSentence,
        mask: &ConstraintMask,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::new(params);
        let em = self.emissions(&mut tape, sent, &mut Dropout::disabled())?;
        let crf = self.crf_parameters(params)?;
        Ok(crf::viterbi_decode(tape.value(em), &crf, mask)?.0)
    }
}

#[cfg(test)]
mod tests;
