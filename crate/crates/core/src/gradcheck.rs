//! End-to-end gradient check of the full tagging loss on a tiny random model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crf::{build_constraint_mask, LabelScheme};
use crate::error::Result;
use crate::exec::Execution;
use crate::model::{Dropout, EncoderConfig, Model, ModelConfig, WordLayerConfig, WordLayerKind};
use crate::numeric::{finite_difference_param, relative_error, ParamStore, Tape};
use crate::tokenizer::{TokenizedSentence, CLS_ID, PAD_ID, SEP_ID};

pub const HIDDEN: usize = 8;
const VOCAB: usize = 12;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub kind: WordLayerKind,
    pub constrained: bool,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.relative_error).fold(0.0, f64::max)
    }
}

pub fn tiny_config(kind: WordLayerKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            hidden_dim: HIDDEN,
            num_heads: 2,
            ffn_dim: 2 * HIDDEN,
            max_positions: 8,
            vocab_size: VOCAB,
        },
        word_layer: WordLayerConfig {
            kind,
            hidden_dim: HIDDEN,
            num_heads: 2,
            ffn_dim: 2 * HIDDEN,
        },
        // One entity type: O, B-X, I-X.
        num_labels: 3,
        dropout: 0.0,
        constrained_training: false,
        init_std: 0.3,
    }
}

/// Compares analytic gradients of the sentence NLL with central differences
/// for every parameter tensor. Odd seeds use the BIO-constrained partition.
///
/// All weights, including the CRF scores and layer-norm gains, are drawn at
/// random so no group sits at a special point.
pub fn check_model_gradients(seed: u64, eps: f64, kind: WordLayerKind, exec: Execution) -> Result<GradcheckReport> {
    let cfg = tiny_config(kind);
    let model = Model::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = cfg.init_params(&mut rng)?;
    for id in params.ids() {
        for v in params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    // [CLS] w0 w1a w1b w2 [SEP] [PAD]
    let ids: Vec<u32> = vec![CLS_ID, 4 + rng.gen_range(0..8), 4 + rng.gen_range(0..8), 4 + rng.gen_range(0..8), 4 + rng.gen_range(0..8), SEP_ID, PAD_ID];
    let sent = TokenizedSentence {
        words: vec!["a".into(), "b".into(), "c".into()],
        subword_ids: ids,
        word_first_index: vec![1, 2, 4],
    };
    let scheme = LabelScheme::new(["X"]);
    let mask = build_constraint_mask(&scheme);
    let constrained = seed % 2 == 1;
    let gold: Vec<usize> = loop {
        let g: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
        if !constrained || mask.path_allowed(&g) {
            break g;
        }
    };
    let m = constrained.then_some(&mask);
    let loss = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new(s);
        let l = model.nll(&mut t, &sent, &gold, m, &mut Dropout::disabled())?;
        Ok(t.value(l).data()[0])
    };
    let mut tape = Tape::new(&params);
    let l = model.nll(&mut tape, &sent, &gold, m, &mut Dropout::disabled())?;
    let grads = tape.backward(l)?;
    let mut groups = Vec::new();
    for id in params.ids() {
        let fd = finite_difference_param(|s| loss(s).unwrap_or(f64::NAN), &params, id, eps, exec);
        groups.push(GroupError {
            name: params.name(id).to_string(),
            relative_error: relative_error(&grads.dense(id, fd.len()), &fd),
        });
    }
    Ok(GradcheckReport {
        seed,
        kind,
        constrained,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes_for_each_kind() {
        for kind in [WordLayerKind::Transformer, WordLayerKind::Bilstm] {
            let r = check_model_gradients(3, 1e-5, kind, Execution::default()).unwrap();
            assert!(r.max_error() < TOLERANCE, "{kind:?}: {:?}", r.groups);
            assert!(r.groups.iter().any(|g| g.name.starts_with("word.")));
            assert!(r.groups.iter().any(|g| g.name == "crf.start"));
        }
    }
}
