use super::{Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Var, LAYER_NORM_EPS};
use crate::tokenizer::{TokenizedSentence, PAD_ID};

/// Post-norm transformer encoder over the subword sequence. PAD ids are
/// excluded as attention keys.
pub fn encode_subwords(
    tape: &mut Tape<'_>,
    sent: &TokenizedSentence,
    cfg: &EncoderConfig,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let s = sent.subword_ids.len();
    if s == 0 {
        return Err(Error::EmptyInput("encode_subwords"));
    }
    if s > cfg.max_positions {
        return Err(Error::InvalidValue(format!(
            "sequence of {s} subwords exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let ids: Vec<usize> = sent.subword_ids.iter().map(|&i| i as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::OutOfBounds {
            op: "encode_subwords",
            index: bad,
            len: cfg.vocab_size,
        });
    }
    let key_mask: Vec<bool> = sent.subword_ids.iter().map(|&i| i != PAD_ID).collect();
    if !key_mask.iter().any(|&k| k) {
        return Err(Error::InvalidValue("sentence contains only padding".into()));
    }
    let key_mask = if key_mask.iter().all(|&k| k) {
        None
    } else {
        Some(key_mask)
    };

    let tok = tape.param_by_name("embeddings.token")?;
    let pos = tape.param_by_name("embeddings.position")?;
    let tok = tape.gather_rows(tok, &ids)?;
    let positions: Vec<usize> = (0..s).collect();
    let pos = tape.gather_rows(pos, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for layer in 0..cfg.num_layers {
        x = transformer_layer(
            tape,
            &format!("encoder.{layer}"),
            x,
            key_mask.as_deref(),
            cfg.num_heads,
            dropout,
        )?;
    }
    Ok(x)
}

fn linear(tape: &mut Tape<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param_by_name(&format!("{prefix}.weight"))?;
    let b = tape.param_by_name(&format!("{prefix}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

fn norm(tape: &mut Tape<'_>, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param_by_name(&format!("{prefix}.gamma"))?;
    let b = tape.param_by_name(&format!("{prefix}.beta"))?;
    tape.layer_norm_rows(x, g, b, LAYER_NORM_EPS)
}

/// One bidirectional encoder layer: multi-head self-attention, add & norm,
/// GELU feed-forward, add & norm.
pub fn transformer_layer(
    tape: &mut Tape<'_>,
    prefix: &str,
    x: Var,
    key_mask: Option<&[bool]>,
    num_heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let d = tape.value(x).dims2().1;
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::shape(
            "transformer_layer",
            format!("dim {d} with {num_heads} heads"),
        ));
    }
    let dk = d / num_heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let q = linear(tape, &format!("{prefix}.attn.query"), x)?;
    let k = linear(tape, &format!("{prefix}.attn.key"), x)?;
    let v = linear(tape, &format!("{prefix}.attn.value"), x)?;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores, key_mask)?;
        let probs = dropout.apply(tape, probs);
        heads.push(tape.matmul(probs, vh)?);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let attn = linear(tape, &format!("{prefix}.attn.output"), ctx)?;
    let attn = dropout.apply(tape, attn);
    let h1 = tape.add(x, attn)?;
    let h1 = norm(tape, &format!("{prefix}.attn_norm"), h1)?;

    let f = linear(tape, &format!("{prefix}.ffn.inner"), h1)?;
    let f = tape.gelu(f);
    let f = linear(tape, &format!("{prefix}.ffn.outer"), f)?;
    let f = dropout.apply(tape, f);
    let h2 = tape.add(h1, f)?;
    norm(tape, &format!("{prefix}.ffn_norm"), h2)
}
