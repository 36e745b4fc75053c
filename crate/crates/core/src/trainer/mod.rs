//! Mini-batch training with Adam, EMA shadowing and best-dev checkpoint
//! selection.

mod adam;
mod ema;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
pub use ema::{ema_update, EmaState};

use crate::crf::{ConstraintMask, LabelScheme};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{evaluate_tags, ChunkMode, EvalReport};
use crate::model::{Dropout, Model};
use crate::numeric::{Gradients, ParamStore, Tape};
use crate::tokenizer::{TokenizedSentence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub ema_lambda: f64,
    pub ema_enabled: bool,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            batch_size: 4,
            max_epochs: 25,
            ema_lambda: 0.99,
            ema_enabled: true,
            seed: 0,
            grad_clip_norm: None,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.ema_enabled && !(0.0..1.0).contains(&self.ema_lambda) {
            return Err(Error::Config(format!("ema lambda must be in [0, 1), got {}", self.ema_lambda)));
        }
        if let Some(c) = self.grad_clip_norm {
            if c <= 0.0 || c.is_nan() {
                return Err(Error::Config(format!("grad clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// A tokenized sentence with gold label ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sentence: TokenizedSentence,
    pub gold: Vec<usize>,
}

impl Example {
    pub fn new<S: AsRef<str>>(vocab: &Vocabulary, scheme: &LabelScheme, words: &[S], tags: &[S]) -> Result<Self> {
        if words.len() != tags.len() {
            return Err(Error::shape("example", format!("{} words vs {} tags", words.len(), tags.len())));
        }
        Ok(Example {
            sentence: vocab.tokenize_sentence(words, true)?,
            gold: scheme.encode(tags)?,
        })
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub ema: Option<EmaState>,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ParamStore, cfg: &TrainConfig) -> Result<Self> {
        let optimizer = OptimizerState::new(&params, AdamConfig::default());
        let ema = if cfg.ema_enabled {
            Some(EmaState::new(&params, cfg.ema_lambda)?)
        } else {
            None
        };
        Ok(TrainState {
            params,
            optimizer,
            ema,
            epoch: 0,
        })
    }

    /// Parameters used for evaluation: the shadow when EMA is on.
    pub fn eval_params(&self) -> &ParamStore {
        self.ema.as_ref().map_or(&self.params, |e| &e.shadow)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub mean_loss: f64,
    pub steps: usize,
}

fn sentence_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Visiting order for one epoch: a seeded Fisher–Yates shuffle.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Loss and gradients for one sentence.
pub fn sentence_gradients(
    model: &Model,
    params: &ParamStore,
    ex: &Example,
    mask: Option<&ConstraintMask>,
    dropout: &mut Dropout<'_>,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(params);
    let loss = model.nll(&mut tape, &ex.sentence, &ex.gold, mask, dropout)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

/// Mean loss and mean gradient over a batch. Per-sentence work runs through
/// `exec`; the reduction is sequential in batch order.
pub fn batch_gradients(
    model: &Model,
    params: &ParamStore,
    batch: &[&Example],
    mask: Option<&ConstraintMask>,
    dropout_seed: Option<(u64, usize, &[usize])>,
    exec: Execution,
) -> Result<(f64, Gradients)> {
    let p = model.config.dropout;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let results = exec.map(&idx, |&k| {
        match dropout_seed {
            Some((seed, epoch, ids)) if p > 0.0 => {
                let mut rng = sentence_rng(seed, epoch, ids[k]);
                sentence_gradients(model, params, batch[k], mask, &mut Dropout::enabled(p, &mut rng))
            }
            _ => sentence_gradients(model, params, batch[k], mask, &mut Dropout::disabled()),
        }
    });
    let mut total = Gradients::empty(params.len());
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// One pass over `data`. Returns the mean per-sentence loss.
pub fn train_epoch(
    model: &Model,
    state: &mut TrainState,
    data: &[Example],
    cfg: &TrainConfig,
    mask: Option<&ConstraintMask>,
) -> Result<EpochSummary> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let epoch = state.epoch;
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let mut loss_sum = 0.0;
    let mut steps = 0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
        let (loss, grads) = batch_gradients(
            model,
            &state.params,
            &batch,
            mask,
            Some((cfg.seed, epoch, chunk)),
            cfg.execution,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "epoch {epoch}, batch {b}: mean loss {loss} over sentences {chunk:?}"
            )));
        }
        loss_sum += loss * chunk.len() as f64;
        state.params.zero_grad();
        state.params.accumulate(&grads)?;
        if let Some(max) = cfg.grad_clip_norm {
            clip_grad_norm(&mut state.params, max);
        }
        adam_step(&mut state.params, &mut state.optimizer, cfg.learning_rate)?;
        if let Some(ema) = state.ema.as_mut() {
            ema_update(ema, &state.params)?;
        }
        steps += 1;
    }
    state.epoch += 1;
    Ok(EpochSummary {
        mean_loss: loss_sum / data.len() as f64,
        steps,
    })
}

/// Constrained decode of every sentence, order preserved.
pub fn predict(
    model: &Model,
    params: &ParamStore,
    sentences: &[TokenizedSentence],
    mask: &ConstraintMask,
    exec: Execution,
) -> Result<Vec<Vec<usize>>> {
    exec.map(sentences, |s| model.decode(params, s, mask))
        .into_iter()
        .collect()
}

pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    data: &[Example],
    scheme: &LabelScheme,
    mask: &ConstraintMask,
    exec: Execution,
) -> Result<EvalReport> {
    let sentences: Vec<TokenizedSentence> = data.iter().map(|e| e.sentence.clone()).collect();
    let pred = predict(model, params, &sentences, mask, exec)?;
    let gold: Vec<Vec<String>> = data.iter().map(|e| scheme.decode(&e.gold)).collect();
    let pred: Vec<Vec<String>> = pred.iter().map(|p| scheme.decode(p)).collect();
    evaluate_tags(&gold, &pred, ChunkMode::Lenient)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1_live: Option<f64>,
    pub dev_f1_ema: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Candidate<T> {
    pub epoch: usize,
    /// Dev micro-F1, or the negated training loss when there is no dev set.
    pub score: f64,
    pub snapshot: T,
}

/// Highest score wins; ties go to the earliest epoch.
pub fn select_checkpoint<T>(history: &[Candidate<T>]) -> Result<&Candidate<T>> {
    let mut best: Option<&Candidate<T>> = None;
    for c in history {
        if best.is_none_or(|b| c.score > b.score || (c.score == b.score && c.epoch < b.epoch)) {
            best = Some(c);
        }
    }
    best.ok_or(Error::EmptyInput("checkpoint history"))
}

pub struct TrainOutcome {
    pub best: Candidate<TrainState>,
    pub last: TrainState,
    pub logs: Vec<EpochLog>,
}

/// Runs up to `max_epochs`, evaluating on `dev` after each epoch and keeping
/// the best snapshot. Without a dev set the lowest training loss wins.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &Model,
    mut state: TrainState,
    train_data: &[Example],
    dev: Option<&[Example]>,
    scheme: &LabelScheme,
    mask: &ConstraintMask,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_mask = model.config.constrained_training.then_some(mask);
    let mut best: Option<Candidate<TrainState>> = None;
    let mut logs = Vec::new();
    for _ in 0..cfg.max_epochs {
        let started = Instant::now();
        let summary = train_epoch(model, &mut state, train_data, cfg, train_mask)?;
        let (live, shadow) = match dev {
            Some(d) => {
                let live = evaluate(model, &state.params, d, scheme, mask, cfg.execution)?.micro.f1;
                let shadow = match &state.ema {
                    Some(e) => Some(evaluate(model, &e.shadow, d, scheme, mask, cfg.execution)?.micro.f1),
                    None => None,
                };
                (Some(live), shadow)
            }
            None => (None, None),
        };
        let log = EpochLog {
            epoch: state.epoch,
            train_loss: summary.mean_loss,
            dev_f1_live: live,
            dev_f1_ema: shadow,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
        let score = shadow.or(live).unwrap_or(-summary.mean_loss);
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(Candidate {
                epoch: state.epoch,
                score,
                snapshot: state.clone(),
            });
        }
    }
    let best = best.ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
    Ok(TrainOutcome {
        best,
        last: state,
        logs,
    })
}
