//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::crf::{build_constraint_mask, LabelScheme};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gradcheck::{check_model_gradients, TOLERANCE};
use crate::io::checkpoint::{checkpoint_to_state, load_checkpoint, save_checkpoint, state_to_checkpoint};
use crate::io::{corpus_stats, parse_config, parse_conll, parse_tokens, write_conll, CheckpointConfigs, Corpus, RunConfig, Sentence, TrainingMetadata};
use crate::metrics::{evaluate_tags, Average, ChunkMode, EvalReport};
use crate::model::{count_parameters, Model, WordLayerKind};
use crate::numeric::ParamStore;
use crate::tokenizer::{TokenizedSentence, Vocabulary};
use crate::trainer::{predict, train, EpochLog, Example, TrainOutcome, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "hner", version, about = "Subword encoder + word layer + CRF sequence tagger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Rewrite invalid I- tags to B- instead of rejecting the file.
        #[arg(long)]
        repair: bool,
    },
    /// Entity-level evaluation of a checkpoint on labelled data.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = AverageArg::Both)]
        average: AverageArg,
        #[arg(long, value_enum, default_value_t = ParamsArg::Ema)]
        params: ParamsArg,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        repair: bool,
    },
    /// Tag every sentence of a token-per-line file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = ParamsArg::Ema)]
        params: ParamsArg,
    },
    /// Train matched configurations and report parameter counts and F1.
    Ablate {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "word,subword")]
        mode: Vec<AblateMode>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repair: bool,
    },
    /// Finite-difference check of every parameter gradient on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Sentence, token and entity counts.
    Stats {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        repair: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AverageArg {
    Micro,
    Macro,
    Both,
}

impl From<AverageArg> for Average {
    fn from(a: AverageArg) -> Self {
        match a {
            AverageArg::Micro => Average::Micro,
            AverageArg::Macro => Average::Macro,
            AverageArg::Both => Average::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ParamsArg {
    Live,
    Ema,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AblateMode {
    /// Encoder plus one word-level transformer layer.
    Word,
    /// One more encoder layer and no word layer.
    Subword,
    /// Encoder plus a word-level Bi-LSTM.
    Lstm,
}

/// Runs the CLI with process stdout/stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train {
            config,
            train,
            dev,
            out: dir,
            seed,
            repair,
        } => cmd_train(config.as_deref(), &train, dev.as_deref(), &dir, seed, repair, out),
        Command::Eval {
            model,
            data,
            average,
            params,
            format,
            strict,
            repair,
        } => cmd_eval(&model, &data, average.into(), params, format, strict, repair, out),
        Command::Predict {
            model,
            input,
            output,
            params,
        } => cmd_predict(&model, &input, &output, params, out),
        Command::Ablate {
            mode,
            config,
            train,
            dev,
            seed,
            repair,
        } => cmd_ablate(&mode, config.as_deref(), &train, dev.as_deref(), seed, repair, out),
        Command::Gradcheck { seed, eps } => cmd_gradcheck(seed, eps, out),
        Command::Stats { data, repair } => cmd_stats(&data, repair, out),
    }
}

fn emit(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn tokenize_checked(vocab: &Vocabulary, words: &[String], max_positions: usize, origin: &str, index: usize) -> Result<TokenizedSentence> {
    let s = vocab.tokenize_sentence(words, true)?;
    if s.num_subwords() > max_positions {
        return Err(Error::Data {
            path: origin.to_string(),
            line: 0,
            msg: format!(
                "sentence {index} has {} subwords, more than max_positions {max_positions}",
                s.num_subwords()
            ),
        });
    }
    Ok(s)
}

fn examples(corpus: &Corpus, vocab: &Vocabulary, scheme: &LabelScheme, max_positions: usize, origin: &Path) -> Result<Vec<Example>> {
    let origin = origin.display().to_string();
    corpus
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Example {
                sentence: tokenize_checked(vocab, &s.words, max_positions, &origin, i)?,
                gold: scheme.encode(&s.tags)?,
            })
        })
        .collect()
}

/// Everything a training run needs, derived from config and data.
pub struct Prepared {
    pub configs: CheckpointConfigs,
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub dev: Option<Vec<Example>>,
}

/// Builds vocabulary, label scheme and model configuration. The scheme
/// covers the entity types of both training and dev data.
pub fn prepare(cfg: &RunConfig, train: (&Corpus, &Path), dev: Option<(&Corpus, &Path)>) -> Result<Prepared> {
    let vocab = match &cfg.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::from_words(train.0.sentences.iter().flat_map(|s| s.words.iter().map(String::as_str)))?,
    };
    let mut types: BTreeSet<String> = train.0.scheme.entity_types().iter().cloned().collect();
    if let Some((d, _)) = dev {
        types.extend(d.scheme.entity_types().iter().cloned());
    }
    let scheme = LabelScheme::new(types);
    let model = cfg.model_config(vocab.len(), scheme.num_labels());
    model.validate()?;
    let max_pos = model.encoder.max_positions;
    let train_ex = examples(train.0, &vocab, &scheme, max_pos, train.1)?;
    let dev_ex = dev.map(|(c, p)| examples(c, &vocab, &scheme, max_pos, p)).transpose()?;
    Ok(Prepared {
        configs: CheckpointConfigs {
            model,
            train: cfg.train.clone(),
            vocab: vocab.tokens().to_vec(),
            scheme,
        },
        vocab,
        train: train_ex,
        dev: dev_ex,
    })
}

/// Initializes parameters from the configured seed and trains.
pub fn fit(prep: &Prepared, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let c = &prep.configs;
    let model = Model::new(c.model.clone())?;
    let params = c.model.init_params(&mut ChaCha8Rng::seed_from_u64(c.train.seed))?;
    let state = TrainState::new(params, &c.train)?;
    let mask = build_constraint_mask(&c.scheme);
    train(&model, state, &prep.train, prep.dev.as_deref(), &c.scheme, &mask, &c.train, on_epoch)
}

fn cmd_train(
    config: Option<&Path>,
    train_path: &Path,
    dev_path: Option<&Path>,
    dir: &Path,
    seed: Option<u64>,
    repair: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let cfg = load_run_config(config, seed)?;
    let train_corpus = parse_conll(train_path, repair)?;
    let dev_corpus = dev_path.map(|p| parse_conll(p, repair)).transpose()?;
    let prep = prepare(&cfg, (&train_corpus, train_path), dev_corpus.as_ref().zip(dev_path))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join("train_log.jsonl");
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut log_err = None;
    let outcome = fit(&prep, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        let _ = writeln!(out, "{line}");
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    let has_dev = prep.dev.is_some();
    let steps = |s: &TrainState| s.optimizer.step;
    let best_meta = TrainingMetadata {
        epoch: outcome.best.epoch,
        dev_f1: has_dev.then_some(outcome.best.score),
        steps: steps(&outcome.best.snapshot),
    };
    let last_meta = TrainingMetadata {
        epoch: outcome.last.epoch,
        dev_f1: outcome.logs.last().and_then(|l| l.dev_f1_ema.or(l.dev_f1_live)),
        steps: steps(&outcome.last),
    };
    save_checkpoint(dir.join("best.ckpt"), &state_to_checkpoint(&outcome.best.snapshot, &prep.configs, &best_meta)?)?;
    save_checkpoint(dir.join("last.ckpt"), &state_to_checkpoint(&outcome.last, &prep.configs, &last_meta)?)?;
    emit(
        out,
        json!({
            "best_epoch": outcome.best.epoch,
            "best_score": outcome.best.score,
            "selection": if has_dev { "dev_micro_f1" } else { "neg_train_loss" },
            "parameters": count_parameters(&outcome.last.params),
            "checkpoint": dir.join("best.ckpt"),
        }),
    )?;
    Ok(EXIT_OK)
}

/// A checkpoint ready for inference.
pub struct Loaded {
    pub configs: CheckpointConfigs,
    pub model: Model,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

fn load_for_inference(path: &Path, which: ParamsArg) -> Result<Loaded> {
    let ck = load_checkpoint(path)?;
    let (configs, _, state) = checkpoint_to_state(&ck)?;
    let params = match (which, state.ema) {
        (ParamsArg::Ema, Some(e)) => e.shadow,
        (ParamsArg::Ema, None) | (ParamsArg::Live, _) => state.params,
    };
    Ok(Loaded {
        model: Model::new(configs.model.clone())?,
        vocab: Vocabulary::from_tokens(configs.vocab.clone())?,
        configs,
        params,
    })
}

/// Constrained-decodes raw word sequences into tag strings.
pub fn tag_sentences(loaded: &Loaded, sentences: &[Vec<String>], origin: &Path, exec: Execution) -> Result<Vec<Vec<String>>> {
    let origin = origin.display().to_string();
    let max_pos = loaded.configs.model.encoder.max_positions;
    let tokenized = sentences
        .iter()
        .enumerate()
        .map(|(i, w)| tokenize_checked(&loaded.vocab, w, max_pos, &origin, i))
        .collect::<Result<Vec<_>>>()?;
    let mask = build_constraint_mask(&loaded.configs.scheme);
    let ids = predict(&loaded.model, &loaded.params, &tokenized, &mask, exec)?;
    Ok(ids.iter().map(|p| loaded.configs.scheme.decode(p)).collect())
}

/// Evaluates a checkpoint on labelled data; gold types unknown to the model
/// still count as gold entities.
pub fn evaluate_checkpoint(path: &Path, data: &Corpus, data_path: &Path, live: bool, mode: ChunkMode) -> Result<EvalReport> {
    let loaded = load_for_inference(path, if live { ParamsArg::Live } else { ParamsArg::Ema })?;
    let words: Vec<Vec<String>> = data.sentences.iter().map(|s| s.words.clone()).collect();
    let pred = tag_sentences(&loaded, &words, data_path, loaded.configs.train.execution)?;
    let gold: Vec<Vec<String>> = data.sentences.iter().map(|s| s.tags.clone()).collect();
    evaluate_tags(&gold, &pred, mode)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    model: &Path,
    data: &Path,
    average: Average,
    params: ParamsArg,
    format: Format,
    strict: bool,
    repair: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let corpus = parse_conll(data, repair)?;
    let mode = if strict { ChunkMode::Strict } else { ChunkMode::Lenient };
    let report = evaluate_checkpoint(model, &corpus, data, params == ParamsArg::Live, mode)?;
    match format {
        Format::Json => emit(out, report.to_json(average))?,
        Format::Table => emit(out, report.to_table(average))?,
    }
    Ok(EXIT_OK)
}

fn cmd_predict(model: &Path, input: &Path, output: &Path, params: ParamsArg, out: &mut dyn Write) -> Result<i32> {
    let sentences = parse_tokens(input)?;
    let loaded = load_for_inference(model, params)?;
    let tags = tag_sentences(&loaded, &sentences, input, loaded.configs.train.execution)?;
    let tagged: Vec<Sentence> = sentences
        .into_iter()
        .zip(tags)
        .map(|(words, tags)| Sentence { words, tags })
        .collect();
    let file = fs::File::create(output).map_err(|e| Error::io(output, e))?;
    let mut w = BufWriter::new(file);
    write_conll(&mut w, &tagged)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(output, e))?;
    emit(out, json!({"sentences": tagged.len(), "output": output}))?;
    Ok(EXIT_OK)
}

/// The run configuration for one ablation arm. `word` and `subword` share
/// encoder width, heads and FFN size, so their parameter counts agree.
pub fn ablation_config(base: &RunConfig, mode: AblateMode) -> RunConfig {
    let mut c = base.clone();
    match mode {
        AblateMode::Word => {
            c.word_kind = WordLayerKind::Transformer;
            c.word_heads = c.encoder_heads;
            c.word_ffn = c.encoder_ffn;
        }
        AblateMode::Subword => {
            c.encoder_layers += 1;
            c.word_kind = WordLayerKind::None;
        }
        AblateMode::Lstm => c.word_kind = WordLayerKind::Bilstm,
    }
    c
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mode: AblateMode,
    pub parameters: usize,
    pub best_epoch: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// `dev`, or `train` when no dev file was given.
    pub evaluated_on: &'static str,
}

pub fn run_ablation(
    base: &RunConfig,
    mode: AblateMode,
    train: (&Corpus, &Path),
    dev: Option<(&Corpus, &Path)>,
) -> Result<AblationRow> {
    let cfg = ablation_config(base, mode);
    let prep = prepare(&cfg, train, dev)?;
    let outcome = fit(&prep, |_| {})?;
    let c = &prep.configs;
    let model = Model::new(c.model.clone())?;
    let mask = build_constraint_mask(&c.scheme);
    let (data, on) = match &prep.dev {
        Some(d) => (d.as_slice(), "dev"),
        None => (prep.train.as_slice(), "train"),
    };
    let report = crate::trainer::evaluate(
        &model,
        outcome.best.snapshot.eval_params(),
        data,
        &c.scheme,
        &mask,
        c.train.execution,
    )?;
    Ok(AblationRow {
        mode,
        parameters: count_parameters(&outcome.best.snapshot.params),
        best_epoch: outcome.best.epoch,
        micro_f1: report.micro.f1,
        macro_f1: report.macro_avg.f1,
        evaluated_on: on,
    })
}

fn cmd_ablate(
    modes: &[AblateMode],
    config: Option<&Path>,
    train_path: &Path,
    dev_path: Option<&Path>,
    seed: Option<u64>,
    repair: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let cfg = load_run_config(config, seed)?;
    let train_corpus = parse_conll(train_path, repair)?;
    let dev_corpus = dev_path.map(|p| parse_conll(p, repair)).transpose()?;
    let mut rows = Vec::new();
    for &m in modes {
        let row = run_ablation(&cfg, m, (&train_corpus, train_path), dev_corpus.as_ref().zip(dev_path))?;
        emit(out, serde_json::to_string(&row)?)?;
        rows.push(row);
    }
    let count = |m| rows.iter().find(|r| r.mode == m).map(|r| r.parameters);
    if let (Some(w), Some(s)) = (count(AblateMode::Word), count(AblateMode::Subword)) {
        emit(out, json!({"word_parameters": w, "subword_parameters": s, "matched": w == s}))?;
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(seed: u64, eps: f64, out: &mut dyn Write) -> Result<i32> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut worst = 0.0f64;
    for kind in [WordLayerKind::Transformer, WordLayerKind::Bilstm] {
        let report = check_model_gradients(seed, eps, kind, Execution::default())?;
        let (name, err) = report
            .groups
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
            .map(|g| (g.name.as_str(), g.relative_error))
            .unwrap_or(("", 0.0));
        emit(
            out,
            json!({"word_layer": kind, "constrained": report.constrained, "groups": report.groups.len(), "max_relative_error": err, "worst_group": name}),
        )?;
        worst = worst.max(err);
    }
    emit(out, format!("max relative error: {worst:.3e}"))?;
    Ok(if worst < TOLERANCE { EXIT_OK } else { EXIT_DATA })
}

fn cmd_stats(paths: &[PathBuf], repair: bool, out: &mut dyn Write) -> Result<i32> {
    for p in paths {
        let stats = corpus_stats(&parse_conll(p, repair)?);
        emit(out, json!({"path": p, "stats": stats}))?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli_with(std::iter::once("hner").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(&["train", "--bogus"]).0, EXIT_USAGE);
        assert_eq!(run(&[]).0, EXIT_USAGE);
        assert_eq!(run(&["eval", "--model", "m"]).0, EXIT_USAGE);
        assert_eq!(run(&["eval", "--model", "m", "--data", "d", "--average", "weighted"]).0, EXIT_USAGE);
        assert_eq!(run(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn missing_files_exit_two() {
        let (code, _, err) = run(&["stats", "--data", "/nonexistent/file.conll"]);
        assert_eq!(code, EXIT_DATA);
        assert!(err.contains("/nonexistent/file.conll"));
    }

    #[test]
    fn ablation_arms_match_in_size() {
        let base = RunConfig::default();
        let w = ablation_config(&base, AblateMode::Word).model_config(50, 5);
        let s = ablation_config(&base, AblateMode::Subword).model_config(50, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nw = count_parameters(&w.init_params(&mut rng).unwrap());
        let ns = count_parameters(&s.init_params(&mut rng).unwrap());
        assert_eq!(nw, ns);
    }
}
