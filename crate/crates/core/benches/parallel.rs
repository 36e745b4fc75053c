//! Sequential vs rayon execution for the three data-parallel hot paths:
//! per-sentence gradients within a batch, corpus decoding, and the
//! finite-difference sweep. Without the `parallel` feature both arms run
//! sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hner::crf::{build_constraint_mask, LabelScheme};
use hner::gradcheck::tiny_config;
use hner::model::{Dropout, Model, WordLayerKind};
use hner::numeric::{finite_difference_param, ParamStore, Tape};
use hner::tokenizer::TokenizedSentence;
use hner::trainer::{batch_gradients, predict, Example};
use hner::{synthetic, Execution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn fixture(n: usize) -> (Model, ParamStore, Vec<Example>, LabelScheme) {
    let corpus = synthetic::generate(n, 0);
    let scheme = LabelScheme::new(["MTH", "TSK"]);
    let data = corpus
        .sentences
        .iter()
        .map(|(w, t)| Example::new(&corpus.vocab, &scheme, w, t).unwrap())
        .collect();
    let rc = hner::io::RunConfig {
        encoder_layers: 2,
        max_positions: 32,
        ..Default::default()
    };
    let model = Model::new(rc.model_config(corpus.vocab.len(), scheme.num_labels())).unwrap();
    let params = model.config.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (model, params, data, scheme)
}

fn batch(c: &mut Criterion) {
    let (model, params, data, _) = fixture(16);
    let refs: Vec<&Example> = data.iter().collect();
    let mut g = c.benchmark_group("batch_gradients_16");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&model, &params, &refs, None, None, exec).unwrap())
        });
    }
    g.finish();
}

fn decode(c: &mut Criterion) {
    let (model, params, data, scheme) = fixture(64);
    let mask = build_constraint_mask(&scheme);
    let sentences: Vec<TokenizedSentence> = data.iter().map(|e| e.sentence.clone()).collect();
    let mut g = c.benchmark_group("decode_64");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict(&model, &params, &sentences, &mask, exec).unwrap())
        });
    }
    g.finish();
}

fn finite_differences(c: &mut Criterion) {
    let cfg = tiny_config(WordLayerKind::Transformer);
    let model = Model::new(cfg.clone()).unwrap();
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let sent = TokenizedSentence {
        words: vec!["a".into(), "b".into()],
        subword_ids: vec![2, 5, 6, 7, 3],
        word_first_index: vec![1, 2],
    };
    let gold = [1, 2];
    let id = params.require("encoder.0.ffn.inner.weight").unwrap();
    let loss = |s: &ParamStore| {
        let mut t = Tape::new(s);
        let l = model.nll(&mut t, &sent, &gold, None, &mut Dropout::disabled()).unwrap();
        t.value(l).data()[0]
    };
    let mut g = c.benchmark_group("finite_difference_ffn_inner");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| finite_difference_param(loss, &params, id, 1e-5, exec))
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = batch, decode, finite_differences
}
criterion_main!(benches);
