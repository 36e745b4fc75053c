use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::exec::Execution;
use crate::numeric::{finite_difference_param, relative_error, Gradients};

type Mat = Vec<Vec<f64>>;

fn config(layers: usize, d: usize, heads: usize, kind: WordLayerKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: layers,
            hidden_dim: d,
            num_heads: heads,
            ffn_dim: 2 * d,
            max_positions: 16,
            vocab_size: 12,
        },
        word_layer: WordLayerConfig {
            kind,
            hidden_dim: d,
            num_heads: heads,
            ffn_dim: 2 * d,
        },
        num_labels: 3,
        dropout: 0.0,
        constrained_training: false,
        init_std: 0.5,
    }
}

fn sentence(ids: &[u32], first: &[usize]) -> TokenizedSentence {
    TokenizedSentence {
        words: first.iter().map(|i| format!("w{i}")).collect(),
        subword_ids: ids.to_vec(),
        word_first_index: first.to_vec(),
    }
}

fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn p(params: &ParamStore, name: &str) -> Mat {
    let t = params.by_name(name).unwrap();
    to_mat(t)
}

fn pv(params: &ParamStore, name: &str) -> Vec<f64> {
    params.by_name(name).unwrap().data().to_vec()
}

// ---- straight-line reference evaluation, independent of the tape ----

fn ref_linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn ref_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn ref_layer(params: &ParamStore, prefix: &str, x: &Mat, heads: usize, keys: &[bool]) -> Mat {
    let lin = |name: &str, x: &Mat| {
        ref_linear(x, &p(params, &format!("{prefix}.{name}.weight")), &pv(params, &format!("{prefix}.{name}.bias")))
    };
    let (q, k, v) = (lin("attn.query", x), lin("attn.key", x), lin("attn.value", x));
    let n = x.len();
    let d = x[0].len();
    let dk = d / heads;
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let mut s: Vec<f64> = (0..n)
                .map(|j| {
                    if !keys[j] {
                        return f64::NEG_INFINITY;
                    }
                    (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            s.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
            for c in 0..dk {
                ctx[i][h * dk + c] = (0..n).map(|j| s[j] * v[j][h * dk + c]).sum();
            }
        }
    }
    let a = lin("attn.output", &ctx);
    let r1: Mat = x.iter().zip(&a).map(|(u, w)| u.iter().zip(w).map(|(p, q)| p + q).collect()).collect();
    let h1 = ref_norm(&r1, &pv(params, &format!("{prefix}.attn_norm.gamma")), &pv(params, &format!("{prefix}.attn_norm.beta")));
    let f: Mat = lin("ffn.inner", &h1).into_iter().map(|r| r.into_iter().map(ref_gelu).collect()).collect();
    let f = lin("ffn.outer", &f);
    let r2: Mat = h1.iter().zip(&f).map(|(u, w)| u.iter().zip(w).map(|(p, q)| p + q).collect()).collect();
    ref_norm(&r2, &pv(params, &format!("{prefix}.ffn_norm.gamma")), &pv(params, &format!("{prefix}.ffn_norm.beta")))
}

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ref_lstm_dir(params: &ParamStore, prefix: &str, x: &Mat, order: &[usize]) -> Mat {
    let wx = p(params, &format!("{prefix}.input_weight"));
    let wh = p(params, &format!("{prefix}.hidden_weight"));
    let b = pv(params, &format!("{prefix}.bias"));
    let hd = wh.len();
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut out = vec![vec![]; x.len()];
    for &t in order {
        let z: Vec<f64> = (0..4 * hd)
            .map(|j| {
                b[j] + (0..x[t].len()).map(|k| x[t][k] * wx[k][j]).sum::<f64>()
                    + (0..hd).map(|k| h[k] * wh[k][j]).sum::<f64>()
            })
            .collect();
        for u in 0..hd {
            let (i, f, g, o) = (sigm(z[u]), sigm(z[hd + u]), z[2 * hd + u].tanh(), sigm(z[3 * hd + u]));
            c[u] = f * c[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        out[t] = h.clone();
    }
    out
}

fn run_encoder(cfg: &ModelConfig, params: &ParamStore, sent: &TokenizedSentence) -> Tensor {
    let mut tape = Tape::new(params);
    let h = encode_subwords(&mut tape, sent, &cfg.encoder, &mut Dropout::disabled()).unwrap();
    tape.value(h).clone()
}

fn assert_close(a: &Mat, b: &Mat, tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < tol, "{p} vs {q}");
        }
    }
}

#[test]
fn zero_layer_encoder_is_embedding_plus_position() {
    let cfg = config(0, 8, 2, WordLayerKind::None);
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let sent = sentence(&[2, 7, 5, 3], &[1, 2]);
    let out = run_encoder(&cfg, &params, &sent);
    let tok = p(&params, "embeddings.token");
    let pos = p(&params, "embeddings.position");
    for (i, &id) in sent.subword_ids.iter().enumerate() {
        let expect: Vec<f64> = tok[id as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect();
        assert_eq!(out.row(i), expect.as_slice());
    }
}

#[test]
fn encoder_matches_reference_evaluation() {
    let cfg = config(1, 8, 2, WordLayerKind::None);
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let sent = sentence(&[2, 9, 4, 11, 6, 3], &[1, 2, 4]);
    let out = to_mat(&run_encoder(&cfg, &params, &sent));
    let tok = p(&params, "embeddings.token");
    let pos = p(&params, "embeddings.position");
    let x: Mat = sent
        .subword_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| tok[id as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let expect = ref_layer(&params, "encoder.0", &x, 2, &[true; 6]);
    assert_close(&out, &expect, 1e-12);
}

#[test]
fn attention_without_positions_is_permutation_equivariant() {
    let cfg = config(2, 8, 2, WordLayerKind::None);
    let mut params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let pid = params.require("embeddings.position").unwrap();
    params.get_mut(pid).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let a = run_encoder(&cfg, &params, &sentence(&[5, 6, 7, 8], &[0]));
    let b = run_encoder(&cfg, &params, &sentence(&[5, 8, 7, 6], &[0]));
    for (i, j) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
        for (x, y) in a.row(i).iter().zip(b.row(j)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_does_not_change_real_rows() {
    let cfg = config(2, 8, 4, WordLayerKind::None);
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let sent = sentence(&[2, 5, 9, 3], &[1, 2]);
    let a = run_encoder(&cfg, &params, &sent);
    for extra in 1..5 {
        let b = run_encoder(&cfg, &params, &sent.padded(extra));
        for i in 0..4 {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn encoder_input_errors() {
    let cfg = config(1, 8, 2, WordLayerKind::None);
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut tape = Tape::new(&params);
    let too_long = sentence(&[4; 17], &[0]);
    assert!(encode_subwords(&mut tape, &too_long, &cfg.encoder, &mut Dropout::disabled()).is_err());
    let bad_id = sentence(&[4, 12], &[0]);
    assert!(encode_subwords(&mut tape, &bad_id, &cfg.encoder, &mut Dropout::disabled()).is_err());
    let all_pad = sentence(&[0, 0], &[0]);
    assert!(encode_subwords(&mut tape, &all_pad, &cfg.encoder, &mut Dropout::disabled()).is_err());
}

#[test]
fn gather_selects_rows_and_scatters_gradient() {
    let mut store = ParamStore::new();
    let data: Vec<f64> = (0..15).map(|v| v as f64 * 0.37 - 2.0).collect();
    let id = store.insert("h", Tensor::matrix(5, 3, data).unwrap()).unwrap();
    let mut tape = Tape::new(&store);
    let h = tape.param(id);
    let all = gather_first_subtokens(&mut tape, h, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(tape.value(all), store.get(id));
    let some = gather_first_subtokens(&mut tape, h, &[0, 2, 3]).unwrap();
    assert_eq!(tape.value(some).row(1), store.get(id).row(2));
    assert!(gather_first_subtokens(&mut tape, h, &[5]).is_err());

    let f = |s: &ParamStore| -> (f64, Gradients) {
        let mut t = Tape::new(s);
        let h = t.param(ParamId(0));
        let g = gather_first_subtokens(&mut t, h, &[0, 2, 3]).unwrap();
        let sq = t.mul(g, g).unwrap();
        let th = t.tanh(sq);
        let out = t.sum(th);
        (t.value(out).data()[0], t.backward(out).unwrap())
    };
    use crate::numeric::ParamId;
    let (_, g) = f(&store);
    let an = g.dense(id, 15);
    assert!(an[3..6].iter().all(|&v| v == 0.0), "row 1 was not gathered");
    let fd = finite_difference_param(|s| f(s).0, &store, id, 1e-5, Execution::Sequential);
    assert!(relative_error(&an, &fd) < 1e-8);
}

fn word_layer_out(cfg: &ModelConfig, params: &ParamStore, x: &Tensor) -> Tensor {
    let mut tape = Tape::new(params);
    let v = tape.constant(x.clone());
    let out = word_interaction(&mut tape, v, &cfg.word_layer, &mut Dropout::disabled()).unwrap();
    tape.value(out).clone()
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    use rand::Rng;
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn word_layer_none_is_identity() {
    let cfg = config(1, 8, 2, WordLayerKind::None);
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let x = random_mat(&mut ChaCha8Rng::seed_from_u64(7), 4, 8);
    assert_eq!(word_layer_out(&cfg, &params, &x), x);
}

#[test]
fn word_transformer_single_word() {
    let cfg = config(1, 8, 2, WordLayerKind::Transformer);
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let x = random_mat(&mut ChaCha8Rng::seed_from_u64(9), 1, 8);
    let out = word_layer_out(&cfg, &params, &x);
    // one position: attention weight 1, so context = value projection of x
    let xm = to_mat(&x);
    let v = ref_linear(&xm, &p(&params, "word.attn.value.weight"), &pv(&params, "word.attn.value.bias"));
    let a = ref_linear(&v, &p(&params, "word.attn.output.weight"), &pv(&params, "word.attn.output.bias"));
    let r1 = vec![xm[0].iter().zip(&a[0]).map(|(p, q)| p + q).collect::<Vec<_>>()];
    let h1 = ref_norm(&r1, &pv(&params, "word.attn_norm.gamma"), &pv(&params, "word.attn_norm.beta"));
    let f: Mat = ref_linear(&h1, &p(&params, "word.ffn.inner.weight"), &pv(&params, "word.ffn.inner.bias"))
        .into_iter()
        .map(|r| r.into_iter().map(ref_gelu).collect())
        .collect();
    let f = ref_linear(&f, &p(&params, "word.ffn.outer.weight"), &pv(&params, "word.ffn.outer.bias"));
    let r2 = vec![h1[0].iter().zip(&f[0]).map(|(p, q)| p + q).collect::<Vec<_>>()];
    let expect = ref_norm(&r2, &pv(&params, "word.ffn_norm.gamma"), &pv(&params, "word.ffn_norm.beta"));
    assert_close(&to_mat(&out), &expect, 1e-12);
}

#[test]
fn word_transformer_is_permutation_equivariant() {
    let cfg = config(1, 8, 2, WordLayerKind::Transformer);
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let x = random_mat(&mut ChaCha8Rng::seed_from_u64(11), 5, 8);
    let perm = [3, 0, 4, 1, 2];
    let mut xp = Vec::new();
    for &i in &perm {
        xp.extend_from_slice(x.row(i));
    }
    let xp = Tensor::matrix(5, 8, xp).unwrap();
    let a = word_layer_out(&cfg, &params, &x);
    let b = word_layer_out(&cfg, &params, &xp);
    for (r, &i) in perm.iter().enumerate() {
        for (u, v) in b.row(r).iter().zip(a.row(i)) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}

#[test]
fn bilstm_matches_unrolled_recurrence() {
    let cfg = config(1, 8, 2, WordLayerKind::Bilstm);
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let x = random_mat(&mut ChaCha8Rng::seed_from_u64(13), 3, 8);
    let out = word_layer_out(&cfg, &params, &x);
    let xm = to_mat(&x);
    let f = ref_lstm_dir(&params, "word.forward", &xm, &[0, 1, 2]);
    let b = ref_lstm_dir(&params, "word.backward", &xm, &[2, 1, 0]);
    let expect: Mat = f.iter().zip(&b).map(|(u, v)| u.iter().chain(v).copied().collect()).collect();
    assert_close(&to_mat(&out), &expect, 1e-12);
}

#[test]
fn word_layer_dim_mismatch() {
    let cfg = config(1, 8, 2, WordLayerKind::Transformer);
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let mut tape = Tape::new(&params);
    let v = tape.constant(Tensor::zeros(&[2, 6]));
    assert!(word_interaction(&mut tape, v, &cfg.word_layer, &mut Dropout::disabled()).is_err());
    let mut bad = config(1, 8, 3, WordLayerKind::Transformer);
    bad.encoder.num_heads = 2;
    assert!(bad.validate().is_err());
}

#[test]
fn projection_cases() {
    let cfg = config(0, 3, 1, WordLayerKind::None);
    let mut params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let w = params.require("classifier.weight").unwrap();
    let b = params.require("classifier.bias").unwrap();
    params.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    params.get_mut(b).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    let x = random_mat(&mut ChaCha8Rng::seed_from_u64(16), 4, 3);
    let run = |params: &ParamStore| {
        let mut tape = Tape::new(params);
        let v = tape.constant(x.clone());
        let e = project_to_labels(&mut tape, v).unwrap();
        tape.value(e).clone()
    };
    let e = run(&params);
    for i in 0..4 {
        assert_eq!(e.row(i), &[0.5, -1.0, 2.0]);
    }
    params.get_mut(w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    params.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
    assert_eq!(run(&params), x);

    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    let e = run(&params);
    let expect = ref_linear(&to_mat(&x), &p(&params, "classifier.weight"), &pv(&params, "classifier.bias"));
    assert_close(&to_mat(&e), &expect, 1e-13);
}

#[test]
fn word_layer_and_extra_encoder_layer_have_equal_counts() {
    for (d, h) in [(8, 2), (64, 4), (768, 8)] {
        let mut word = config(2, d, h, WordLayerKind::Transformer);
        word.encoder.ffn_dim = 4 * d;
        word.word_layer.ffn_dim = 4 * d;
        let mut sub = word.clone();
        sub.encoder.num_layers = 3;
        sub.word_layer.kind = WordLayerKind::None;
        // count from the declared layouts without allocating full-size weights
        let count = |c: &ModelConfig| c.param_layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum::<usize>();
        assert_eq!(count(&word), count(&sub));
        if d <= 64 {
            let pw = word.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let ps = sub.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(count_parameters(&pw), count_parameters(&ps));
            assert_eq!(count_parameters(&pw), count(&word));
        }
    }
}

#[test]
fn check_params_reports_missing_and_extra() {
    let a = config(1, 8, 2, WordLayerKind::Transformer);
    let b = config(1, 8, 2, WordLayerKind::Bilstm);
    let pb = b.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = a.check_params(&pb).unwrap_err().to_string();
    assert!(err.contains("word.attn.query.weight") && err.contains("word.forward.bias"), "{err}");
    assert!(b.check_params(&pb).is_ok());
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for kind in [WordLayerKind::Transformer, WordLayerKind::Bilstm, WordLayerKind::None] {
        let cfg = config(1, 8, 2, kind);
        let model = Model::new(cfg.clone()).unwrap();
        let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let sent = sentence(&[2, 5, 9, 10, 7, 3], &[1, 2, 4]);
        let gold = [1, 2, 0];
        let f = |s: &ParamStore| -> (f64, Gradients) {
            let mut t = Tape::new(s);
            let l = model.nll(&mut t, &sent, &gold, None, &mut Dropout::disabled()).unwrap();
            (t.value(l).data()[0], t.backward(l).unwrap())
        };
        let (_, g) = f(&params);
        for id in params.ids() {
            let fd = finite_difference_param(|s| f(s).0, &params, id, 1e-5, Execution::Parallel);
            let err = relative_error(&g.dense(id, fd.len()), &fd);
            assert!(err < 1e-4, "{kind:?} {}: {err}", params.name(id));
        }
    }
}
