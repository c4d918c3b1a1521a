use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use renewnat::numerics::{AttentionLayout, ParameterStore, Prng, Tape, LAYER_NORM_EPS};
use renewnat::transformer::{
    add_embedding, add_encoder, embed, encode, multi_head_attention, Dropout, ModelConfig, SeqLayout,
};
use renewnat::Error;

fn toy_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        n_enc_layers: 2,
        n_dec_layers: 2,
        k_mlm_layers: 1,
        max_len: 32,
        dropout: 0.0,
        tie_output: false,
    }
}

fn encoder_store(cfg: &ModelConfig, seed: u64) -> ParameterStore {
    let mut rng = Prng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    add_embedding(&mut s, cfg, &mut rng).unwrap();
    add_encoder(&mut s, cfg, &mut rng).unwrap();
    // non-trivial norms and biases so the oracle exercises every term
    let names: Vec<String> = s.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        if n.ends_with(".b") || n.ends_with(".g") {
            let a = s.get_mut(&n).unwrap();
            for (i, v) in a.data_mut().iter_mut().enumerate() {
                *v += 0.1 * ((i as f32 * 1.7 + n.len() as f32).sin());
            }
        }
    }
    s
}

// Plain f64 reimplementation, row-major `Vec<Vec<f64>>` throughout.

type Mat = Vec<Vec<f64>>;

fn param(s: &ParameterStore, name: &str) -> Vec<f64> {
    s.get(name).unwrap_or_else(|| panic!("{name}")).data().iter().map(|&v| v as f64).collect()
}

fn lin(s: &ParameterStore, name: &str, x: &Mat) -> Mat {
    let w = s.get(&format!("{name}.w")).unwrap();
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let w: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let b = param(s, &format!("{name}.b"));
    x.iter()
        .map(|r| {
            (0..cols)
                .map(|j| b[j] + (0..rows).map(|i| r[i] * w[i * cols + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn ln(s: &ParameterStore, name: &str, x: &Mat) -> Mat {
    let g = param(s, &format!("{name}.g"));
    let b = param(s, &format!("{name}.b"));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + LAYER_NORM_EPS as f64).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) / sd * g[j] + b[j]).collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn mha(s: &ParameterStore, name: &str, xq: &Mat, xkv: &Mat, heads: usize, key_pad: &[bool]) -> Mat {
    let q = lin(s, &format!("{name}.q"), xq);
    let k = lin(s, &format!("{name}.k"), xkv);
    let v = lin(s, &format!("{name}.v"), xkv);
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; xq.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..xq.len() {
            let scores: Vec<Option<f64>> = (0..xkv.len())
                .map(|j| {
                    (!key_pad[j]).then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|x| (x - max).exp()).sum();
            for (j, sc) in scores.iter().enumerate() {
                if let Some(x) = sc {
                    let p = (x - max).exp() / z;
                    for c in cols.clone() {
                        out[i][c] += p * v[j][c];
                    }
                }
            }
        }
    }
    lin(s, &format!("{name}.o"), &out)
}

fn oracle_encode(s: &ParameterStore, cfg: &ModelConfig, ids: &[usize]) -> Mat {
    let d = cfg.d_model;
    let table = param(s, "embed");
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(p, &id)| {
            (0..d)
                .map(|i| {
                    let pair = (i / 2 * 2) as f64;
                    let angle = p as f64 / 10000f64.powf(pair / d as f64);
                    let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                    table[id * d + i] * (d as f64).sqrt() + pe
                })
                .collect()
        })
        .collect();
    let no_pad = vec![false; ids.len()];
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.{l}");
        let h = ln(s, &format!("{p}.attn_norm"), &x);
        let h = mha(s, &format!("{p}.self"), &h, &h, cfg.n_heads, &no_pad);
        x = add(&x, &h);
        let h = ln(s, &format!("{p}.ffn_norm"), &x);
        let h: Mat = lin(s, &format!("{p}.ffn1"), &h)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let h = lin(s, &format!("{p}.ffn2"), &h);
        x = add(&x, &h);
    }
    ln(s, "enc.norm", &x)
}

fn run_encode(s: &ParameterStore, cfg: &ModelConfig, ids: &[usize], layout: &SeqLayout) -> Vec<f32> {
    let mut tape = Tape::new(s, false);
    let out = encode(&mut tape, cfg, ids, layout, &mut Dropout::off()).unwrap();
    tape.value(out.states).to_vec()
}

#[test]
fn encoder_matches_scalar_oracle() {
    let cfg = toy_cfg();
    let s = encoder_store(&cfg, 7);
    let ids = [3, 9, 14, 9, 6, 19];
    let got = run_encode(&s, &cfg, &ids, &SeqLayout::unpadded(ids.len()));
    let want = oracle_encode(&s, &cfg, &ids);
    for (r, row) in want.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            let g = got[r * cfg.d_model + c] as f64;
            assert!((g - w).abs() < 1e-4, "row {r} col {c}: {g} vs {w}");
        }
    }
}

#[test]
fn two_head_attention_matches_scalar_oracle() {
    let cfg = toy_cfg();
    let s = encoder_store(&cfg, 11);
    let mut rng = Prng::seed_from_u64(3);
    let (nq, nk, d) = (4, 5, cfg.d_model);
    let q: Mat = (0..nq).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let kv: Mat = (0..nk).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let key_pad = [false, true, false, false, true];
    let want = mha(&s, "enc.0.self", &q, &kv, 2, &key_pad);

    let flat = |m: &Mat| renewnat::numerics::Array::new(vec![m.len(), d], m.iter().flatten().map(|&v| v as f32).collect()).unwrap();
    let mut tape = Tape::new(&s, false);
    let qv = tape.constant(flat(&q));
    let kvv = tape.constant(flat(&kv));
    let layout = AttentionLayout {
        batch: 1,
        q_len: nq,
        k_len: nk,
        heads: 2,
        key_pad: key_pad.to_vec(),
        causal: false,
    };
    let out = multi_head_attention(&mut tape, "enc.0.self", qv, kvv, layout).unwrap();
    for (r, row) in want.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            let g = tape.value(out)[r * d + c] as f64;
            assert!((g - w).abs() < 1e-5, "row {r} col {c}: {g} vs {w}");
        }
    }
}

#[test]
fn single_key_attention_is_the_projected_value() {
    let cfg = toy_cfg();
    let s = encoder_store(&cfg, 5);
    let d = cfg.d_model;
    let kv: Mat = vec![(0..d).map(|i| i as f64 * 0.3 - 1.0).collect()];
    let want = lin(&s, "enc.1.self.o", &lin(&s, "enc.1.self.v", &kv))[0].clone();
    for seed in 0..3u64 {
        let mut rng = Prng::seed_from_u64(seed);
        let nq = 3;
        let q: Vec<f32> = (0..nq * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new(&s, false);
        let qv = tape.constant(renewnat::numerics::Array::new(vec![nq, d], q).unwrap());
        let kvv = tape.constant(renewnat::numerics::Array::new(vec![1, d], kv[0].iter().map(|&v| v as f32).collect()).unwrap());
        let layout = AttentionLayout {
            batch: 1,
            q_len: nq,
            k_len: 1,
            heads: 2,
            key_pad: vec![false],
            causal: false,
        };
        let out = multi_head_attention(&mut tape, "enc.1.self", qv, kvv, layout).unwrap();
        for r in 0..nq {
            for c in 0..d {
                assert!((tape.value(out)[r * d + c] as f64 - want[c]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn embed_rejects_out_of_vocab_and_handles_empty() {
    let cfg = toy_cfg();
    let s = encoder_store(&cfg, 1);
    let mut tape = Tape::new(&s, false);
    let e = embed(&mut tape, &cfg, &[3, 20], &SeqLayout::unpadded(2)).unwrap_err();
    assert!(matches!(e, Error::OutOfVocab { id: 20, .. }), "{e:?}");
    let v = embed(&mut tape, &cfg, &[], &SeqLayout::unpadded(0)).unwrap();
    assert_eq!(tape.shape(v), &[0, cfg.d_model]);
}

#[test]
fn encode_rejects_over_long_input() {
    let cfg = toy_cfg();
    let s = encoder_store(&cfg, 1);
    let ids = vec![6; cfg.max_len + 1];
    let mut tape = Tape::new(&s, false);
    let e = encode(&mut tape, &cfg, &ids, &SeqLayout::unpadded(ids.len()), &mut Dropout::off()).unwrap_err();
    assert!(matches!(e, Error::Length { .. }), "{e:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Changing the ids stored in padded slots leaves every real position untouched.
    #[test]
    fn pad_content_does_not_leak(
        short in proptest::collection::vec(6usize..20, 1..6),
        long_extra in proptest::collection::vec(6usize..20, 1..5),
        filler_a in proptest::collection::vec(0usize..20, 10),
        filler_b in proptest::collection::vec(0usize..20, 10),
    ) {
        let cfg = toy_cfg();
        let s = encoder_store(&cfg, 9);
        let d = cfg.d_model;
        let long: Vec<usize> = short.iter().chain(&long_extra).cloned().collect();
        let width = long.len();
        let layout = SeqLayout::from_lengths(&[short.len(), width], width);
        let batch = |filler: &[usize]| {
            let mut ids = short.clone();
            ids.extend(&filler[..width - short.len()]);
            ids.extend(&long);
            run_encode(&s, &cfg, &ids, &layout)
        };
        let (a, b) = (batch(&filler_a), batch(&filler_b));
        let alone = run_encode(&s, &cfg, &short, &SeqLayout::unpadded(short.len()));
        for j in 0..short.len() * d {
            prop_assert_eq!(a[j], b[j]);
            prop_assert!((a[j] - alone[j]).abs() < 1e-5);
        }
        for j in width * d..2 * width * d {
            prop_assert_eq!(a[j], b[j]);
        }
    }
}
