//! Transformer building blocks shared by the split decoder and the
//! autoregressive teacher: embeddings with sinusoidal positions, multi-head
//! attention, a pre-norm encoder, and a decoder stack that can run any
//! contiguous range of its layers.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Array, AttentionLayout, ParameterStore, Prng, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_enc_layers: usize,
    /// Total decoder layers N, split into N−K NAT layers and K MLM layers.
    pub n_dec_layers: usize,
    /// K. Zero means a monolithic NAT decoder with no renewal sub-module.
    pub k_mlm_layers: usize,
    pub max_len: usize,
    pub dropout: f32,
    /// Tie both output projections to the token embedding table.
    pub tie_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            n_enc_layers: 2,
            n_dec_layers: 3,
            k_mlm_layers: 1,
            max_len: 128,
            dropout: 0.1,
            tie_output: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_dec_layers == 0 || self.k_mlm_layers >= self.n_dec_layers {
            return err(format!(
                "need K < N, got K={} N={}",
                self.k_mlm_layers, self.n_dec_layers
            ));
        }
        if self.vocab_size < 6 {
            return err("vocab_size must cover the reserved tokens".into());
        }
        if self.max_len == 0 || self.ffn_dim == 0 || self.n_enc_layers == 0 {
            return err("max_len, ffn_dim and n_enc_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn nat_layers(&self) -> Range<usize> {
        0..self.n_dec_layers - self.k_mlm_layers
    }

    pub fn mlm_layers(&self) -> Range<usize> {
        self.n_dec_layers - self.k_mlm_layers..self.n_dec_layers
    }

    pub fn has_mlm(&self) -> bool {
        self.k_mlm_layers > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfAttnMode {
    Full,
    Causal,
}

/// Padded `batch × len` token layout; row `b * len + j` is position `j` of
/// sequence `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    pub pad: Vec<bool>,
}

impl SeqLayout {
    pub fn unpadded(len: usize) -> Self {
        SeqLayout {
            batch: 1,
            len,
            pad: vec![false; len],
        }
    }

    pub fn from_lengths(lengths: &[usize], len: usize) -> Self {
        let mut pad = Vec::with_capacity(lengths.len() * len);
        for &l in lengths {
            pad.extend((0..len).map(|j| j >= l));
        }
        SeqLayout {
            batch: lengths.len(),
            len,
            pad,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    fn attend(&self, queries: &SeqLayout, heads: usize, causal: bool) -> AttentionLayout {
        AttentionLayout {
            batch: self.batch,
            q_len: queries.len,
            k_len: self.len,
            heads,
            key_pad: self.pad.clone(),
            causal,
        }
    }
}

/// Encoder states; position 0 of each sequence is the `[LENGTH]` token.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Var,
    pub layout: SeqLayout,
}

/// Dropout that is active only when a generator is supplied.
pub struct Dropout<'r> {
    rate: f32,
    rng: Option<&'r mut Prng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f32, rng: &'r mut Prng) -> Self {
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, v: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => tape.dropout(v, self.rate, rng),
            _ => v,
        }
    }
}

/// Sinusoidal table: `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(…)`.
pub fn positional_encoding(max_len: usize, d: usize) -> Vec<f32> {
    let mut pe = vec![0.0f32; max_len * d];
    for p in 0..max_len {
        for i in (0..d).step_by(2) {
            let angle = p as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[p * d + i] = angle.sin() as f32;
            if i + 1 < d {
                pe[p * d + i + 1] = angle.cos() as f32;
            }
        }
    }
    pe
}

fn xavier(rng: &mut Prng, rows: usize, cols: usize) -> Array {
    let bound = (6.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Array::new(vec![rows, cols], data).unwrap()
}

fn add_linear(store: &mut ParameterStore, name: &str, rows: usize, cols: usize, rng: &mut Prng) -> Result<()> {
    store.insert(format!("{name}.w"), xavier(rng, rows, cols))?;
    store.insert(format!("{name}.b"), Array::zeros(vec![cols]))?;
    Ok(())
}

fn add_norm(store: &mut ParameterStore, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.g"), Array::new(vec![d], vec![1.0; d])?)?;
    store.insert(format!("{name}.b"), Array::zeros(vec![d]))?;
    Ok(())
}

fn add_attention(store: &mut ParameterStore, name: &str, d: usize, rng: &mut Prng) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        add_linear(store, &format!("{name}.{proj}"), d, d, rng)?;
    }
    Ok(())
}

/// Token embedding table with N(0, d^-1/2) entries.
pub fn add_embedding(store: &mut ParameterStore, cfg: &ModelConfig, rng: &mut Prng) -> Result<()> {
    let normal = Normal::new(0.0f32, (cfg.d_model as f32).powf(-0.5)).unwrap();
    let data = (0..cfg.vocab_size * cfg.d_model).map(|_| normal.sample(rng)).collect();
    store.insert("embed", Array::new(vec![cfg.vocab_size, cfg.d_model], data)?)?;
    Ok(())
}

pub fn add_encoder(store: &mut ParameterStore, cfg: &ModelConfig, rng: &mut Prng) -> Result<()> {
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.{l}");
        add_norm(store, &format!("{p}.attn_norm"), d)?;
        add_attention(store, &format!("{p}.self"), d, rng)?;
        add_norm(store, &format!("{p}.ffn_norm"), d)?;
        add_linear(store, &format!("{p}.ffn1"), d, f, rng)?;
        add_linear(store, &format!("{p}.ffn2"), f, d, rng)?;
    }
    add_norm(store, "enc.norm", d)
}

pub fn add_decoder_layers(store: &mut ParameterStore, cfg: &ModelConfig, n: usize, rng: &mut Prng) -> Result<()> {
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    for l in 0..n {
        let p = format!("dec.{l}");
        add_norm(store, &format!("{p}.self_norm"), d)?;
        add_attention(store, &format!("{p}.self"), d, rng)?;
        add_norm(store, &format!("{p}.cross_norm"), d)?;
        add_attention(store, &format!("{p}.cross"), d, rng)?;
        add_norm(store, &format!("{p}.ffn_norm"), d)?;
        add_linear(store, &format!("{p}.ffn1"), d, f, rng)?;
        add_linear(store, &format!("{p}.ffn2"), f, d, rng)?;
    }
    Ok(())
}

/// Final norm plus a `[d × V]` projection (omitted when tied to the embedding).
pub fn add_output_head(store: &mut ParameterStore, name: &str, cfg: &ModelConfig, rng: &mut Prng) -> Result<()> {
    add_norm(store, &format!("{name}.norm"), cfg.d_model)?;
    if !cfg.tie_output {
        store.insert(format!("{name}.w"), xavier(rng, cfg.d_model, cfg.vocab_size))?;
    }
    Ok(())
}

pub fn linear(tape: &mut Tape<'_>, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(&format!("{name}.w"))?;
    let b = tape.param(&format!("{name}.b"))?;
    Ok(tape.linear(x, w, Some(b)))
}

pub fn norm(tape: &mut Tape<'_>, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(&format!("{name}.g"))?;
    let b = tape.param(&format!("{name}.b"))?;
    Ok(tape.layer_norm(x, g, b))
}

/// Token embedding × sqrt(d) with no positional signal.
pub fn token_embedding(tape: &mut Tape<'_>, cfg: &ModelConfig, ids: &[usize]) -> Result<Var> {
    let table = tape.param("embed")?;
    let e = tape.embedding(table, ids)?;
    Ok(tape.scale(e, (cfg.d_model as f32).sqrt()))
}

/// Adds position `j` of the sinusoidal table to row `b * len + j`.
pub fn add_positions(tape: &mut Tape<'_>, cfg: &ModelConfig, x: Var, layout: &SeqLayout) -> Result<Var> {
    if layout.len > cfg.max_len {
        return Err(Error::Length {
            len: layout.len,
            max_len: cfg.max_len,
        });
    }
    let d = cfg.d_model;
    let table = positional_encoding(layout.len, d);
    let mut data = Vec::with_capacity(layout.rows() * d);
    for _ in 0..layout.batch {
        data.extend_from_slice(&table);
    }
    let pe = tape.constant(Array::new(vec![layout.rows(), d], data)?);
    Ok(tape.add(x, pe))
}

/// Token embedding × sqrt(d) plus sinusoidal positions.
pub fn embed(tape: &mut Tape<'_>, cfg: &ModelConfig, ids: &[usize], layout: &SeqLayout) -> Result<Var> {
    if ids.len() != layout.rows() {
        return Err(Error::Shape(format!(
            "{} ids for a {}×{} layout",
            ids.len(),
            layout.batch,
            layout.len
        )));
    }
    if layout.len > cfg.max_len {
        return Err(Error::Length {
            len: layout.len,
            max_len: cfg.max_len,
        });
    }
    let tok = token_embedding(tape, cfg, ids)?;
    add_positions(tape, cfg, tok, layout)
}

/// Projections, per-head scaled dot-product attention, output projection.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    name: &str,
    queries: Var,
    keys_values: Var,
    layout: AttentionLayout,
) -> Result<Var> {
    let q = linear(tape, &format!("{name}.q"), queries)?;
    let k = linear(tape, &format!("{name}.k"), keys_values)?;
    let v = linear(tape, &format!("{name}.v"), keys_values)?;
    let a = tape.attention(q, k, v, layout);
    linear(tape, &format!("{name}.o"), a)
}

pub fn feed_forward(tape: &mut Tape<'_>, name: &str, x: Var, drop: &mut Dropout<'_>) -> Result<Var> {
    let h = linear(tape, &format!("{name}.ffn1"), x)?;
    let h = tape.relu(h);
    let h = drop.apply(tape, h);
    linear(tape, &format!("{name}.ffn2"), h)
}

/// Encodes `[LENGTH] x₁ … x_T` sequences laid out per `layout`.
pub fn encode(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    ids: &[usize],
    layout: &SeqLayout,
    drop: &mut Dropout<'_>,
) -> Result<EncoderOutput> {
    let mut x = embed(tape, cfg, ids, layout)?;
    x = drop.apply(tape, x);
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.{l}");
        let h = norm(tape, &format!("{p}.attn_norm"), x)?;
        let h = multi_head_attention(tape, &format!("{p}.self"), h, h, layout.attend(layout, cfg.n_heads, false))?;
        let h = drop.apply(tape, h);
        x = tape.add(x, h);
        let h = norm(tape, &format!("{p}.ffn_norm"), x)?;
        let h = feed_forward(tape, &p, h, drop)?;
        let h = drop.apply(tape, h);
        x = tape.add(x, h);
    }
    let states = norm(tape, "enc.norm", x)?;
    Ok(EncoderOutput {
        states,
        layout: layout.clone(),
    })
}

/// Runs decoder layers `range` (self-attention, cross-attention to `enc`,
/// feed-forward) over `x`, which already carries positional information.
#[allow(clippy::too_many_arguments)]
pub fn decoder_stack(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    mut x: Var,
    tgt: &SeqLayout,
    enc: &EncoderOutput,
    range: Range<usize>,
    mode: SelfAttnMode,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    if range.is_empty() {
        return Err(Error::Config("decoder layer range is empty".into()));
    }
    if range.end > cfg.n_dec_layers {
        return Err(Error::Config(format!(
            "decoder layers {range:?} exceed N={}",
            cfg.n_dec_layers
        )));
    }
    if enc.layout.batch != tgt.batch {
        return Err(Error::Shape("encoder/decoder batch mismatch".into()));
    }
    let causal = mode == SelfAttnMode::Causal;
    for l in range {
        let p = format!("dec.{l}");
        let h = norm(tape, &format!("{p}.self_norm"), x)?;
        let h = multi_head_attention(tape, &format!("{p}.self"), h, h, tgt.attend(tgt, cfg.n_heads, causal))?;
        let h = drop.apply(tape, h);
        x = tape.add(x, h);
        let h = norm(tape, &format!("{p}.cross_norm"), x)?;
        let h = multi_head_attention(
            tape,
            &format!("{p}.cross"),
            h,
            enc.states,
            enc.layout.attend(tgt, cfg.n_heads, false),
        )?;
        let h = drop.apply(tape, h);
        x = tape.add(x, h);
        let h = norm(tape, &format!("{p}.ffn_norm"), x)?;
        let h = feed_forward(tape, &p, h, drop)?;
        let h = drop.apply(tape, h);
        x = tape.add(x, h);
    }
    Ok(x)
}

/// Final norm and vocabulary projection for the head called `name`.
pub fn output_logits(tape: &mut Tape<'_>, cfg: &ModelConfig, name: &str, x: Var) -> Result<Var> {
    let h = norm(tape, &format!("{name}.norm"), x)?;
    if cfg.tie_output {
        let table = tape.param("embed")?;
        Ok(tape.matmul(h, table, true))
    } else {
        let w = tape.param(&format!("{name}.w"))?;
        Ok(tape.linear(h, w, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            n_enc_layers: 2,
            n_dec_layers: 2,
            k_mlm_layers: 1,
            max_len: 16,
            dropout: 0.0,
            tie_output: false,
        }
    }

    fn toy_store(cfg: &ModelConfig) -> ParameterStore {
        let mut rng = Prng::seed_from_u64(7);
        let mut s = ParameterStore::new();
        add_embedding(&mut s, cfg, &mut rng).unwrap();
        add_encoder(&mut s, cfg, &mut rng).unwrap();
        add_decoder_layers(&mut s, cfg, cfg.n_dec_layers, &mut rng).unwrap();
        s
    }

    #[test]
    fn config_validation() {
        let mut c = toy_cfg();
        assert!(c.validate().is_ok());
        c.k_mlm_layers = 2;
        assert!(c.validate().is_err());
        c.k_mlm_layers = 1;
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn nat_layer_count_when_k_is_n_minus_one() {
        let mut c = toy_cfg();
        c.n_dec_layers = 4;
        c.k_mlm_layers = 3;
        assert_eq!(c.nat_layers().len(), 1);
        assert_eq!(c.mlm_layers(), 1..4);
    }

    #[test]
    fn positional_row_zero_alternates() {
        let pe = positional_encoding(2, 6);
        assert_eq!(&pe[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embed_shapes_and_positions() {
        let cfg = toy_cfg();
        let s = toy_store(&cfg);
        let mut t = Tape::new(&s, false);
        let e = embed(&mut t, &cfg, &[], &SeqLayout::unpadded(0)).unwrap();
        assert_eq!(t.shape(e), &[0, 8]);
        let e = embed(&mut t, &cfg, &[7, 7], &SeqLayout::unpadded(2)).unwrap();
        let v = t.value(e);
        assert_ne!(&v[..8], &v[8..]);
        assert!(matches!(
            embed(&mut t, &cfg, &[20], &SeqLayout::unpadded(1)),
            Err(Error::OutOfVocab { .. })
        ));
        let long = vec![6; 17];
        assert!(matches!(
            embed(&mut t, &cfg, &long, &SeqLayout::unpadded(17)),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn encode_single_token() {
        let cfg = toy_cfg();
        let s = toy_store(&cfg);
        let mut t = Tape::new(&s, false);
        let enc = encode(&mut t, &cfg, &[3], &SeqLayout::unpadded(1), &mut Dropout::off()).unwrap();
        assert_eq!(t.shape(enc.states), &[1, 8]);
    }

    #[test]
    fn empty_layer_range_rejected() {
        let cfg = toy_cfg();
        let s = toy_store(&cfg);
        let mut t = Tape::new(&s, false);
        let layout = SeqLayout::unpadded(2);
        let enc = encode(&mut t, &cfg, &[3, 8], &layout, &mut Dropout::off()).unwrap();
        let x = embed(&mut t, &cfg, &[9, 10], &layout).unwrap();
        let r = decoder_stack(&mut t, &cfg, x, &layout, &enc, 1..1, SelfAttnMode::Full, &mut Dropout::off());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
