//! Autoregressive teacher: the same encoder, a causal decoder over
//! `[BOS] y₁ … y_T` predicting `y₁ … y_T [EOS]`, and an incremental step
//! with cached keys and values for beam search.

use rand::{Rng, SeedableRng};

use crate::data::{Batch, BOS, EOS, LENGTH, PAD};
use crate::error::{Error, Result};
use crate::model::{apply_gradients, check_same_layout, learning_rate, log_softmax, TrainConfig};
use crate::numerics::{Array, AttentionLayout, ParameterStore, Prng, Tape, Var};
use crate::transformer::{
    self, add_decoder_layers, add_embedding, add_encoder, add_output_head, decoder_stack, encode,
    positional_encoding, Dropout, EncoderOutput, ModelConfig, SelfAttnMode, SeqLayout,
};

#[derive(Debug, Clone)]
pub struct Teacher {
    pub cfg: ModelConfig,
    pub params: ParameterStore,
}

impl Teacher {
    /// All `n_dec_layers` layers are causal; `k_mlm_layers` is ignored.
    pub fn new(mut cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.k_mlm_layers = 0;
        cfg.validate()?;
        let mut rng = Prng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        add_embedding(&mut params, &cfg, &mut rng)?;
        add_encoder(&mut params, &cfg, &mut rng)?;
        add_decoder_layers(&mut params, &cfg, cfg.n_dec_layers, &mut rng)?;
        add_output_head(&mut params, "out", &cfg, &mut rng)?;
        Ok(Teacher { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParameterStore) -> Result<Self> {
        let reference = Self::new(cfg, 0)?;
        check_same_layout(&reference.params, &params)?;
        Ok(Teacher {
            cfg: reference.cfg,
            params,
        })
    }

    pub fn encode_source(&self, tape: &mut Tape<'_>, src: &[usize]) -> Result<EncoderOutput> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        let mut ids = Vec::with_capacity(src.len() + 1);
        ids.push(LENGTH);
        ids.extend_from_slice(src);
        encode(tape, &self.cfg, &ids, &SeqLayout::unpadded(ids.len()), &mut Dropout::off())
    }

    /// Teacher-forced logits for `[BOS] + inputs`, laid out per `tgt`.
    pub fn forced_logits(
        &self,
        tape: &mut Tape<'_>,
        inputs: &[usize],
        tgt: &SeqLayout,
        enc: &EncoderOutput,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let x = transformer::embed(tape, &self.cfg, inputs, tgt)?;
        let x = drop.apply(tape, x);
        let x = decoder_stack(
            tape,
            &self.cfg,
            x,
            tgt,
            enc,
            0..self.cfg.n_dec_layers,
            SelfAttnMode::Causal,
            drop,
        )?;
        transformer::output_logits(tape, &self.cfg, "out", x)
    }

    /// Label-smoothed next-token loss over a batch.
    pub fn forward_loss(&self, tape: &mut Tape<'_>, batch: &Batch, smoothing: f32, rng: &mut Prng) -> Result<Var> {
        let mut drop_rng = Prng::seed_from_u64(rng.random());
        let mut drop = Dropout::train(self.cfg.dropout, &mut drop_rng);
        let src = SeqLayout::from_lengths(
            &batch.src_len.iter().map(|l| l + 1).collect::<Vec<_>>(),
            batch.src_width,
        );
        let enc = encode(tape, &self.cfg, &batch.src, &src, &mut drop)?;
        let width = batch.tgt_width + 1;
        let lens: Vec<usize> = batch.tgt_len.iter().map(|l| l + 1).collect();
        let tgt = SeqLayout::from_lengths(&lens, width);
        let mut inputs = Vec::with_capacity(tgt.rows());
        let mut targets = Vec::with_capacity(tgt.rows());
        for b in 0..batch.size() {
            let y = batch.target(b);
            inputs.push(BOS);
            inputs.extend_from_slice(y);
            targets.extend_from_slice(y);
            targets.push(EOS);
            inputs.extend(std::iter::repeat_n(PAD, width - lens[b]));
            targets.extend(std::iter::repeat_n(PAD, width - lens[b]));
        }
        let weights: Vec<f32> = tgt.pad.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
        let logits = self.forced_logits(tape, &inputs, &tgt, &enc, &mut drop)?;
        tape.cross_entropy(logits, &targets, &weights, smoothing, "teacher loss")
    }

    /// Sum of `log p(y_t | y_<t, x)` over `tokens` followed by `[EOS]`.
    pub fn sequence_log_prob(&self, src: &[usize], tokens: &[usize]) -> Result<f32> {
        let mut tape = Tape::new(&self.params, false);
        let enc = self.encode_source(&mut tape, src)?;
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(tokens);
        let layout = SeqLayout::unpadded(inputs.len());
        let logits = self.forced_logits(&mut tape, &inputs, &layout, &enc, &mut Dropout::off())?;
        let v = self.cfg.vocab_size;
        let z = tape.value(logits);
        let mut total = 0.0f32;
        for (t, &y) in tokens.iter().chain(std::iter::once(&EOS)).enumerate() {
            total += log_softmax(&z[t * v..(t + 1) * v])[y];
        }
        Ok(total)
    }

    /// Cross-attention keys and values of every layer for one source.
    pub fn start(&self, src: &[usize]) -> Result<DecoderState> {
        let mut tape = Tape::new(&self.params, false);
        let enc = self.encode_source(&mut tape, src)?;
        let mut cross = Vec::with_capacity(self.cfg.n_dec_layers);
        for l in 0..self.cfg.n_dec_layers {
            let k = transformer::linear(&mut tape, &format!("dec.{l}.cross.k"), enc.states)?;
            let v = transformer::linear(&mut tape, &format!("dec.{l}.cross.v"), enc.states)?;
            cross.push((tape.value(k).to_vec(), tape.value(v).to_vec()));
        }
        Ok(DecoderState {
            src_len: enc.layout.len,
            cross,
            cache: vec![(Vec::new(), Vec::new()); self.cfg.n_dec_layers],
            beams: 1,
            steps: 0,
        })
    }

    /// Feeds one token per live hypothesis and returns next-token
    /// log-probabilities, `beams × V`.
    pub fn step(&self, state: &mut DecoderState, tokens: &[usize]) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        let (d, b) = (cfg.d_model, tokens.len());
        if b != state.beams {
            return Err(Error::Shape(format!("{b} tokens for {} hypotheses", state.beams)));
        }
        let t = state.steps;
        if t >= cfg.max_len {
            return Err(Error::Length {
                len: t + 1,
                max_len: cfg.max_len,
            });
        }
        let mut tape = Tape::new(&self.params, false);
        let x = transformer::token_embedding(&mut tape, cfg, tokens)?;
        let pe = positional_encoding(t + 1, d);
        let row = &pe[t * d..];
        let pos = tape.constant(Array::new(vec![b, d], row.repeat(b))?);
        let mut x = tape.add(x, pos);
        let heads = cfg.n_heads;
        for l in 0..cfg.n_dec_layers {
            let p = format!("dec.{l}");
            let h = transformer::norm(&mut tape, &format!("{p}.self_norm"), x)?;
            let q = transformer::linear(&mut tape, &format!("{p}.self.q"), h)?;
            let k = transformer::linear(&mut tape, &format!("{p}.self.k"), h)?;
            let v = transformer::linear(&mut tape, &format!("{p}.self.v"), h)?;
            let (kc, vc) = &mut state.cache[l];
            *kc = append_rows(kc, tape.value(k), b, t, d);
            *vc = append_rows(vc, tape.value(v), b, t, d);
            let kv = tape.constant(Array::new(vec![b * (t + 1), d], kc.clone())?);
            let vv = tape.constant(Array::new(vec![b * (t + 1), d], vc.clone())?);
            let layout = AttentionLayout {
                batch: b,
                q_len: 1,
                k_len: t + 1,
                heads,
                key_pad: vec![false; b * (t + 1)],
                causal: false,
            };
            let a = tape.attention(q, kv, vv, layout);
            let a = transformer::linear(&mut tape, &format!("{p}.self.o"), a)?;
            x = tape.add(x, a);

            let h = transformer::norm(&mut tape, &format!("{p}.cross_norm"), x)?;
            let q = transformer::linear(&mut tape, &format!("{p}.cross.q"), h)?;
            let (ek, ev) = &state.cross[l];
            let s = state.src_len;
            let kv = tape.constant(Array::new(vec![b * s, d], ek.repeat(b))?);
            let vv = tape.constant(Array::new(vec![b * s, d], ev.repeat(b))?);
            let layout = AttentionLayout {
                batch: b,
                q_len: 1,
                k_len: s,
                heads,
                key_pad: vec![false; b * s],
                causal: false,
            };
            let a = tape.attention(q, kv, vv, layout);
            let a = transformer::linear(&mut tape, &format!("{p}.cross.o"), a)?;
            x = tape.add(x, a);

            let h = transformer::norm(&mut tape, &format!("{p}.ffn_norm"), x)?;
            let f = transformer::feed_forward(&mut tape, &p, h, &mut Dropout::off())?;
            x = tape.add(x, f);
        }
        let logits = transformer::output_logits(&mut tape, cfg, "out", x)?;
        state.steps += 1;
        let v = cfg.vocab_size;
        Ok(tape.value(logits).chunks_exact(v).flat_map(log_softmax).collect())
    }
}

/// Per-source decoding state: projected encoder keys/values and the
/// self-attention cache of every live hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState {
    src_len: usize,
    cross: Vec<(Vec<f32>, Vec<f32>)>,
    cache: Vec<(Vec<f32>, Vec<f32>)>,
    beams: usize,
    steps: usize,
}

impl DecoderState {
    pub fn beams(&self) -> usize {
        self.beams
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Keeps hypotheses `parents` (in that order, repeats allowed).
    pub fn reorder(&mut self, parents: &[usize]) {
        let d = self.cross.first().map_or(0, |c| c.0.len() / self.src_len.max(1));
        let t = self.steps;
        for (k, v) in &mut self.cache {
            *k = gather_blocks(k, parents, t * d);
            *v = gather_blocks(v, parents, t * d);
        }
        self.beams = parents.len();
    }
}

fn gather_blocks(data: &[f32], parents: &[usize], block: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(parents.len() * block);
    for &p in parents {
        out.extend_from_slice(&data[p * block..(p + 1) * block]);
    }
    out
}

/// Appends one `d`-row per hypothesis to a `b × t × d` cache.
fn append_rows(cache: &[f32], new: &[f32], b: usize, t: usize, d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(b * (t + 1) * d);
    for i in 0..b {
        out.extend_from_slice(&cache[i * t * d..(i + 1) * t * d]);
        out.extend_from_slice(&new[i * d..(i + 1) * d]);
    }
    out
}

pub struct TeacherTrainer {
    pub teacher: Teacher,
    pub cfg: TrainConfig,
    rng: Prng,
    step: usize,
}

impl TeacherTrainer {
    pub fn new(teacher: Teacher, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(TeacherTrainer {
            teacher,
            cfg,
            rng: Prng::seed_from_u64(seed),
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut Prng {
        &mut self.rng
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<f32> {
        let (loss, grads) = {
            let mut tape = Tape::new(&self.teacher.params, true);
            let loss = self
                .teacher
                .forward_loss(&mut tape, batch, self.cfg.label_smoothing, &mut self.rng)?;
            (tape.scalar(loss), tape.backward(loss)?)
        };
        let lr = learning_rate(self.cfg.lr, self.cfg.warmup_steps, self.step + 1);
        apply_gradients(&mut self.teacher.params, grads, lr, self.cfg.adam)?;
        self.step += 1;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Teacher {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            n_enc_layers: 1,
            n_dec_layers: 2,
            k_mlm_layers: 1,
            max_len: 12,
            dropout: 0.0,
            tie_output: false,
        };
        Teacher::new(cfg, 11).unwrap()
    }

    #[test]
    fn incremental_steps_match_forced_decoding() {
        let t = toy();
        let src = [6, 9, 12];
        let prefix = [BOS, 7, 8, 13];
        let mut tape = Tape::new(&t.params, false);
        let enc = t.encode_source(&mut tape, &src).unwrap();
        let logits = t
            .forced_logits(&mut tape, &prefix, &SeqLayout::unpadded(4), &enc, &mut Dropout::off())
            .unwrap();
        let v = t.cfg.vocab_size;
        let full: Vec<f32> = tape.value(logits).chunks_exact(v).flat_map(log_softmax).collect();
        let mut state = t.start(&src).unwrap();
        for (i, &tok) in prefix.iter().enumerate() {
            let lp = t.step(&mut state, &[tok]).unwrap();
            for (a, b) in lp.iter().zip(&full[i * v..(i + 1) * v]) {
                assert!((a - b).abs() < 1e-5, "step {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn reorder_duplicates_hypotheses() {
        let t = toy();
        let mut state = t.start(&[6, 7]).unwrap();
        t.step(&mut state, &[BOS]).unwrap();
        state.reorder(&[0, 0]);
        let lp = t.step(&mut state, &[8, 8]).unwrap();
        let v = t.cfg.vocab_size;
        assert_eq!(&lp[..v], &lp[v..]);
        assert_eq!(state.beams(), 2);
        assert_eq!(state.steps(), 2);
    }

    #[test]
    fn sequence_log_prob_is_negative() {
        let t = toy();
        let lp = t.sequence_log_prob(&[6, 7], &[8, 9]).unwrap();
        assert!(lp < 0.0 && lp.is_finite());
    }

    #[test]
    fn causal_prefix_invariance() {
        let t = toy();
        let mut tape = Tape::new(&t.params, false);
        let enc = t.encode_source(&mut tape, &[6, 7, 8]).unwrap();
        let layout = SeqLayout::unpadded(4);
        let a = t.forced_logits(&mut tape, &[BOS, 9, 10, 11], &layout, &enc, &mut Dropout::off()).unwrap();
        let b = t.forced_logits(&mut tape, &[BOS, 9, 17, 11], &layout, &enc, &mut Dropout::off()).unwrap();
        let v = t.cfg.vocab_size;
        assert_eq!(&tape.value(a)[..2 * v], &tape.value(b)[..2 * v]);
        assert_ne!(&tape.value(a)[2 * v..3 * v], &tape.value(b)[2 * v..3 * v]);
    }
}
