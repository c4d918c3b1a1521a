//! The split decoder.
//!
//! The first `N−K` decoder layers (the NAT sub-module) read a copy of the
//! source embeddings and predict a potential translation in one parallel
//! pass. The last `K` layers (the MLM sub-module) read token embeddings of a
//! partially masked sequence and re-predict the masked positions. Both
//! share the encoder, the embedding table and the positional table.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::data::{Batch, LENGTH, MASK};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Array, ParameterStore, Prng, Tape, Var};
use crate::transformer::{
    self, add_decoder_layers, add_embedding, add_encoder, add_output_head, decoder_stack, encode, Dropout,
    EncoderOutput, ModelConfig, SelfAttnMode, SeqLayout,
};

/// Largest length offset the length head distinguishes (C).
pub const MAX_LENGTH_OFFSET: usize = 30;
pub const LENGTH_CLASSES: usize = 2 * MAX_LENGTH_OFFSET + 1;

/// Class index of the clamped offset `t_y − t_x`.
pub fn length_class(t_x: usize, t_y: usize) -> usize {
    let c = MAX_LENGTH_OFFSET as isize;
    let delta = (t_y as isize - t_x as isize).clamp(-c, c);
    (delta + c) as usize
}

pub fn class_offset(class: usize) -> isize {
    class as isize - MAX_LENGTH_OFFSET as isize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CopyMode {
    /// `H[j] = emb(X)[⌊j·T_X/T⌋]`
    Uniform,
    /// `H[j] = Σᵢ softmaxᵢ(−|j·T_X/T − i| / τ) · emb(X)[i]`
    Soft { temperature: f32 },
}

impl Default for CopyMode {
    fn default() -> Self {
        CopyMode::Soft { temperature: 0.3 }
    }
}

impl std::str::FromStr for CopyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(CopyMode::Uniform),
            "soft" => Ok(CopyMode::default()),
            _ => match s.strip_prefix("soft:").map(str::parse::<f32>) {
                Some(Ok(t)) if t > 0.0 => Ok(CopyMode::Soft { temperature: t }),
                _ => Err(Error::Config(format!("copy mode {s:?}: expected uniform, soft or soft:<tau>"))),
            },
        }
    }
}

impl std::fmt::Display for CopyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CopyMode::Uniform => write!(f, "uniform"),
            CopyMode::Soft { temperature } => write!(f, "soft:{temperature}"),
        }
    }
}

/// Per target position, the source positions (0-based, excluding
/// `[LENGTH]`) and weights it copies from.
pub fn copy_weights(t_x: usize, t: usize, mode: CopyMode) -> Result<Vec<Vec<(usize, f32)>>> {
    if t_x == 0 || t == 0 {
        return Err(Error::Empty("copy source or target length"));
    }
    let mut out = Vec::with_capacity(t);
    for j in 0..t {
        match mode {
            CopyMode::Uniform => out.push(vec![(j * t_x / t, 1.0)]),
            CopyMode::Soft { temperature } => {
                let center = (j * t_x) as f64 / t as f64;
                let logits: Vec<f64> = (0..t_x)
                    .map(|i| -(center - i as f64).abs() / temperature as f64)
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.push(
                    exps.iter()
                        .enumerate()
                        .filter(|(_, e)| **e / z > 1e-12)
                        .map(|(i, e)| (i, (e / z) as f32))
                        .collect(),
                );
            }
        }
    }
    Ok(out)
}

/// First-pass output for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTranslation {
    pub tokens: Vec<usize>,
    /// Max softmax probability per position.
    pub confidence: Vec<f32>,
    /// Row-major `T × V` log-probabilities.
    pub log_probs: Vec<f32>,
    pub vocab_size: usize,
}

impl PotentialTranslation {
    /// Argmax and confidence of each row of `T × V` logits.
    pub fn from_logits(logits: &[f32], vocab_size: usize) -> Self {
        let t = logits.len() / vocab_size;
        let mut tokens = Vec::with_capacity(t);
        let mut confidence = Vec::with_capacity(t);
        let mut log_probs = Vec::with_capacity(logits.len());
        for row in logits.chunks_exact(vocab_size) {
            let lp = log_softmax(row);
            let best = crate::numerics::argmax(&lp);
            tokens.push(best);
            confidence.push(lp[best].exp());
            log_probs.extend(lp);
        }
        PotentialTranslation {
            tokens,
            confidence,
            log_probs,
            vocab_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn log_prob(&self, pos: usize, token: usize) -> f32 {
        self.log_probs[pos * self.vocab_size + token]
    }
}

pub fn log_softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + row.iter().map(|&x| ((x - max) as f64).exp()).sum::<f64>().ln() as f32;
    row.iter().map(|&x| x - lse).collect()
}

/// `Y′`: the MLM sub-module's input, `[MASK]` exactly where `mask` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedInput {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

impl MaskedInput {
    /// `fill[i]` at observed positions, `[MASK]` elsewhere.
    pub fn new(fill: &[usize], mask: &[bool]) -> Self {
        assert_eq!(fill.len(), mask.len());
        let tokens = fill.iter().zip(mask).map(|(&t, &m)| if m { MASK } else { t }).collect();
        MaskedInput {
            tokens,
            mask: mask.to_vec(),
        }
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn observed_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// Masks `n ~ U{1..len}` positions chosen uniformly without replacement.
pub fn uniform_mask<R: Rng>(len: usize, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; len];
    if len == 0 {
        return mask;
    }
    let n = rng.random_range(1..=len);
    for i in sample(rng, len, n) {
        mask[i] = true;
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MlmInputStrategy {
    /// Observed tokens come from the reference.
    Target,
    /// Observed tokens come from the potential translation.
    Output,
    /// Per position, the potential translation with probability `p_mix`, else the reference.
    #[default]
    Mixed,
}

impl std::str::FromStr for MlmInputStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(MlmInputStrategy::Target),
            "output" => Ok(MlmInputStrategy::Output),
            "mixed" => Ok(MlmInputStrategy::Mixed),
            _ => Err(Error::Config(format!("unknown MLM input strategy {s}"))),
        }
    }
}

impl std::fmt::Display for MlmInputStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MlmInputStrategy::Target => "target",
            MlmInputStrategy::Output => "output",
            MlmInputStrategy::Mixed => "mixed",
        })
    }
}

pub fn build_mlm_input<R: Rng>(
    y: &[usize],
    y_pot: Option<&[usize]>,
    strategy: MlmInputStrategy,
    p_mix: f32,
    rng: &mut R,
    mask: &[bool],
) -> Result<MaskedInput> {
    if mask.len() != y.len() {
        return Err(Error::Shape(format!("mask of {} for {} tokens", mask.len(), y.len())));
    }
    let pot = || -> Result<&[usize]> {
        match y_pot {
            Some(p) if p.len() == y.len() => Ok(p),
            Some(p) => Err(Error::Shape(format!(
                "potential translation has {} tokens, reference {}",
                p.len(),
                y.len()
            ))),
            None => Err(Error::Config(format!("{strategy} strategy needs the potential translation"))),
        }
    };
    let fill: Vec<usize> = match strategy {
        MlmInputStrategy::Target => y.to_vec(),
        MlmInputStrategy::Output => pot()?.to_vec(),
        MlmInputStrategy::Mixed => {
            let p = pot()?;
            (0..y.len())
                .map(|i| {
                    // one draw per observed position keeps the stream independent of p_mix
                    if !mask[i] && rng.random::<f32>() < p_mix {
                        p[i]
                    } else {
                        y[i]
                    }
                })
                .collect()
        }
    };
    Ok(MaskedInput::new(&fill, mask))
}

/// Positions revealed to the NAT sub-module: `round(f · Hamming(y_pot, y))`
/// of them, sampled uniformly.
pub fn glance_positions<R: Rng>(y: &[usize], y_pot: &[usize], ratio: f32, rng: &mut R) -> Vec<bool> {
    let mut g = vec![false; y.len()];
    let d = y.iter().zip(y_pot).filter(|(a, b)| a != b).count();
    let n = ((ratio * d as f32).round() as usize).min(y.len());
    if n > 0 {
        for i in sample(rng, y.len(), n) {
            g[i] = true;
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlanceSchedule {
    pub start: f32,
    pub end: f32,
}

impl Default for GlanceSchedule {
    fn default() -> Self {
        GlanceSchedule { start: 0.5, end: 0.3 }
    }
}

impl GlanceSchedule {
    /// Linear anneal from `start` at step 0 to `end` at `total`.
    pub fn ratio(&self, step: usize, total: usize) -> f32 {
        let frac = if total == 0 {
            1.0
        } else {
            (step as f32 / total as f32).min(1.0)
        };
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Peak learning rate reached at the end of warmup.
    pub lr: f32,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub mlm_input: MlmInputStrategy,
    pub p_mix: f32,
    pub glancing: Option<GlanceSchedule>,
    pub label_smoothing: f32,
    /// Diagnostic weights on (L_pot, L_mlm, L_len). Unit weights for training.
    pub loss_weights: [f32; 3],
    pub steps: usize,
    pub max_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            warmup_steps: 4000,
            adam: AdamConfig::default(),
            mlm_input: MlmInputStrategy::Mixed,
            p_mix: 0.5,
            glancing: None,
            label_smoothing: 0.1,
            loss_weights: [1.0; 3],
            steps: 10_000,
            max_tokens: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_mix) {
            return Err(Error::Config(format!("p_mix {} outside [0, 1]", self.p_mix)));
        }
        if let Some(g) = self.glancing {
            for r in [g.start, g.end] {
                if !(r > 0.0 && r < 1.0) {
                    return Err(Error::Config(format!("glancing ratio {r} outside (0, 1)")));
                }
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {}", self.label_smoothing)));
        }
        if !(self.lr > 0.0) || self.max_tokens == 0 {
            return Err(Error::Config("lr and max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup; `step` counts from 1.
pub fn learning_rate(peak: f32, warmup: usize, step: usize) -> f32 {
    let step = step.max(1) as f32;
    if warmup == 0 {
        return peak;
    }
    let w = warmup as f32;
    peak * (step / w).min((w / step).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub pot: f32,
    pub mlm: f32,
    pub len: f32,
    pub total: f32,
}

/// Loss nodes of one forward pass. `pot` is absent when glancing revealed
/// every position; `mlm` when the model has no MLM sub-module.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub pot: Option<Var>,
    pub mlm: Option<Var>,
    pub len: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape<'_>) -> LossBundle {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossBundle {
            pot: get(self.pot),
            mlm: get(self.mlm),
            len: tape.scalar(self.len),
            total: tape.scalar(self.total),
        }
    }
}

/// What a training forward pass saw, for tests and diagnostics.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub potential: Vec<Vec<usize>>,
    pub glanced: Vec<Vec<bool>>,
    pub mlm_inputs: Vec<MaskedInput>,
    pub mlm_logits: Option<Var>,
}

pub struct RenewNat {
    pub cfg: ModelConfig,
    pub copy: CopyMode,
    pub params: ParameterStore,
    nat_passes: AtomicUsize,
    mlm_passes: AtomicUsize,
}

impl Clone for RenewNat {
    fn clone(&self) -> Self {
        RenewNat {
            cfg: self.cfg.clone(),
            copy: self.copy,
            params: self.params.clone(),
            nat_passes: AtomicUsize::new(0),
            mlm_passes: AtomicUsize::new(0),
        }
    }
}

impl std::fmt::Debug for RenewNat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RenewNat")
            .field("cfg", &self.cfg)
            .field("copy", &self.copy)
            .field("params", &self.params.num_scalars())
            .finish()
    }
}

impl RenewNat {
    pub fn new(cfg: ModelConfig, copy: CopyMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Prng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        add_embedding(&mut params, &cfg, &mut rng)?;
        add_encoder(&mut params, &cfg, &mut rng)?;
        add_decoder_layers(&mut params, &cfg, cfg.n_dec_layers, &mut rng)?;
        add_output_head(&mut params, "nat", &cfg, &mut rng)?;
        if cfg.has_mlm() {
            add_output_head(&mut params, "mlm", &cfg, &mut rng)?;
        }
        let bound = (6.0 / (cfg.d_model + LENGTH_CLASSES) as f32).sqrt();
        let w = (0..cfg.d_model * LENGTH_CLASSES).map(|_| rng.random_range(-bound..bound)).collect();
        params.insert("length.w", Array::new(vec![cfg.d_model, LENGTH_CLASSES], w)?)?;
        params.insert("length.b", Array::zeros(vec![LENGTH_CLASSES]))?;
        Ok(Self::wrap(cfg, copy, params))
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes
    /// against a freshly initialised one.
    pub fn from_params(cfg: ModelConfig, copy: CopyMode, params: ParameterStore) -> Result<Self> {
        let reference = Self::new(cfg.clone(), copy, 0)?;
        check_same_layout(&reference.params, &params)?;
        Ok(Self::wrap(cfg, copy, params))
    }

    fn wrap(cfg: ModelConfig, copy: CopyMode, params: ParameterStore) -> Self {
        RenewNat {
            cfg,
            copy,
            params,
            nat_passes: AtomicUsize::new(0),
            mlm_passes: AtomicUsize::new(0),
        }
    }

    /// (NAT sub-module passes, MLM sub-module passes) since the last reset.
    pub fn pass_counts(&self) -> (usize, usize) {
        (
            self.nat_passes.load(Ordering::Relaxed),
            self.mlm_passes.load(Ordering::Relaxed),
        )
    }

    pub fn reset_pass_counts(&self) {
        self.nat_passes.store(0, Ordering::Relaxed);
        self.mlm_passes.store(0, Ordering::Relaxed);
    }

    /// Encodes one source sentence (without `[LENGTH]`, which is prepended here).
    pub fn encode_source(&self, tape: &mut Tape<'_>, src: &[usize]) -> Result<EncoderOutput> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        let mut ids = Vec::with_capacity(src.len() + 1);
        ids.push(LENGTH);
        ids.extend_from_slice(src);
        encode(tape, &self.cfg, &ids, &SeqLayout::unpadded(ids.len()), &mut Dropout::off())
    }

    /// Length-head logits, one row per sequence, read at the `[LENGTH]` position.
    pub fn length_logits(&self, tape: &mut Tape<'_>, enc: &EncoderOutput) -> Result<Var> {
        let rows: Vec<usize> = (0..enc.layout.batch).map(|b| b * enc.layout.len).collect();
        let h = tape.gather_rows(enc.states, &rows);
        transformer::linear(tape, "length", h)
    }

    /// Decoder input `H` (token part only; positions are added by
    /// [`nat_logits`](Self::nat_logits)). `src_ids` is laid out per `src`
    /// with `[LENGTH]` at position 0; padded target rows copy `[LENGTH]`.
    pub fn copy_source(
        &self,
        tape: &mut Tape<'_>,
        src_ids: &[usize],
        src: &SeqLayout,
        src_lens: &[usize],
        tgt: &SeqLayout,
        tgt_lens: &[usize],
        mode: CopyMode,
    ) -> Result<Var> {
        if tgt.len > self.cfg.max_len {
            return Err(Error::Length {
                len: tgt.len,
                max_len: self.cfg.max_len,
            });
        }
        let emb = transformer::token_embedding(tape, &self.cfg, src_ids)?;
        let mut mix = Vec::with_capacity(tgt.rows());
        for b in 0..tgt.batch {
            let base = b * src.len;
            let weights = copy_weights(src_lens[b], tgt_lens[b], mode)?;
            for w in weights {
                mix.push(w.into_iter().map(|(i, x)| (base + 1 + i, x)).collect());
            }
            for _ in tgt_lens[b]..tgt.len {
                mix.push(vec![(base, 1.0)]);
            }
        }
        Ok(tape.mix_rows(emb, &mix))
    }

    /// NAT sub-module: positions, decoder layers `0..N−K`, head `W`.
    pub fn nat_logits(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        tgt: &SeqLayout,
        enc: &EncoderOutput,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        self.nat_passes.fetch_add(1, Ordering::Relaxed);
        let x = transformer::add_positions(tape, &self.cfg, h, tgt)?;
        let x = drop.apply(tape, x);
        let x = decoder_stack(tape, &self.cfg, x, tgt, enc, self.cfg.nat_layers(), SelfAttnMode::Full, drop)?;
        transformer::output_logits(tape, &self.cfg, "nat", x)
    }

    /// MLM sub-module: `emb(Y′)`, decoder layers `N−K..N`, head `W′`.
    pub fn mlm_logits(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[usize],
        tgt: &SeqLayout,
        enc: &EncoderOutput,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        if !self.cfg.has_mlm() {
            return Err(Error::Config("model has no MLM sub-module (K = 0)".into()));
        }
        self.mlm_passes.fetch_add(1, Ordering::Relaxed);
        let x = transformer::embed(tape, &self.cfg, tokens, tgt)?;
        let x = drop.apply(tape, x);
        let x = decoder_stack(tape, &self.cfg, x, tgt, enc, self.cfg.mlm_layers(), SelfAttnMode::Full, drop)?;
        transformer::output_logits(tape, &self.cfg, "mlm", x)
    }

    /// Potential translation for a single (unbatched) logits node.
    pub fn potential(&self, tape: &Tape<'_>, logits: Var) -> PotentialTranslation {
        PotentialTranslation::from_logits(tape.value(logits), self.cfg.vocab_size)
    }

    /// Builds the joint training loss for `batch` on `tape`.
    ///
    /// All sampling (glancing, masks, mixing, dropout) draws from `rng`.
    pub fn forward_loss(
        &self,
        tape: &mut Tape<'_>,
        batch: &Batch,
        tc: &TrainConfig,
        glance_ratio: Option<f32>,
        rng: &mut Prng,
    ) -> Result<(LossVars, ForwardTrace)> {
        let cfg = &self.cfg;
        let mut drop_rng = Prng::seed_from_u64(rng.random());
        let mut drop = Dropout::train(cfg.dropout, &mut drop_rng);
        let src = SeqLayout::from_lengths(
            &batch.src_len.iter().map(|l| l + 1).collect::<Vec<_>>(),
            batch.src_width,
        );
        let tgt = SeqLayout::from_lengths(&batch.tgt_len, batch.tgt_width);
        let enc = encode(tape, cfg, &batch.src, &src, &mut drop)?;

        let h = self.copy_source(tape, &batch.src, &src, &batch.src_len, &tgt, &batch.tgt_len, self.copy)?;
        let mut trace = ForwardTrace::default();
        let argmax_rows = |tape: &Tape<'_>, logits: Var| -> Vec<Vec<usize>> {
            let ids = tape.array(logits).argmax_rows();
            (0..tgt.batch)
                .map(|b| ids[b * tgt.len..b * tgt.len + batch.tgt_len[b]].to_vec())
                .collect()
        };

        let mut nat_weights: Vec<f32> = tgt.pad.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
        let nat_logits = if let Some(ratio) = glance_ratio {
            let first = self.nat_logits(tape, h, &tgt, &enc, &mut Dropout::off())?;
            trace.potential = argmax_rows(tape, first);
            let mut take_ref = vec![false; tgt.rows()];
            for b in 0..tgt.batch {
                let g = glance_positions(batch.target(b), &trace.potential[b], ratio, rng);
                for (j, &gj) in g.iter().enumerate() {
                    take_ref[b * tgt.len + j] = gj;
                    if gj {
                        nat_weights[b * tgt.len + j] = 0.0;
                    }
                }
                trace.glanced.push(g);
            }
            let h = if take_ref.iter().any(|&t| t) {
                let y = transformer::token_embedding(tape, cfg, &batch.tgt)?;
                tape.select_rows(y, h, &take_ref)
            } else {
                h
            };
            self.nat_logits(tape, h, &tgt, &enc, &mut drop)?
        } else {
            let logits = self.nat_logits(tape, h, &tgt, &enc, &mut drop)?;
            trace.potential = argmax_rows(tape, logits);
            logits
        };
        let pot = if nat_weights.iter().any(|&w| w > 0.0) {
            Some(tape.cross_entropy(nat_logits, &batch.tgt, &nat_weights, tc.label_smoothing, "L_pot")?)
        } else {
            None
        };

        let mlm = if cfg.has_mlm() {
            let mut tokens = Vec::with_capacity(tgt.rows());
            let mut weights = Vec::with_capacity(tgt.rows());
            for b in 0..tgt.batch {
                let y = batch.target(b);
                let mask = uniform_mask(y.len(), rng);
                let input = build_mlm_input(y, Some(&trace.potential[b]), tc.mlm_input, tc.p_mix, rng, &mask)?;
                tokens.extend_from_slice(&input.tokens);
                tokens.extend(std::iter::repeat_n(crate::data::PAD, tgt.len - y.len()));
                weights.extend(input.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
                weights.extend(std::iter::repeat_n(0.0, tgt.len - y.len()));
                trace.mlm_inputs.push(input);
            }
            let logits = self.mlm_logits(tape, &tokens, &tgt, &enc, &mut drop)?;
            trace.mlm_logits = Some(logits);
            Some(tape.cross_entropy(logits, &batch.tgt, &weights, 0.0, "L_mlm")?)
        } else {
            None
        };

        let len_logits = self.length_logits(tape, &enc)?;
        let classes: Vec<usize> = (0..batch.size())
            .map(|b| length_class(batch.src_len[b], batch.tgt_len[b]))
            .collect();
        let len = tape.cross_entropy(len_logits, &classes, &vec![1.0; batch.size()], 0.0, "L_len")?;

        let [wp, wm, wl] = tc.loss_weights;
        let mut terms = Vec::with_capacity(3);
        if let Some(p) = pot {
            terms.push((p, wp));
        }
        if let Some(m) = mlm {
            terms.push((m, wm));
        }
        terms.push((len, wl));
        let total = tape.weighted_sum(&terms);
        Ok((LossVars { pot, mlm, len, total }, trace))
    }
}

/// Errors unless `b` has exactly the parameter names and shapes of `a`, in order.
pub fn check_same_layout(a: &ParameterStore, b: &ParameterStore) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Checkpoint(format!("expected {} arrays, found {}", a.len(), b.len())));
    }
    for ((na, xa), (nb, xb)) in a.iter().zip(b.iter()) {
        if na != nb || xa.shape() != xb.shape() {
            return Err(Error::Checkpoint(format!(
                "expected {na} {:?}, found {nb} {:?}",
                xa.shape(),
                xb.shape()
            )));
        }
    }
    Ok(())
}

/// Checks gradients, then applies one Adam update.
pub fn apply_gradients(
    params: &mut ParameterStore,
    grads: Vec<Vec<f32>>,
    lr: f32,
    adam: AdamConfig,
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(x) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {x} for {}", params.name_of(i))));
        }
    }
    params.set_grads(grads)?;
    params.adam_step(lr, adam)
}

/// Owns a model plus the optimiser clock and sampling stream.
pub struct Trainer {
    pub model: RenewNat,
    pub cfg: TrainConfig,
    rng: Prng,
    step: usize,
}

impl Trainer {
    pub fn new(model: RenewNat, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
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

    /// Forward, backward and Adam update on one batch. On a non-finite loss
    /// or gradient nothing is updated and the error carries the losses.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBundle> {
        let ratio = self.cfg.glancing.map(|g| g.ratio(self.step, self.cfg.steps));
        let (losses, grads) = {
            let mut tape = Tape::new(&self.model.params, true);
            let (vars, _) = self.model.forward_loss(&mut tape, batch, &self.cfg, ratio, &mut self.rng)?;
            let losses = vars.values(&tape);
            if ![losses.pot, losses.mlm, losses.len, losses.total].iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("losses {losses:?}")));
            }
            (losses, tape.backward(vars.total)?)
        };
        let lr = learning_rate(self.cfg.lr, self.cfg.warmup_steps, self.step + 1);
        apply_gradients(&mut self.model.params, grads, lr, self.cfg.adam)?;
        self.step += 1;
        Ok(losses)
    }
}
