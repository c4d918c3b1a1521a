//! Inference: length prediction, the potential translation, single-pass
//! renewal of low-confidence positions, noisy parallel decoding over a
//! length beam, and beam search for the autoregressive teacher.

use std::time::{Duration, Instant};

use crate::data::{BOS, EOS, LENGTH, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{class_offset, length_class, log_softmax, CopyMode, MaskedInput, PotentialTranslation, RenewNat};
use crate::numerics::{argmax, Tape};
use crate::teacher::Teacher;
use crate::transformer::{Dropout, EncoderOutput, SeqLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistinguishMode {
    /// Renew positions whose confidence is below α.
    #[default]
    Threshold,
    /// Renew the ⌊δ·T⌋ least confident positions.
    Ratio,
}

impl std::str::FromStr for DistinguishMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(DistinguishMode::Threshold),
            "ratio" => Ok(DistinguishMode::Ratio),
            _ => Err(Error::Config(format!("unknown distinguish mode {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rerank {
    /// Joint log-probability of length and tokens under the model's own
    /// heads, divided by `T + 1`.
    #[default]
    SelfScore,
    /// Mean chosen-token log-probability, ignoring the length head.
    TokenMean,
    /// Length-normalised log-probability under the autoregressive teacher.
    Teacher,
}

impl std::str::FromStr for Rerank {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Rerank::SelfScore),
            "token-mean" => Ok(Rerank::TokenMean),
            "teacher" => Ok(Rerank::Teacher),
            _ => Err(Error::Config(format!("unknown reranker {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub alpha: f32,
    pub delta: f32,
    pub mode: DistinguishMode,
    /// Number of length candidates m.
    pub length_beam: usize,
    /// Overrides the model's copy mode.
    pub copy: Option<CopyMode>,
    /// Caps predicted lengths below the model's `max_len`.
    pub max_len: Option<usize>,
    pub rerank: Rerank,
}

impl DecodeConfig {
    /// Threshold tuned for a plain NAT base model.
    pub const ALPHA_VANILLA: f32 = 0.6;
    /// Threshold tuned for a glancing-trained base model.
    pub const ALPHA_GLANCING: f32 = 0.7;
    /// Range of mask ratios that work well in ratio mode.
    pub const DELTA_RANGE: (f32, f32) = (0.2, 0.5);

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "alpha {} and delta {} must lie in [0, 1]",
                self.alpha, self.delta
            )));
        }
        if self.length_beam == 0 {
            return Err(Error::Config("length beam must be at least 1".into()));
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("max decode length must be positive".into()));
        }
        Ok(())
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            alpha: Self::ALPHA_VANILLA,
            delta: 0.3,
            mode: DistinguishMode::Threshold,
            length_beam: 1,
            copy: None,
            max_len: None,
            rerank: Rerank::SelfScore,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub potential: PotentialTranslation,
    /// Positions handed to the MLM sub-module, ascending.
    pub renewed: Vec<usize>,
    /// Score of the returned candidate.
    pub score: f32,
    /// `(length, score)` for every candidate, in length-beam order.
    pub candidate_scores: Vec<(usize, f32)>,
    pub elapsed: Duration,
}

/// Top-`m` lengths from length-head logits: descending probability, ties
/// to the smaller |Δ| then the smaller Δ, clamped to `[1, max_len]` and
/// de-duplicated after clamping.
pub fn predict_length(logits: &[f32], t_x: usize, m: usize, max_len: usize) -> Vec<usize> {
    let mut classes: Vec<usize> = (0..logits.len()).collect();
    classes.sort_by(|&a, &b| {
        let (da, db) = (class_offset(a), class_offset(b));
        logits[b]
            .total_cmp(&logits[a])
            .then(da.abs().cmp(&db.abs()))
            .then(da.cmp(&db))
    });
    let mut out = Vec::with_capacity(m);
    for c in classes {
        let t = (t_x as isize + class_offset(c)).clamp(1, max_len as isize) as usize;
        if !out.contains(&t) {
            out.push(t);
            if out.len() == m {
                break;
            }
        }
    }
    out
}

/// Positions to renew, ascending.
pub fn select_mask_positions(confidence: &[f32], cfg: &DecodeConfig) -> Vec<usize> {
    match cfg.mode {
        DistinguishMode::Threshold => (0..confidence.len()).filter(|&i| confidence[i] < cfg.alpha).collect(),
        DistinguishMode::Ratio => {
            let n = (cfg.delta * confidence.len() as f32).floor() as usize;
            let mut order: Vec<usize> = (0..confidence.len()).collect();
            order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));
            let mut m: Vec<usize> = order.into_iter().take(n).collect();
            m.sort_unstable();
            m
        }
    }
}

/// Final tokens and score after renewing `positions` of `pot`.
pub struct Renewal {
    pub tokens: Vec<usize>,
    pub renewed: Vec<usize>,
    pub score: f32,
}

/// One MLM pass over `pot` with `[MASK]` at `positions`; skipped entirely
/// when there is nothing to renew or no MLM sub-module.
pub fn renew(
    model: &RenewNat,
    tape: &mut Tape<'_>,
    pot: &PotentialTranslation,
    positions: &[usize],
    enc: &EncoderOutput,
) -> Result<Renewal> {
    let t = pot.len();
    let mut tokens = pot.tokens.clone();
    let mut logp: Vec<f32> = (0..t).map(|i| pot.log_prob(i, tokens[i])).collect();
    let positions: &[usize] = if model.cfg.has_mlm() { positions } else { &[] };
    if !positions.is_empty() {
        let mut mask = vec![false; t];
        for &i in positions {
            mask[i] = true;
        }
        let input = MaskedInput::new(&pot.tokens, &mask);
        let layout = SeqLayout::unpadded(t);
        let logits = model.mlm_logits(tape, &input.tokens, &layout, enc, &mut Dropout::off())?;
        let v = model.cfg.vocab_size;
        let z = tape.value(logits);
        for &i in positions {
            let lp = log_softmax(&z[i * v..(i + 1) * v]);
            let best = argmax(&lp);
            tokens[i] = best;
            logp[i] = lp[best];
        }
    }
    let score = logp.iter().map(|&x| x as f64).sum::<f64>() / t as f64;
    Ok(Renewal {
        tokens,
        renewed: positions.to_vec(),
        score: score as f32,
    })
}

struct Candidate {
    potential: PotentialTranslation,
    renewal: Renewal,
}

fn decode_length(
    model: &RenewNat,
    tape: &mut Tape<'_>,
    enc: &EncoderOutput,
    src_ids: &[usize],
    t: usize,
    cfg: &DecodeConfig,
) -> Result<Candidate> {
    let t_x = src_ids.len() - 1;
    let src = SeqLayout::unpadded(src_ids.len());
    let tgt = SeqLayout::unpadded(t);
    let copy = cfg.copy.unwrap_or(model.copy);
    let h = model.copy_source(tape, src_ids, &src, &[t_x], &tgt, &[t], copy)?;
    let logits = model.nat_logits(tape, h, &tgt, enc, &mut Dropout::off())?;
    let potential = model.potential(tape, logits);
    let positions = select_mask_positions(&potential.confidence, cfg);
    let renewal = renew(model, tape, &potential, &positions, enc)?;
    Ok(Candidate { potential, renewal })
}

/// Full pipeline with a length beam of `cfg.length_beam`. Candidates share
/// the encoder pass; each gets its own NAT pass and at most one MLM pass.
pub fn decode(model: &RenewNat, src: &[usize], cfg: &DecodeConfig, teacher: Option<&Teacher>) -> Result<DecodeResult> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::Empty("source sentence"));
    }
    if cfg.rerank == Rerank::Teacher && cfg.length_beam > 1 && teacher.is_none() {
        return Err(Error::Config("teacher reranking needs a teacher".into()));
    }
    let start = Instant::now();
    let mut tape = Tape::new(&model.params, false);
    let enc = model.encode_source(&mut tape, src)?;
    let len_logits = model.length_logits(&mut tape, &enc)?;
    let max_len = cfg.max_len.unwrap_or(model.cfg.max_len).min(model.cfg.max_len);
    let lengths = predict_length(tape.value(len_logits), src.len(), cfg.length_beam, max_len);
    let length_lp = log_softmax(tape.value(len_logits));

    let mut src_ids = Vec::with_capacity(src.len() + 1);
    src_ids.push(LENGTH);
    src_ids.extend_from_slice(src);
    let mut best: Option<(f32, usize, Candidate)> = None;
    let mut candidate_scores = Vec::with_capacity(lengths.len());
    for &t in &lengths {
        let c = decode_length(model, &mut tape, &enc, &src_ids, t, cfg)?;
        let score = match (cfg.rerank, teacher) {
            (Rerank::Teacher, Some(tch)) if lengths.len() > 1 => {
                tch.sequence_log_prob(src, &c.renewal.tokens)? / (t + 1) as f32
            }
            (Rerank::TokenMean, _) => c.renewal.score,
            // joint log-probability of the length and the tokens, per
            // emitted symbol
            _ => {
                let lp = length_lp[length_class(src.len(), t)];
                (c.renewal.score * t as f32 + lp) / (t + 1) as f32
            }
        };
        candidate_scores.push((t, score));
        let better = match &best {
            None => true,
            Some((s, bt, _)) => score > *s || (score == *s && t < *bt),
        };
        if better {
            best = Some((score, t, c));
        }
    }
    let (score, _, c) = best.ok_or(Error::Empty("length candidates"))?;
    Ok(DecodeResult {
        tokens: c.renewal.tokens,
        potential: c.potential,
        renewed: c.renewal.renewed,
        score,
        candidate_scores,
        elapsed: start.elapsed(),
    })
}

/// Top-1 length, one potential translation, at most one renewal pass.
pub fn decode_single(model: &RenewNat, src: &[usize], cfg: &DecodeConfig) -> Result<DecodeResult> {
    let cfg = DecodeConfig {
        length_beam: 1,
        ..cfg.clone()
    };
    decode(model, src, &cfg, None)
}

/// Noisy parallel decoding over the top `cfg.length_beam` lengths.
pub fn decode_npd(model: &RenewNat, src: &[usize], cfg: &DecodeConfig, teacher: Option<&Teacher>) -> Result<DecodeResult> {
    decode(model, src, cfg, teacher)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Output tokens without `[EOS]`.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, including `[EOS]` when finished.
    pub log_prob: f32,
    /// `log_prob` divided by the number of scored tokens.
    pub score: f32,
    pub finished: bool,
}

/// Length-normalised beam search. Each step ranks the top `2·beam`
/// extensions; `[EOS]` extensions that rank within the first `beam` finish
/// a hypothesis and use up a slot, so beam size 1 is greedy decoding. Search
/// stops when the best live prefix cannot beat the weakest of the top `beam`
/// finished hypotheses. Without any `[EOS]` before `max_len`, the best live
/// hypothesis is returned unfinished and a warning is logged.
pub fn teacher_beam_search(teacher: &Teacher, src: &[usize], beam: usize) -> Result<BeamHypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let v = teacher.cfg.vocab_size;
    let mut state = teacher.start(src)?;
    let mut live: Vec<(Vec<usize>, f32)> = vec![(Vec::new(), 0.0)];
    let mut last = vec![BOS];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..teacher.cfg.max_len {
        let lp = teacher.step(&mut state, &last)?;
        let mut cands: Vec<(f32, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (b, (_, base)) in live.iter().enumerate() {
            for tok in 0..v {
                if matches!(tok, PAD | MASK | LENGTH | BOS) {
                    continue;
                }
                cands.push((base + lp[b * v + tok], b, tok));
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(2 * beam);
        let mut next = Vec::with_capacity(beam);
        let mut parents = Vec::with_capacity(beam);
        let mut closed = 0;
        for (rank, &(score, b, tok)) in cands.iter().enumerate() {
            if tok == EOS {
                if rank < beam {
                    closed += 1;
                    let tokens = live[b].0.clone();
                    let n = tokens.len() + 1;
                    finished.push(BeamHypothesis {
                        tokens,
                        log_prob: score,
                        score: score / n as f32,
                        finished: true,
                    });
                }
            } else if next.len() + closed < beam {
                let mut tokens = live[b].0.clone();
                tokens.push(tok);
                next.push((tokens, score));
                parents.push(b);
            }
        }
        if next.is_empty() {
            break;
        }
        // Stop once the best live prefix, normalized at its current length,
        // cannot beat the weakest of the top `beam` finished hypotheses.
        if finished.len() >= beam {
            let mut scores: Vec<f32> = finished.iter().map(|h| h.score).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            let n = next[0].0.len() + 1;
            if next[0].1 / n as f32 <= scores[beam - 1] {
                break;
            }
        }
        state.reorder(&parents);
        last = next.iter().map(|(t, _)| *t.last().unwrap()).collect();
        live = next;
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.score.total_cmp(&b.score).then(j.cmp(i)))
        .map(|(_, h)| h);
    match best {
        Some(h) => Ok(h),
        None => {
            log::warn!("beam search reached max_len {} without EOS; truncating", teacher.cfg.max_len);
            let (tokens, log_prob) = live.into_iter().next().unwrap_or_default();
            let n = tokens.len().max(1);
            Ok(BeamHypothesis {
                tokens,
                log_prob,
                score: log_prob / n as f32,
                finished: false,
            })
        }
    }
}

/// Left-to-right argmax decoding, the reference for beam size 1.
pub fn teacher_greedy(teacher: &Teacher, src: &[usize]) -> Result<BeamHypothesis> {
    let v = teacher.cfg.vocab_size;
    let mut state = teacher.start(src)?;
    let mut tokens = Vec::new();
    let mut last = BOS;
    let mut total = 0.0f32;
    for _ in 0..teacher.cfg.max_len {
        let mut lp = teacher.step(&mut state, &[last])?;
        for tok in [PAD, MASK, LENGTH, BOS] {
            lp[tok] = f32::NEG_INFINITY;
        }
        let best = argmax(&lp[..v]);
        total += lp[best];
        if best == EOS {
            let n = tokens.len() + 1;
            return Ok(BeamHypothesis {
                tokens,
                log_prob: total,
                score: total / n as f32,
                finished: true,
            });
        }
        tokens.push(best);
        last = best;
    }
    let n = tokens.len().max(1);
    Ok(BeamHypothesis {
        tokens,
        log_prob: total,
        score: total / n as f32,
        finished: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LENGTH_CLASSES, MAX_LENGTH_OFFSET};
    use crate::transformer::ModelConfig;
    use proptest::prelude::*;

    fn cfg_threshold(alpha: f32) -> DecodeConfig {
        DecodeConfig {
            alpha,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn threshold_selection() {
        assert_eq!(select_mask_positions(&[0.9, 0.5, 0.8], &cfg_threshold(0.6)), [1]);
        assert!(select_mask_positions(&[0.01, 0.5, 1.0], &cfg_threshold(0.0)).is_empty());
    }

    #[test]
    fn ratio_selection() {
        let cfg = DecodeConfig {
            mode: DistinguishMode::Ratio,
            delta: 0.5,
            ..DecodeConfig::default()
        };
        assert_eq!(select_mask_positions(&[0.9, 0.2, 0.8, 0.3], &cfg), [1, 3]);
        // ties go to the lower index
        assert_eq!(select_mask_positions(&[0.5, 0.5, 0.5, 0.5], &cfg), [0, 1]);
    }

    #[test]
    fn length_prediction_top_one_and_ties() {
        let mut z = vec![0.0f32; LENGTH_CLASSES];
        z[MAX_LENGTH_OFFSET + 2] = 3.0;
        assert_eq!(predict_length(&z, 5, 1, 100), [7]);
        let flat = vec![0.0f32; LENGTH_CLASSES];
        assert_eq!(predict_length(&flat, 5, 5, 100), [5, 4, 6, 3, 7]);
        // clamping collapses duplicates
        assert_eq!(predict_length(&flat, 1, 3, 100), [1, 2, 3]);
        assert_eq!(predict_length(&flat, 10, 3, 10), [10, 9, 8]);
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::default().validate().is_ok());
        assert!(cfg_threshold(1.5).validate().is_err());
        let c = DecodeConfig {
            length_beam: 0,
            ..DecodeConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn toy_model() -> RenewNat {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            n_enc_layers: 1,
            n_dec_layers: 2,
            k_mlm_layers: 1,
            max_len: 32,
            dropout: 0.0,
            tie_output: false,
        };
        RenewNat::new(cfg, CopyMode::default(), 1).unwrap()
    }

    #[test]
    fn alpha_zero_returns_potential_and_skips_mlm() {
        let m = toy_model();
        m.reset_pass_counts();
        let r = decode_single(&m, &[6, 7, 8], &cfg_threshold(0.0)).unwrap();
        assert_eq!(r.tokens, r.potential.tokens);
        assert!(r.renewed.is_empty());
        assert_eq!(m.pass_counts(), (1, 0));
    }

    #[test]
    fn alpha_one_renews_and_stays_local() {
        let m = toy_model();
        m.reset_pass_counts();
        let r = decode_single(&m, &[6, 7, 8, 9], &cfg_threshold(1.0)).unwrap();
        assert_eq!(r.renewed.len(), r.tokens.len());
        assert_eq!(m.pass_counts(), (1, 1));
        let r = decode_single(&m, &[6, 7, 8, 9], &cfg_threshold(0.5)).unwrap();
        for i in 0..r.tokens.len() {
            if !r.renewed.contains(&i) {
                assert_eq!(r.tokens[i], r.potential.tokens[i]);
            }
        }
    }

    #[test]
    fn npd_degenerates_to_single() {
        let m = toy_model();
        let cfg = DecodeConfig {
            alpha: 0.5,
            ..DecodeConfig::default()
        };
        let a = decode_single(&m, &[6, 7, 8], &cfg).unwrap();
        let b = decode_npd(&m, &[6, 7, 8], &cfg, None).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.score.to_bits(), b.score.to_bits());
        m.reset_pass_counts();
        let cfg5 = DecodeConfig { length_beam: 5, ..cfg };
        let c = decode_npd(&m, &[6, 7, 8], &cfg5, None).unwrap();
        assert_eq!(c.candidate_scores.len(), 5);
        assert!(c.candidate_scores.iter().all(|(_, s)| *s <= 0.0));
        let (nat, mlm) = m.pass_counts();
        assert_eq!(nat, 5);
        assert!(mlm <= 5);
        let best = c.candidate_scores.iter().map(|x| x.1).fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(c.score, best);
    }

    #[test]
    fn empty_source_is_rejected() {
        assert!(decode_single(&toy_model(), &[], &DecodeConfig::default()).is_err());
    }

    #[test]
    fn beam_one_is_greedy() {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            n_enc_layers: 1,
            n_dec_layers: 2,
            k_mlm_layers: 0,
            max_len: 10,
            dropout: 0.0,
            tie_output: false,
        };
        for seed in 0..5 {
            let t = Teacher::new(cfg.clone(), seed).unwrap();
            let b = teacher_beam_search(&t, &[6, 7, 8], 1).unwrap();
            let g = teacher_greedy(&t, &[6, 7, 8]).unwrap();
            assert_eq!(b.tokens, g.tokens);
            assert_eq!(b.finished, g.finished);
        }
    }

    proptest! {
        #[test]
        fn threshold_masks_are_monotone_in_alpha(
            conf in proptest::collection::vec(0.0f32..=1.0, 1..30),
            a in 0.0f32..=1.0,
            b in 0.0f32..=1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m_lo = select_mask_positions(&conf, &cfg_threshold(lo));
            let m_hi = select_mask_positions(&conf, &cfg_threshold(hi));
            prop_assert!(m_lo.iter().all(|i| m_hi.contains(i)));
        }

        #[test]
        fn ratio_mask_size_is_floor(conf in proptest::collection::vec(0.0f32..=1.0, 1..30), delta in 0.0f32..=1.0) {
            let cfg = DecodeConfig { mode: DistinguishMode::Ratio, delta, ..DecodeConfig::default() };
            let m = select_mask_positions(&conf, &cfg);
            prop_assert_eq!(m.len(), (delta * conf.len() as f32).floor() as usize);
            let worst_kept = (0..conf.len()).filter(|i| !m.contains(i)).map(|i| conf[i]).fold(f32::INFINITY, f32::min);
            prop_assert!(m.iter().all(|&i| conf[i] <= worst_kept));
        }
    }
}
