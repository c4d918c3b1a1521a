//! Training loops and corpus-level decoding shared by the CLI and the
//! acceptance suite.

use std::collections::{HashMap, HashSet};

use crate::data::{make_batches, SentencePair};
use crate::decoding::{decode, DecodeConfig, DecodeResult, DistinguishMode};
use crate::error::{Error, Result};
use crate::eval::bleu;
use crate::model::{LossBundle, RenewNat, Trainer};
use crate::teacher::{Teacher, TeacherTrainer};

/// Trains until `trainer.step() == steps`, cycling over shuffled epochs.
/// `on_step` sees every step's losses.
pub fn train_renewnat<F>(trainer: &mut Trainer, pairs: &[SentencePair], steps: usize, mut on_step: F) -> Result<()>
where
    F: FnMut(usize, &LossBundle),
{
    if pairs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    while trainer.step() < steps {
        let max_tokens = trainer.cfg.max_tokens;
        let batches = make_batches(pairs, max_tokens, trainer.rng());
        for b in &batches {
            if trainer.step() >= steps {
                break;
            }
            let l = trainer.train_step(b)?;
            on_step(trainer.step(), &l);
        }
    }
    Ok(())
}

pub fn train_teacher<F>(trainer: &mut TeacherTrainer, pairs: &[SentencePair], steps: usize, mut on_step: F) -> Result<()>
where
    F: FnMut(usize, f32),
{
    if pairs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    while trainer.step() < steps {
        let max_tokens = trainer.cfg.max_tokens;
        let batches = make_batches(pairs, max_tokens, trainer.rng());
        for b in &batches {
            if trainer.step() >= steps {
                break;
            }
            let l = trainer.train_step(b)?;
            on_step(trainer.step(), l);
        }
    }
    Ok(())
}

pub fn decode_all(
    model: &RenewNat,
    sources: &[&[usize]],
    cfg: &DecodeConfig,
    teacher: Option<&Teacher>,
) -> Result<Vec<DecodeResult>> {
    sources.iter().map(|s| decode(model, s, cfg, teacher)).collect()
}

/// BLEU of the final output and of the potential translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitScores {
    pub final_bleu: f64,
    pub potential_bleu: f64,
}

pub fn score_results(results: &[DecodeResult], refs: &[&[usize]]) -> Result<SplitScores> {
    let finals: Vec<&[usize]> = results.iter().map(|r| r.tokens.as_slice()).collect();
    let pots: Vec<&[usize]> = results.iter().map(|r| r.potential.tokens.as_slice()).collect();
    Ok(SplitScores {
        final_bleu: bleu(&finals, refs)?,
        potential_bleu: bleu(&pots, refs)?,
    })
}

pub fn evaluate_pairs(
    model: &RenewNat,
    pairs: &[SentencePair],
    cfg: &DecodeConfig,
    teacher: Option<&Teacher>,
) -> Result<(Vec<DecodeResult>, SplitScores)> {
    let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.src.as_slice()).collect();
    let refs: Vec<&[usize]> = pairs.iter().map(|p| p.tgt.as_slice()).collect();
    let results = decode_all(model, &srcs, cfg, teacher)?;
    let scores = score_results(&results, &refs)?;
    Ok((results, scores))
}

/// `0:1:0.1` → `[0.0, 0.1, …, 1.0]`.
pub fn parse_grid(spec: &str) -> Result<Vec<f32>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("grid {spec:?}: expected start:end:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || end < start {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| (start + i as f64 * step) as f32).collect())
}

/// Final-output BLEU for each α (threshold mode) on `pairs`.
pub fn sweep_alpha(model: &RenewNat, pairs: &[SentencePair], base: &DecodeConfig, grid: &[f32]) -> Result<Vec<(f32, SplitScores)>> {
    grid.iter()
        .map(|&alpha| {
            let cfg = DecodeConfig {
                alpha,
                mode: DistinguishMode::Threshold,
                ..base.clone()
            };
            Ok((alpha, evaluate_pairs(model, pairs, &cfg, None)?.1))
        })
        .collect()
}

/// The α with the best final BLEU; ties go to the smaller α.
pub fn best_alpha(sweep: &[(f32, SplitScores)]) -> Option<f32> {
    sweep
        .iter()
        .fold(None::<(f32, f64)>, |best, &(a, s)| match best {
            Some((_, b)) if b >= s.final_bleu => best,
            _ => Some((a, s.final_bleu)),
        })
        .map(|(a, _)| a)
}

/// Mean number of distinct targets per distinct source.
pub fn targets_per_source(pairs: &[SentencePair]) -> f64 {
    let mut m: HashMap<&[usize], HashSet<&[usize]>> = HashMap::new();
    for p in pairs {
        m.entry(&p.src).or_default().insert(&p.tgt);
    }
    if m.is_empty() {
        return 0.0;
    }
    m.values().map(|s| s.len()).sum::<usize>() as f64 / m.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:1:0.1").unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert!((g[10] - 1.0).abs() < 1e-6);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn best_alpha_prefers_smaller_on_ties() {
        let s = |b| SplitScores {
            final_bleu: b,
            potential_bleu: 0.0,
        };
        assert_eq!(best_alpha(&[(0.0, s(1.0)), (0.1, s(2.0)), (0.2, s(2.0))]), Some(0.1));
        assert_eq!(best_alpha(&[]), None);
    }

    #[test]
    fn distinct_targets() {
        let p = |s: &[usize], t: &[usize]| SentencePair {
            src: s.to_vec(),
            tgt: t.to_vec(),
        };
        let pairs = [p(&[1], &[1]), p(&[1], &[2]), p(&[2], &[1]), p(&[1], &[1])];
        assert_eq!(targets_per_source(&pairs), 1.5);
    }
}
