//! Vocabulary, corpora on disk, padded batches, synthetic tasks, and
//! sequence-level distillation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::decoding::teacher_beam_search;
use crate::error::{Error, Result};
use crate::numerics::Prng;
use crate::teacher::Teacher;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const LENGTH: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
pub const RESERVED: [&str; 6] = ["<pad>", "<unk>", "<mask>", "<length>", "<bos>", "<eos>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invariant(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Invariant(format!("reserved id {i} must be {r}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Frequency-sorted vocabulary (ties broken lexicographically) over
    /// whitespace-separated tokens seen at least `min_count` times.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Only the reserved tokens plus `words`, in the given order.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.iter().map(|w| w.as_ref().to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Builds a vocabulary over every line of every file.
pub fn build_vocab(files: &[PathBuf], min_count: usize) -> Result<Vocabulary> {
    let mut texts = Vec::with_capacity(files.len());
    for f in files {
        texts.push(fs::read_to_string(f).map_err(|e| Error::io(f, e))?);
    }
    Vocabulary::from_lines(texts.iter().flat_map(|t| t.lines()), min_count)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl SentencePair {
    pub fn new(src: Vec<usize>, tgt: Vec<usize>, max_len: usize) -> Result<Self> {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        // the source also carries the [LENGTH] token
        let longest = (src.len() + 1).max(tgt.len());
        if longest > max_len {
            return Err(Error::Length {
                len: longest,
                max_len,
            });
        }
        Ok(SentencePair { src, tgt })
    }
}

/// Aligned source/target lines, as stored in `<name>.src` / `<name>.tgt`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextCorpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn read(dir: &Path, name: &str) -> Result<Self> {
        let read = |ext: &str| -> Result<Vec<String>> {
            let p = dir.join(format!("{name}.{ext}"));
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok(text.lines().map(str::to_string).collect())
        };
        let (src, tgt) = (read("src")?, read("tgt")?);
        if src.len() != tgt.len() {
            return Err(Error::Invariant(format!(
                "{name}: {} source lines vs {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        Ok(TextCorpus { src, tgt })
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, lines) in [("src", &self.src), ("tgt", &self.tgt)] {
            let p = dir.join(format!("{name}.{ext}"));
            let mut s = String::new();
            for l in lines {
                s.push_str(l);
                s.push('\n');
            }
            fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn encode(&self, vocab: &Vocabulary, max_len: usize) -> Result<Vec<SentencePair>> {
        self.src
            .iter()
            .zip(&self.tgt)
            .map(|(s, t)| SentencePair::new(vocab.encode(s), vocab.encode(t), max_len))
            .collect()
    }

    pub fn from_pairs(pairs: &[SentencePair], vocab: &Vocabulary) -> Self {
        TextCorpus {
            src: pairs.iter().map(|p| vocab.decode(&p.src)).collect(),
            tgt: pairs.iter().map(|p| vocab.decode(&p.tgt)).collect(),
        }
    }
}

/// Padded id matrices. Sources have `[LENGTH]` prepended, so
/// `src_width = max(src_len) + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: Vec<usize>,
    pub src_len: Vec<usize>,
    pub src_width: usize,
    pub src_pad: Vec<bool>,
    pub tgt: Vec<usize>,
    pub tgt_len: Vec<usize>,
    pub tgt_width: usize,
    pub tgt_pad: Vec<bool>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair]) -> Self {
        let src_width = pairs.iter().map(|p| p.src.len()).max().unwrap_or(0) + 1;
        let tgt_width = pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(0);
        let mut b = Batch {
            src: Vec::with_capacity(pairs.len() * src_width),
            src_len: Vec::with_capacity(pairs.len()),
            src_width,
            src_pad: Vec::with_capacity(pairs.len() * src_width),
            tgt: Vec::with_capacity(pairs.len() * tgt_width),
            tgt_len: Vec::with_capacity(pairs.len()),
            tgt_width,
            tgt_pad: Vec::with_capacity(pairs.len() * tgt_width),
        };
        for p in pairs {
            b.src.push(LENGTH);
            b.src.extend_from_slice(&p.src);
            b.src.extend(std::iter::repeat_n(PAD, src_width - 1 - p.src.len()));
            b.src_pad.extend((0..src_width).map(|j| j > p.src.len()));
            b.src_len.push(p.src.len());
            b.tgt.extend_from_slice(&p.tgt);
            b.tgt.extend(std::iter::repeat_n(PAD, tgt_width - p.tgt.len()));
            b.tgt_pad.extend((0..tgt_width).map(|j| j >= p.tgt.len()));
            b.tgt_len.push(p.tgt.len());
        }
        b
    }

    pub fn size(&self) -> usize {
        self.src_len.len()
    }

    pub fn target(&self, b: usize) -> &[usize] {
        &self.tgt[b * self.tgt_width..b * self.tgt_width + self.tgt_len[b]]
    }

    pub fn source(&self, b: usize) -> &[usize] {
        &self.src[b * self.src_width + 1..b * self.src_width + 1 + self.src_len[b]]
    }

    pub fn unbatch(&self) -> Vec<SentencePair> {
        (0..self.size())
            .map(|b| SentencePair {
                src: self.source(b).to_vec(),
                tgt: self.target(b).to_vec(),
            })
            .collect()
    }
}

/// Groups pairs into batches whose padded token count (the wider of the
/// source and target widths, times the batch size) stays within `max_tokens`.
/// Pairs are grouped by length; batch order is shuffled with `rng`.
pub fn make_batches(pairs: &[SentencePair], max_tokens: usize, rng: &mut Prng) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len(), i));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = (pairs[i].src.len() + 1).max(pairs[i].tgt.len());
        let new_width = width.max(w);
        if !cur.is_empty() && new_width * (cur.len() + 1) > max_tokens {
            groups.push(std::mem::take(&mut cur));
            width = w;
        } else {
            width = new_width;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups.shuffle(rng);
    groups
        .into_iter()
        .map(|g| Batch::from_pairs(&g.iter().map(|&i| &pairs[i]).collect::<Vec<_>>()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    Copy,
    Reverse,
    /// Target is the sorted source; each repeated value independently keeps
    /// all copies or collapses to one, so one source has several valid targets.
    NoisySort,
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "noisy_sort" | "noisy-sort" => Ok(SyntheticTask::NoisySort),
            _ => Err(Error::Config(format!("unknown task {s}"))),
        }
    }
}

/// Content words of a synthetic vocabulary of total size `vocab_size`.
pub fn synthetic_words(vocab_size: usize) -> Vec<String> {
    (0..vocab_size.saturating_sub(RESERVED.len())).map(|i| i.to_string()).collect()
}

/// Applies `task` to one source sequence of word indices.
pub fn synthetic_target<R: Rng>(task: SyntheticTask, src: &[usize], rng: &mut R) -> Vec<usize> {
    match task {
        SyntheticTask::Copy => src.to_vec(),
        SyntheticTask::Reverse => src.iter().rev().copied().collect(),
        SyntheticTask::NoisySort => {
            let mut sorted = src.to_vec();
            sorted.sort_unstable();
            let mut out = Vec::with_capacity(sorted.len());
            let mut i = 0;
            while i < sorted.len() {
                let mut j = i;
                while j < sorted.len() && sorted[j] == sorted[i] {
                    j += 1;
                }
                let keep = if j - i > 1 && rng.random::<bool>() { 1 } else { j - i };
                out.extend(std::iter::repeat_n(sorted[i], keep));
                i = j;
            }
            out
        }
    }
}

/// Generates `n` pairs of whitespace-joined numerals.
pub fn make_synthetic(
    task: SyntheticTask,
    vocab_size: usize,
    lengths: std::ops::RangeInclusive<usize>,
    n: usize,
    seed: u64,
) -> Result<TextCorpus> {
    if vocab_size < 10 {
        return Err(Error::Config(format!("vocab_size {vocab_size} < 10")));
    }
    if lengths.is_empty() || *lengths.start() == 0 {
        return Err(Error::Config("length range must be non-empty and start at 1".into()));
    }
    let words = vocab_size - RESERVED.len();
    let mut rng = Prng::seed_from_u64(seed);
    let mut corpus = TextCorpus::default();
    let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    for _ in 0..n {
        let len = rng.random_range(lengths.clone());
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..words)).collect();
        let tgt = synthetic_target(task, &src, &mut rng);
        corpus.src.push(join(&src));
        corpus.tgt.push(join(&tgt));
    }
    Ok(corpus)
}

/// Replaces each target with the teacher's beam output for its source.
/// Sources are untouched; a failed decode keeps the original target.
pub fn distill(pairs: &[SentencePair], teacher: &Teacher, beam: usize) -> Vec<SentencePair> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| match teacher_beam_search(teacher, &p.src, beam) {
            Ok(out) if !out.tokens.is_empty() && out.tokens.len() <= teacher.cfg.max_len => SentencePair {
                src: p.src.clone(),
                tgt: out.tokens,
            },
            Ok(_) => {
                log::warn!("distill: line {i}: empty or over-long teacher output, keeping reference");
                p.clone()
            }
            Err(e) => {
                log::warn!("distill: line {i}: {e}; keeping reference");
                p.clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_frequency_order_and_min_count() {
        let v = Vocabulary::from_lines(["a b", "a"], 1).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("b"), 7);
        let v = Vocabulary::from_lines(["a b", "a"], 2).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.encode("a b"), vec![6, UNK]);
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = Vocabulary::from_lines(["z y x"], 1).unwrap();
        assert_eq!(v.decode(&[6, 7, 8]), "x y z");
    }

    #[test]
    fn vocab_round_trip_and_reserved_ids() {
        let v = Vocabulary::from_lines(["the cat sat"], 1).unwrap();
        assert_eq!(v.decode(&v.encode("sat the cat")), "sat the cat");
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i);
        }
        assert!(Vocabulary::from_lines(["", "  "], 1).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::from_lines(["b a c a"], 1).unwrap();
        v.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<pad>\n<unk>\n<mask>\n<length>\n<bos>\n<eos>\na\n"));
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn pair_validation() {
        assert!(SentencePair::new(vec![], vec![6], 8).is_err());
        assert!(SentencePair::new(vec![6; 8], vec![6], 8).is_err());
        assert!(SentencePair::new(vec![6; 7], vec![6; 8], 8).is_ok());
    }

    #[test]
    fn batch_layout() {
        let a = SentencePair { src: vec![7, 8], tgt: vec![9] };
        let b = SentencePair { src: vec![7], tgt: vec![9, 10, 11] };
        let batch = Batch::from_pairs(&[&a, &b]);
        assert_eq!(batch.src_width, 3);
        assert_eq!(batch.src, vec![LENGTH, 7, 8, LENGTH, 7, PAD]);
        assert_eq!(batch.src_pad, vec![false, false, false, false, false, true]);
        assert_eq!(batch.tgt, vec![9, PAD, PAD, 9, 10, 11]);
        for (t, p) in batch.tgt.iter().zip(&batch.tgt_pad) {
            assert_eq!(*t == PAD, *p);
        }
        assert_eq!(batch.unbatch(), vec![a, b]);
    }

    #[test]
    fn synthetic_examples() {
        let mut rng = Prng::seed_from_u64(0);
        assert_eq!(synthetic_target(SyntheticTask::Copy, &[7, 3, 9], &mut rng), vec![7, 3, 9]);
        assert_eq!(synthetic_target(SyntheticTask::Reverse, &[7, 3, 9], &mut rng), vec![9, 3, 7]);
        let c1 = make_synthetic(SyntheticTask::Reverse, 20, 2..=5, 50, 3).unwrap();
        let c2 = make_synthetic(SyntheticTask::Reverse, 20, 2..=5, 50, 3).unwrap();
        assert_eq!(c1, c2);
        assert!(make_synthetic(SyntheticTask::Copy, 9, 1..=3, 1, 0).is_err());
    }

    #[test]
    fn noisy_sort_targets_are_sorted_subsets_with_every_value() {
        let mut rng = Prng::seed_from_u64(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let src = [4usize, 1, 4, 2, 4, 1];
            let t = synthetic_target(SyntheticTask::NoisySort, &src, &mut rng);
            assert!(t.windows(2).all(|w| w[0] <= w[1]));
            for v in [1, 2, 4] {
                assert!(t.contains(&v));
            }
            seen.insert(t);
        }
        // four modes: {1 kept/collapsed} × {4 kept/collapsed}
        assert_eq!(seen.len(), 4);
    }
}
