//! Corpus BLEU, token repetition ratio, length buckets and latency.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Clipped n-gram counts accumulated over a corpus, n = 1..=4.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn add<T: Eq + Hash>(&mut self, hyp: &[T], reference: &[T]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    pub fn precision(&self, n: usize) -> f64 {
        if self.totals[n - 1] == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / self.totals[n - 1] as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// BLEU-4 in [0, 100] with no smoothing: zero if any precision is zero.
    pub fn score(&self) -> f64 {
        let mut log_sum = 0.0;
        for n in 1..=4 {
            let p = self.precision(n);
            if p == 0.0 {
                return 0.0;
            }
            log_sum += p.ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / 4.0).exp()
    }
}

/// Corpus-level BLEU-4.
pub fn bleu<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Shape(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add(h.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}

/// Whitespace-tokenised convenience wrapper over [`bleu`].
pub fn bleu_text<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    let split = |xs: &[S]| -> Vec<Vec<String>> {
        xs.iter()
            .map(|s| s.as_ref().split_whitespace().map(str::to_string).collect())
            .collect()
    };
    bleu(&split(hyps), &split(refs))
}

/// Fraction of tokens equal to their immediate predecessor, over the corpus.
pub fn repetition_ratio<T: PartialEq, H: AsRef<[T]>>(hyps: &[H]) -> Result<f64> {
    let mut repeats = 0usize;
    let mut total = 0usize;
    for h in hyps {
        let h = h.as_ref();
        total += h.len();
        repeats += h.windows(2).filter(|w| w[0] == w[1]).count();
    }
    if total == 0 {
        return Err(Error::Empty("hypothesis tokens"));
    }
    Ok(repeats as f64 / total as f64)
}

pub const BUCKET_LABELS: [&str; 5] = ["[1,10]", "(10,20]", "(20,40]", "(40,60]", "(60,inf)"];

/// Source-length bucket index.
pub fn bucket_of(src_len: usize) -> usize {
    match src_len {
        0..=10 => 0,
        11..=20 => 1,
        21..=40 => 2,
        41..=60 => 3,
        _ => 4,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketScore {
    pub label: &'static str,
    pub sentences: usize,
    pub bleu: f64,
}

/// BLEU per source-length bucket; empty buckets are omitted.
pub fn bucket_bleu<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(
    src_lens: &[usize],
    hyps: &[H],
    refs: &[R],
) -> Result<Vec<BucketScore>> {
    if src_lens.len() != hyps.len() || hyps.len() != refs.len() {
        return Err(Error::Shape("bucket inputs differ in length".into()));
    }
    let mut stats = [BleuStats::default(); 5];
    let mut counts = [0usize; 5];
    for ((&l, h), r) in src_lens.iter().zip(hyps).zip(refs) {
        let b = bucket_of(l);
        stats[b].add(h.as_ref(), r.as_ref());
        counts[b] += 1;
    }
    Ok((0..5)
        .filter(|&b| counts[b] > 0)
        .map(|b| BucketScore {
            label: BUCKET_LABELS[b],
            sentences: counts[b],
            bleu: stats[b].score(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub sentences: usize,
    pub warmup: usize,
    pub mean: Duration,
    pub median: Duration,
}

impl LatencyStats {
    /// `baseline.mean / self.mean`.
    pub fn speedup_over(&self, baseline: &LatencyStats) -> f64 {
        baseline.mean.as_secs_f64() / self.mean.as_secs_f64()
    }
}

/// Times `run` once per input after `warmup` untimed calls (cycling over the inputs).
pub fn measure_latency<I, F>(inputs: &[I], warmup: usize, mut run: F) -> Result<LatencyStats>
where
    F: FnMut(&I) -> Result<()>,
{
    if inputs.is_empty() {
        return Err(Error::Empty("latency inputs"));
    }
    for i in 0..warmup {
        run(&inputs[i % inputs.len()])?;
    }
    let mut times = Vec::with_capacity(inputs.len());
    for x in inputs {
        let t = Instant::now();
        run(x)?;
        times.push(t.elapsed());
    }
    let total: Duration = times.iter().sum();
    times.sort();
    Ok(LatencyStats {
        sentences: inputs.len(),
        warmup,
        mean: total / inputs.len() as u32,
        median: times[times.len() / 2],
    })
}

/// CPU model, logical cores, OS and architecture.
pub fn hardware_fingerprint() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {cores} threads; {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub bleu: f64,
    pub repetition: f64,
    pub sentences: usize,
    pub buckets: Vec<BucketScore>,
    pub latency_ms: Option<f64>,
    pub speedup: Option<f64>,
    pub baseline: Option<String>,
    pub hardware: Option<String>,
}

impl EvalReport {
    pub fn new<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(hyps: &[H], refs: &[R]) -> Result<Self> {
        Ok(EvalReport {
            bleu: bleu(hyps, refs)?,
            repetition: repetition_ratio(hyps)?,
            sentences: hyps.len(),
            ..Default::default()
        })
    }

    /// `metric,value` rows; BLEU values carry two decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Invariant(format!("csv: {e}"));
        w.write_record(["metric", "value"]).map_err(io)?;
        w.write_record(["sentences", &self.sentences.to_string()]).map_err(io)?;
        w.write_record(["bleu", &format!("{:.2}", self.bleu)]).map_err(io)?;
        w.write_record(["repetition_ratio", &format!("{:.4}", self.repetition)]).map_err(io)?;
        for b in &self.buckets {
            w.write_record([format!("bleu{}", b.label), format!("{:.2}", b.bleu)]).map_err(io)?;
            w.write_record([format!("sentences{}", b.label), b.sentences.to_string()])
                .map_err(io)?;
        }
        if let Some(l) = self.latency_ms {
            w.write_record(["latency_ms", &format!("{l:.3}")]).map_err(io)?;
        }
        if let Some(s) = self.speedup {
            w.write_record(["speedup", &format!("{s:.2}")]).map_err(io)?;
        }
        if let Some(b) = &self.baseline {
            w.write_record(["baseline", b]).map_err(io)?;
        }
        if let Some(h) = &self.hardware {
            w.write_record(["hardware", h]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Invariant(format!("csv: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_is_one_hundred() {
        let c = [toks("the cat sat on the mat"), toks("a b c d e")];
        assert!((bleu(&c, &c).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn unigram_clipping() {
        let mut s = BleuStats::default();
        s.add(&toks("the the the the"), &toks("the cat sat down"));
        assert_eq!((s.matches[0], s.totals[0]), (1, 4));
        assert_eq!(s.precision(1), 0.25);
    }

    #[test]
    fn zero_precision_and_empty_set() {
        assert_eq!(bleu(&[toks("a b c d")], &[toks("e f g h")]).unwrap(), 0.0);
        assert!(bleu::<&str, Vec<&str>, Vec<&str>>(&[], &[]).is_err());
        assert_eq!(bleu(&[toks("a b c")], &[toks("a b c")]).unwrap(), 0.0);
    }

    #[test]
    fn repetition_examples() {
        assert!((repetition_ratio(&[toks("a a b")]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(repetition_ratio(&[toks("a b c")]).unwrap(), 0.0);
        assert!((repetition_ratio(&[toks("a a"), toks("b")]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(repetition_ratio::<&str, Vec<&str>>(&[vec![]]).is_err());
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket_of(1), 0);
        assert_eq!(bucket_of(10), 0);
        assert_eq!(bucket_of(11), 1);
        assert_eq!(bucket_of(40), 2);
        assert_eq!(bucket_of(60), 3);
        assert_eq!(bucket_of(61), 4);
        let h = [toks("a b c d"), toks("a b c d e f g h i j k")];
        let b = bucket_bleu(&[4, 11], &h, &h).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].label, "(10,20]");
    }

    #[test]
    fn self_speedup_is_one() {
        let xs = [1u32, 2, 3];
        let s = measure_latency(&xs, 2, |_| Ok(())).unwrap();
        assert_eq!(s.sentences, 3);
        assert_eq!(s.speedup_over(&s), 1.0);
    }

    #[test]
    fn report_csv() {
        let c = [toks("a b c d e")];
        let r = EvalReport::new(&c, &c).unwrap();
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.contains("bleu,100.00\n"));
        assert!(s.contains("repetition_ratio,0.0000\n"));
    }

    proptest! {
        #[test]
        fn bleu_is_permutation_invariant_and_bounded(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..6, 1..12), proptest::collection::vec(0u8..6, 1..12)),
                1..8,
            ),
            rot in 0usize..8,
        ) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let a = bleu(&h, &r).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
            let k = rot % h.len();
            let mut h2 = h.clone();
            let mut r2 = r.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            prop_assert_eq!(a, bleu(&h2, &r2).unwrap());
            let rep = repetition_ratio(&h).unwrap();
            prop_assert!((0.0..=1.0).contains(&rep));
        }
    }
}
