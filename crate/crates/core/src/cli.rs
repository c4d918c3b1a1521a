//! Command-line front end. [`run_command`] is what the binary calls; it is
//! public so integration tests can drive whole commands in-process.
//!
//! A checkpoint `X` is accompanied by `X.vocab` (its vocabulary),
//! `X.conf` (the effective run configuration) and, for `train`,
//! `X.losses.csv` (one row per step).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::SavedModel;
use crate::config::RunConfig;
use crate::data::{build_vocab, distill, make_synthetic, SentencePair, SyntheticTask, TextCorpus, Vocabulary};
use crate::decoding::{decode, teacher_beam_search, DecodeConfig, DistinguishMode, Rerank};
use crate::error::{Error, Result};
use crate::eval::{bucket_bleu, hardware_fingerprint, measure_latency, EvalReport};
use crate::experiment::{best_alpha, evaluate_pairs, parse_grid, sweep_alpha, train_renewnat, train_teacher};
use crate::model::{GlanceSchedule, MlmInputStrategy, RenewNat, Trainer};
use crate::teacher::{Teacher, TeacherTrainer};

#[derive(Debug, Parser)]
#[command(name = "renewnat", version, about = "Non-autoregressive translation with a renewal decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a RenewNAT model (or the autoregressive teacher) on DIR/train.*
    Train(TrainArgs),
    /// Replace DIR/train targets by teacher beam-search outputs
    Distill(DistillArgs),
    /// Translate one source sentence per line
    Translate(TranslateArgs),
    /// Score hypotheses against references; CSV on stdout
    Evaluate(EvaluateArgs),
    /// Dev-set BLEU for each confidence threshold
    AblateAlpha(AblateAlphaArgs),
    /// Train and score one model per MLM layer count K
    AblateK(AblateKArgs),
    /// Train and score one model per MLM input strategy
    AblateStrategy(AblateStrategyArgs),
    /// Batch-1 latency against a baseline checkpoint
    Bench(BenchArgs),
    /// Write a synthetic corpus (train/dev/test splits plus vocab.txt)
    MakeData(MakeDataArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Arch {
    Renewnat,
    Teacher,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    glancing: bool,
    #[arg(long)]
    mlm_input: Option<MlmInputStrategy>,
    #[arg(long, value_enum, default_value_t = Arch::Renewnat)]
    arch: Arch,
    /// Log a loss line every N steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Confidence threshold α; defaults to the model config's value.
    #[arg(long)]
    alpha: Option<f32>,
    /// Number of length candidates (noisy parallel decoding when > 1).
    #[arg(long)]
    npd: Option<usize>,
    #[arg(long)]
    mode: Option<DistinguishMode>,
    #[arg(long)]
    delta: Option<f32>,
    /// Candidate reranker: self or teacher (needs --teacher).
    #[arg(long)]
    rerank: Option<Rerank>,
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the potential translation (before renewal).
    #[arg(long)]
    potential_out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Per-bucket BLEU by source length.
    #[arg(long, requires = "src")]
    buckets: bool,
    /// Source file whose token counts choose the buckets.
    #[arg(long)]
    src: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateAlphaArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0:1:0.1")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    /// Corpus split to score.
    #[arg(long, default_value = "dev")]
    split: String,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "0:1:0.1")]
    grid: String,
}

#[derive(Debug, Args)]
struct AblateKArgs {
    #[command(flatten)]
    common: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    ks: Vec<usize>,
}

#[derive(Debug, Args)]
struct AblateStrategyArgs {
    #[command(flatten)]
    common: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "target,output,mixed")]
    strategies: Vec<MlmInputStrategy>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// RenewNAT or teacher checkpoint; a teacher decodes with beam search.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Time at most this many sentences.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Debug, Args)]
struct MakeDataArgs {
    #[arg(long)]
    task: SyntheticTask,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 15)]
    max_len: usize,
    #[arg(long, default_value_t = 10_000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    dev: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 2 for usage errors and
/// missing files, 1 for anything else.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("renewnat: {e}");
            match e {
                Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::AblateAlpha(a) => ablate_alpha(a),
        Command::AblateK(a) => ablate_k(a),
        Command::AblateStrategy(a) => ablate_strategy(a),
        Command::Bench(a) => bench(a),
        Command::MakeData(a) => make_data(a),
    }
}

/// `X` → `X.<ext>` (appended, not substituted).
pub fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// `DIR/vocab.txt` when present, otherwise built from `DIR/train.*`.
fn data_vocab(dir: &Path) -> Result<Vocabulary> {
    let p = dir.join("vocab.txt");
    if p.exists() {
        Vocabulary::load(&p)
    } else {
        build_vocab(&[dir.join("train.src"), dir.join("train.tgt")], 1)
    }
}

fn load_split(dir: &Path, split: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<SentencePair>> {
    TextCorpus::read(dir, split)?.encode(vocab, max_len)
}

fn load_model(ckpt: &Path) -> Result<(RenewNat, Vocabulary, DecodeConfig)> {
    let model = SavedModel::load(ckpt)?.into_renewnat()?;
    let vocab = Vocabulary::load(&sidecar(ckpt, "vocab"))?;
    let conf = sidecar(ckpt, "conf");
    let decode = if conf.exists() {
        RunConfig::load(&conf)?.decode
    } else {
        DecodeConfig::default()
    };
    Ok((model, vocab, decode))
}

fn check_vocab(model_vocab: usize, vocab: &Vocabulary) -> Result<()> {
    if model_vocab != vocab.len() {
        return Err(Error::Config(format!(
            "model expects {model_vocab} vocabulary entries, vocabulary has {}",
            vocab.len()
        )));
    }
    Ok(())
}

impl DecodeArgs {
    fn apply(&self, base: &DecodeConfig) -> Result<(DecodeConfig, Option<Teacher>)> {
        let mut d = base.clone();
        if let Some(a) = self.alpha {
            d.alpha = a;
        }
        if let Some(m) = self.npd {
            d.length_beam = m;
        }
        if let Some(m) = self.mode {
            d.mode = m;
        }
        if let Some(x) = self.delta {
            d.delta = x;
        }
        if let Some(r) = self.rerank {
            d.rerank = r;
        }
        d.validate()?;
        let teacher = match &self.teacher {
            Some(p) => Some(SavedModel::load(p)?.into_teacher()?),
            None => None,
        };
        if d.rerank == Rerank::Teacher && d.length_beam > 1 && teacher.is_none() {
            return Err(Error::Config("teacher reranking needs --teacher".into()));
        }
        Ok((d, teacher))
    }
}

fn resolve_config(path: &Path, vocab: &Vocabulary) -> Result<RunConfig> {
    let mut rc = RunConfig::load(path)?;
    if rc.vocab_size_pinned {
        check_vocab(rc.model.vocab_size, vocab)?;
    } else {
        rc.model.vocab_size = vocab.len();
    }
    rc.validate()?;
    Ok(rc)
}

fn train_one(rc: &RunConfig, arch: Arch, pairs: &[SentencePair], seed: u64, log_every: usize) -> Result<(SavedModel, Vec<String>)> {
    let steps = rc.train.steps;
    let mut log = vec!["step,pot,mlm,len,total".to_string()];
    let model = match arch {
        Arch::Renewnat => {
            let model = RenewNat::new(rc.model.clone(), rc.copy, seed)?;
            let mut tr = Trainer::new(model, rc.train.clone(), seed.wrapping_add(1))?;
            train_renewnat(&mut tr, pairs, steps, |s, l| {
                log.push(format!("{s},{},{},{},{}", l.pot, l.mlm, l.len, l.total));
                if log_every > 0 && s % log_every == 0 {
                    log::info!("step {s} pot {:.4} mlm {:.4} len {:.4}", l.pot, l.mlm, l.len);
                }
            })?;
            SavedModel::RenewNat(tr.model)
        }
        Arch::Teacher => {
            let t = Teacher::new(rc.model.clone(), seed)?;
            let mut tr = TeacherTrainer::new(t, rc.train.clone(), seed.wrapping_add(1))?;
            train_teacher(&mut tr, pairs, steps, |s, l| {
                log.push(format!("{s},{l},,,{l}"));
                if log_every > 0 && s % log_every == 0 {
                    log::info!("step {s} loss {l:.4}");
                }
            })?;
            SavedModel::Teacher(tr.teacher)
        }
    };
    Ok((model, log))
}

fn train(a: TrainArgs) -> Result<()> {
    let vocab = data_vocab(&a.data)?;
    let mut rc = resolve_config(&a.config, &vocab)?;
    if let Some(s) = a.steps {
        rc.train.steps = s;
    }
    if a.glancing && rc.train.glancing.is_none() {
        rc.train.glancing = Some(GlanceSchedule::default());
    }
    if let Some(m) = a.mlm_input {
        rc.train.mlm_input = m;
    }
    rc.validate()?;
    let pairs = load_split(&a.data, "train", &vocab, rc.model.max_len)?;
    log::info!("training {:?} on {} pairs for {} steps", a.arch, pairs.len(), rc.train.steps);
    let (model, log) = train_one(&rc, a.arch, &pairs, a.seed, a.log_every)?;
    model.save(&a.out)?;
    vocab.save(&sidecar(&a.out, "vocab"))?;
    write_file(&sidecar(&a.out, "conf"), &rc.to_text())?;
    write_file(&sidecar(&a.out, "losses.csv"), &(log.join("\n") + "\n"))?;
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> Result<()> {
    let teacher = SavedModel::load(&a.teacher)?.into_teacher()?;
    let vocab = Vocabulary::load(&sidecar(&a.teacher, "vocab"))?;
    check_vocab(teacher.cfg.vocab_size, &vocab)?;
    let pairs = load_split(&a.data, "train", &vocab, teacher.cfg.max_len)?;
    log::info!("distilling {} pairs with beam {}", pairs.len(), a.beam);
    let out = distill(&pairs, &teacher, a.beam);
    TextCorpus::from_pairs(&out, &vocab).write(&a.out, "train")?;
    for split in ["dev", "test"] {
        if a.data.join(format!("{split}.src")).exists() {
            TextCorpus::read(&a.data, split)?.write(&a.out, split)?;
        }
    }
    vocab.save(&a.out.join("vocab.txt"))
}

fn translate(a: TranslateArgs) -> Result<()> {
    let (model, vocab, base) = load_model(&a.ckpt)?;
    let (cfg, teacher) = a.decode.apply(&base)?;
    let lines = read_lines(&a.input)?;
    let mut out = String::new();
    let mut pot = String::new();
    for line in &lines {
        let r = decode(&model, &vocab.encode(line), &cfg, teacher.as_ref())?;
        out.push_str(&vocab.decode(&r.tokens));
        out.push('\n');
        pot.push_str(&vocab.decode(&r.potential.tokens));
        pot.push('\n');
    }
    write_file(&a.out, &out)?;
    if let Some(p) = &a.potential_out {
        write_file(p, &pot)?;
    }
    Ok(())
}

fn tokenize(lines: &[String]) -> Vec<Vec<&str>> {
    lines.iter().map(|l| l.split_whitespace().collect()).collect()
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let hyp_lines = read_lines(&a.hyp)?;
    let ref_lines = read_lines(&a.reference)?;
    if hyp_lines.len() != ref_lines.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses vs {} references",
            hyp_lines.len(),
            ref_lines.len()
        )));
    }
    let (hyps, refs) = (tokenize(&hyp_lines), tokenize(&ref_lines));
    let mut report = EvalReport::new(&hyps, &refs)?;
    if a.buckets {
        let src = read_lines(a.src.as_deref().expect("clap enforces --src"))?;
        let lens: Vec<usize> = src.iter().map(|l| l.split_whitespace().count()).collect();
        report.buckets = bucket_bleu(&lens, &hyps, &refs)?;
    }
    report.write_csv(std::io::stdout().lock())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invariant(format!("csv: {e}"))
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        k => Error::Invariant(format!("csv: {k:?}")),
    })?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ablate_alpha(a: AblateAlphaArgs) -> Result<()> {
    let (model, vocab, base) = load_model(&a.ckpt)?;
    let pairs = load_split(&a.data, &a.split, &vocab, model.cfg.max_len)?;
    let grid = parse_grid(&a.grid)?;
    let sweep = sweep_alpha(&model, &pairs, &base, &grid)?;
    let rows: Vec<Vec<String>> = sweep
        .iter()
        .map(|(al, s)| vec![format!("{al:.2}"), format!("{:.2}", s.final_bleu), format!("{:.2}", s.potential_bleu)])
        .collect();
    if let Some(best) = best_alpha(&sweep) {
        log::info!("best alpha {best:.2}");
    }
    write_rows(&a.out, &["alpha", "final_bleu", "potential_bleu"], &rows)
}

/// Trains one model per variant, tunes α on dev, scores test.
fn sweep_variants(c: &SweepArgs, variants: Vec<(String, RunConfig)>, header: &str) -> Result<()> {
    let vocab = data_vocab(&c.data)?;
    let grid = parse_grid(&c.grid)?;
    let max_len = variants.first().map_or(0, |v| v.1.model.max_len);
    let train = load_split(&c.data, "train", &vocab, max_len)?;
    let dev = load_split(&c.data, "dev", &vocab, max_len)?;
    let test = load_split(&c.data, "test", &vocab, max_len)?;
    let results: Vec<Result<Vec<String>>> = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|(name, rc)| {
                let (train, dev, test, grid) = (&train, &dev, &test, &grid);
                s.spawn(move || -> Result<Vec<String>> {
                    let (m, _) = train_one(rc, Arch::Renewnat, train, c.seed, 0)?;
                    let model = m.into_renewnat()?;
                    let sweep = sweep_alpha(&model, dev, &rc.decode, grid)?;
                    let alpha = best_alpha(&sweep).unwrap_or(rc.decode.alpha);
                    let cfg = DecodeConfig { alpha, ..rc.decode.clone() };
                    let (_, s) = evaluate_pairs(&model, test, &cfg, None)?;
                    log::info!("{name}: alpha {alpha:.2} final {:.2} potential {:.2}", s.final_bleu, s.potential_bleu);
                    Ok(vec![
                        name.clone(),
                        format!("{alpha:.2}"),
                        format!("{:.2}", s.final_bleu),
                        format!("{:.2}", s.potential_bleu),
                    ])
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_rows(&c.out, &[header, "alpha", "final_bleu", "potential_bleu"], &rows)
}

fn sweep_base(c: &SweepArgs) -> Result<RunConfig> {
    let vocab = data_vocab(&c.data)?;
    let mut rc = resolve_config(&c.config, &vocab)?;
    if let Some(s) = c.steps {
        rc.train.steps = s;
    }
    Ok(rc)
}

fn ablate_k(a: AblateKArgs) -> Result<()> {
    let base = sweep_base(&a.common)?;
    let variants = a
        .ks
        .iter()
        .map(|&k| {
            let mut rc = base.clone();
            rc.model.k_mlm_layers = k;
            rc.validate()?;
            Ok((k.to_string(), rc))
        })
        .collect::<Result<Vec<_>>>()?;
    sweep_variants(&a.common, variants, "k")
}

fn ablate_strategy(a: AblateStrategyArgs) -> Result<()> {
    let base = sweep_base(&a.common)?;
    let variants = a
        .strategies
        .iter()
        .map(|&st| {
            let mut rc = base.clone();
            rc.train.mlm_input = st;
            (st.to_string(), rc)
        })
        .collect();
    sweep_variants(&a.common, variants, "strategy")
}

fn bench(a: BenchArgs) -> Result<()> {
    let (model, vocab, base) = load_model(&a.ckpt)?;
    let (cfg, teacher) = a.decode.apply(&base)?;
    let mut pairs = load_split(&a.data, &a.split, &vocab, model.cfg.max_len)?;
    if let Some(n) = a.limit {
        pairs.truncate(n);
    }
    let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.src.as_slice()).collect();
    let mut hyps = Vec::with_capacity(srcs.len());
    let ours = measure_latency(&srcs, a.warmup, |s| {
        hyps.push(decode(&model, s, &cfg, teacher.as_ref())?.tokens);
        Ok(())
    })?;
    hyps.drain(..a.warmup.min(hyps.len()));
    let baseline = match SavedModel::load(&a.baseline)? {
        SavedModel::RenewNat(b) => measure_latency(&srcs, a.warmup, |s| decode(&b, s, &cfg, None).map(drop))?,
        SavedModel::Teacher(t) => {
            measure_latency(&srcs, a.warmup, |s| teacher_beam_search(&t, s, a.beam).map(drop))?
        }
    };
    let refs: Vec<&[usize]> = pairs.iter().map(|p| p.tgt.as_slice()).collect();
    let mut report = EvalReport::new(&hyps, &refs)?;
    report.latency_ms = Some(ours.mean.as_secs_f64() * 1e3);
    report.speedup = Some(ours.speedup_over(&baseline));
    report.baseline = Some(a.baseline.display().to_string());
    report.hardware = Some(hardware_fingerprint());
    let f = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    report.write_csv(f)
}

fn make_data(a: MakeDataArgs) -> Result<()> {
    if a.min_len > a.max_len {
        return Err(Error::Config(format!("--min-len {} > --max-len {}", a.min_len, a.max_len)));
    }
    let words = crate::data::synthetic_words(a.vocab_size);
    let vocab = Vocabulary::with_words(&words)?;
    for (i, (split, n)) in [("train", a.train), ("dev", a.dev), ("test", a.test)].into_iter().enumerate() {
        if n == 0 {
            continue;
        }
        make_synthetic(a.task, a.vocab_size, a.min_len..=a.max_len, n, a.seed.wrapping_add(i as u64))?
            .write(&a.out, split)?;
    }
    vocab.save(&a.out.join("vocab.txt"))?;
    let mut o = std::io::stdout().lock();
    let _ = writeln!(o, "wrote {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_appends() {
        assert_eq!(sidecar(Path::new("a/m.ckpt"), "vocab"), PathBuf::from("a/m.ckpt.vocab"));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_command(["renewnat", "frobnicate"]), 2);
        assert_eq!(run_command(["renewnat", "translate", "--bogus"]), 2);
        assert_eq!(run_command(["renewnat", "evaluate", "--hyp", "x", "--ref", "y", "--buckets"]), 2);
    }

    #[test]
    fn missing_file_exits_two() {
        let d = tempfile::tempdir().unwrap();
        let missing = d.path().join("nope.txt");
        let m = missing.to_str().unwrap();
        assert_eq!(run_command(["renewnat", "evaluate", "--hyp", m, "--ref", m]), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_command(["renewnat", "--help"]), 0);
    }

    #[test]
    fn other_failures_exit_one() {
        let d = tempfile::tempdir().unwrap();
        let h = d.path().join("h");
        let r = d.path().join("r");
        fs::write(&h, "a b\n").unwrap();
        fs::write(&r, "a b\nc\n").unwrap();
        let (h, r) = (h.to_str().unwrap(), r.to_str().unwrap());
        assert_eq!(run_command(["renewnat", "evaluate", "--hyp", h, "--ref", r]), 1);
    }
}
