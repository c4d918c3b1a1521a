//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Every key maps onto a field of
//! [`ModelConfig`], [`TrainConfig`] or [`DecodeConfig`]; anything else is
//! rejected so a typo in an ablation config cannot silently fall back to a
//! default.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::decoding::{DecodeConfig, DistinguishMode, Rerank};
use crate::error::{Error, Result};
use crate::model::{CopyMode, GlanceSchedule, TrainConfig};
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub copy: CopyMode,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// Set when the file pins `vocab_size`; otherwise the vocabulary decides.
    pub vocab_size_pinned: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            copy: CopyMode::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            vocab_size_pinned: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "vocab_size",
    "d_model",
    "n_heads",
    "ffn_dim",
    "n_enc_layers",
    "n_dec_layers",
    "k_mlm_layers",
    "max_len",
    "dropout",
    "tie_output",
    "copy",
    "lr",
    "warmup_steps",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "mlm_input",
    "p_mix",
    "glancing",
    "glance_start",
    "glance_end",
    "label_smoothing",
    "weight_pot",
    "weight_mlm",
    "weight_len",
    "steps",
    "max_tokens",
    "alpha",
    "delta",
    "mode",
    "length_beam",
    "rerank",
    "decode_max_len",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = HashSet::new();
        let mut glancing = false;
        let mut glance = GlanceSchedule::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", no + 1)));
            }
            c.set(key, value, &mut glancing, &mut glance)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        c.train.glancing = glancing.then_some(glance);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str, glancing: &mut bool, glance: &mut GlanceSchedule) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.decode);
        match key {
            "vocab_size" => {
                m.vocab_size = parse(key, v)?;
                self.vocab_size_pinned = true;
            }
            "d_model" => m.d_model = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "ffn_dim" => m.ffn_dim = parse(key, v)?,
            "n_enc_layers" => m.n_enc_layers = parse(key, v)?,
            "n_dec_layers" => m.n_dec_layers = parse(key, v)?,
            "k_mlm_layers" => m.k_mlm_layers = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "tie_output" => m.tie_output = parse_bool(key, v)?,
            "copy" => self.copy = v.parse()?,
            "lr" => t.lr = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "adam_beta1" => t.adam.beta1 = parse(key, v)?,
            "adam_beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "mlm_input" => t.mlm_input = v.parse()?,
            "p_mix" => t.p_mix = parse(key, v)?,
            "glancing" => *glancing = parse_bool(key, v)?,
            "glance_start" => glance.start = parse(key, v)?,
            "glance_end" => glance.end = parse(key, v)?,
            "label_smoothing" => t.label_smoothing = parse(key, v)?,
            "weight_pot" => t.loss_weights[0] = parse(key, v)?,
            "weight_mlm" => t.loss_weights[1] = parse(key, v)?,
            "weight_len" => t.loss_weights[2] = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "max_tokens" => t.max_tokens = parse(key, v)?,
            "alpha" => d.alpha = parse(key, v)?,
            "delta" => d.delta = parse(key, v)?,
            "mode" => d.mode = v.parse()?,
            "length_beam" => d.length_beam = parse(key, v)?,
            "rerank" => d.rerank = v.parse()?,
            "decode_max_len" => d.max_len = Some(parse(key, v)?),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()
    }

    /// Renders every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.decode);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if self.vocab_size_pinned {
            kv("vocab_size", m.vocab_size.to_string());
        }
        kv("d_model", m.d_model.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("ffn_dim", m.ffn_dim.to_string());
        kv("n_enc_layers", m.n_enc_layers.to_string());
        kv("n_dec_layers", m.n_dec_layers.to_string());
        kv("k_mlm_layers", m.k_mlm_layers.to_string());
        kv("max_len", m.max_len.to_string());
        kv("dropout", m.dropout.to_string());
        kv("tie_output", m.tie_output.to_string());
        kv("copy", self.copy.to_string());
        kv("lr", t.lr.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("adam_beta1", t.adam.beta1.to_string());
        kv("adam_beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("mlm_input", t.mlm_input.to_string());
        kv("p_mix", t.p_mix.to_string());
        kv("glancing", t.glancing.is_some().to_string());
        if let Some(g) = t.glancing {
            kv("glance_start", g.start.to_string());
            kv("glance_end", g.end.to_string());
        }
        kv("label_smoothing", t.label_smoothing.to_string());
        kv("weight_pot", t.loss_weights[0].to_string());
        kv("weight_mlm", t.loss_weights[1].to_string());
        kv("weight_len", t.loss_weights[2].to_string());
        kv("steps", t.steps.to_string());
        kv("max_tokens", t.max_tokens.to_string());
        kv("alpha", d.alpha.to_string());
        kv("delta", d.delta.to_string());
        kv(
            "mode",
            match d.mode {
                DistinguishMode::Threshold => "threshold",
                DistinguishMode::Ratio => "ratio",
            }
            .into(),
        );
        kv("length_beam", d.length_beam.to_string());
        kv(
            "rerank",
            match d.rerank {
                Rerank::SelfScore => "self",
                Rerank::TokenMean => "token-mean",
                Rerank::Teacher => "teacher",
            }
            .into(),
        );
        if let Some(n) = d.max_len {
            kv("decode_max_len", n.to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::parse("d_modle = 32\n").unwrap_err();
        assert!(e.to_string().contains("d_modle"), "{e}");
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        assert!(RunConfig::parse("lr = 1\nlr = 2\n").is_err());
        assert!(RunConfig::parse("lr 1\n").is_err());
        assert!(RunConfig::parse("lr = fast\n").is_err());
        assert!(RunConfig::parse("tie_output = maybe\n").is_err());
    }

    #[test]
    fn invalid_combination_is_rejected() {
        assert!(RunConfig::parse("n_dec_layers = 2\nk_mlm_layers = 2\n").is_err());
        assert!(RunConfig::parse("alpha = 1.5\n").is_err());
    }

    #[test]
    fn fields_land_where_expected() {
        let c = RunConfig::parse(
            "n_dec_layers = 6\nk_mlm_layers = 2 # renewal layers\nadam_beta2 = 0.999\n\
             glancing = true\nglance_end = 0.2\nmode = ratio\ndelta = 0.4\ncopy = uniform\n\
             weight_mlm = 0\nmlm_input = output\n",
        )
        .unwrap();
        assert_eq!((c.model.n_dec_layers, c.model.k_mlm_layers), (6, 2));
        assert_eq!(c.train.adam.beta2, 0.999);
        assert_eq!(c.train.glancing, Some(GlanceSchedule { start: 0.5, end: 0.2 }));
        assert_eq!(c.decode.mode, DistinguishMode::Ratio);
        assert_eq!(c.decode.delta, 0.4);
        assert_eq!(c.copy, CopyMode::Uniform);
        assert_eq!(c.train.loss_weights, [1.0, 0.0, 1.0]);
        assert!(!c.vocab_size_pinned);
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig::parse(
            "vocab_size = 40\nglancing = yes\nrerank = teacher\ndecode_max_len = 20\ncopy = soft:0.5\n",
        )
        .unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn every_key_is_accepted() {
        for k in KEYS {
            let v = match *k {
                "tie_output" | "glancing" => "false",
                "copy" => "soft",
                "mlm_input" => "mixed",
                "mode" => "threshold",
                "rerank" => "self",
                _ => "",
            };
            if v.is_empty() {
                continue;
            }
            RunConfig::parse(&format!("{k} = {v}\n")).unwrap();
        }
    }
}
