//! Binary checkpoints.
//!
//! Layout, all little-endian: magic `RNAT`, version `u32`, array count
//! `u32`; per array a `u16` name length, the UTF-8 name, a `u8` rank, one
//! `u64` per dimension and the `f32` payload; finally a CRC32 of every
//! preceding byte. Model hyper-parameters travel as rank-0 `meta.*` arrays
//! ahead of the weights.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CopyMode, RenewNat};
use crate::numerics::{Array, ParameterStore};
use crate::teacher::Teacher;
use crate::transformer::ModelConfig;

pub const MAGIC: &[u8; 4] = b"RNAT";
pub const VERSION: u32 = 1;

/// Named arrays in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.arrays.len()).map_err(|_| Error::Checkpoint("too many arrays".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, a) in &self.arrays {
            let n = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(a.shape().len()).map_err(|_| Error::Checkpoint(format!("rank of {name}")))?;
            out.push(rank);
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in a.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(bad("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let crc = crc32fast::hash(body);
        if stored != crc {
            return Err(Error::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {crc:08x}")));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("shape overflow"))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| bad("shape overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((name, Array::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes before CRC"));
        }
        Ok(Checkpoint { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    fn meta(&self, key: &str) -> Result<f32> {
        self.get(&format!("meta.{key}"))
            .and_then(|a| a.data().first().copied())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta.{key}")))
    }

    fn params(&self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for (name, a) in self.arrays.iter().filter(|(n, _)| !n.starts_with("meta.")) {
            store.insert(name.clone(), a.clone())?;
        }
        Ok(store)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone)]
pub enum SavedModel {
    RenewNat(RenewNat),
    Teacher(Teacher),
}

const KIND_RENEWNAT: f32 = 0.0;
const KIND_TEACHER: f32 = 1.0;

fn config_meta(cfg: &ModelConfig) -> Vec<(&'static str, f32)> {
    vec![
        ("vocab_size", cfg.vocab_size as f32),
        ("d_model", cfg.d_model as f32),
        ("n_heads", cfg.n_heads as f32),
        ("ffn_dim", cfg.ffn_dim as f32),
        ("n_enc_layers", cfg.n_enc_layers as f32),
        ("n_dec_layers", cfg.n_dec_layers as f32),
        ("k_mlm_layers", cfg.k_mlm_layers as f32),
        ("max_len", cfg.max_len as f32),
        ("dropout", cfg.dropout),
        ("tie_output", if cfg.tie_output { 1.0 } else { 0.0 }),
    ]
}

fn config_from(ck: &Checkpoint) -> Result<ModelConfig> {
    let int = |k: &str| -> Result<usize> {
        let v = ck.meta(k)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("meta.{k} = {v} is not a count")));
        }
        Ok(v as usize)
    };
    Ok(ModelConfig {
        vocab_size: int("vocab_size")?,
        d_model: int("d_model")?,
        n_heads: int("n_heads")?,
        ffn_dim: int("ffn_dim")?,
        n_enc_layers: int("n_enc_layers")?,
        n_dec_layers: int("n_dec_layers")?,
        k_mlm_layers: int("k_mlm_layers")?,
        max_len: int("max_len")?,
        dropout: ck.meta("dropout")?,
        tie_output: ck.meta("tie_output")? != 0.0,
    })
}

impl SavedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let (kind, cfg, params, copy) = match self {
            SavedModel::RenewNat(m) => (KIND_RENEWNAT, &m.cfg, &m.params, Some(m.copy)),
            SavedModel::Teacher(t) => (KIND_TEACHER, &t.cfg, &t.params, None),
        };
        let mut meta = vec![("kind", kind)];
        meta.extend(config_meta(cfg));
        // zero temperature encodes uniform copy
        meta.push((
            "copy_temperature",
            match copy {
                Some(CopyMode::Soft { temperature }) => temperature,
                _ => 0.0,
            },
        ));
        let mut arrays: Vec<(String, Array)> = meta
            .into_iter()
            .map(|(k, v)| (format!("meta.{k}"), Array::scalar(v)))
            .collect();
        arrays.extend(params.iter().map(|(n, a)| {
            let mut a = a.clone();
            a.clear_grad();
            (n.to_string(), a)
        }));
        Checkpoint { arrays }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = config_from(ck)?;
        let params = ck.params()?;
        match ck.meta("kind")? {
            k if k == KIND_RENEWNAT => {
                let t = ck.meta("copy_temperature")?;
                let copy = if t > 0.0 {
                    CopyMode::Soft { temperature: t }
                } else {
                    CopyMode::Uniform
                };
                Ok(SavedModel::RenewNat(RenewNat::from_params(cfg, copy, params)?))
            }
            k if k == KIND_TEACHER => Ok(SavedModel::Teacher(Teacher::from_params(cfg, params)?)),
            k => Err(Error::Checkpoint(format!("unknown model kind {k}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn into_renewnat(self) -> Result<RenewNat> {
        match self {
            SavedModel::RenewNat(m) => Ok(m),
            SavedModel::Teacher(_) => Err(Error::Checkpoint("expected a RenewNAT checkpoint, found a teacher".into())),
        }
    }

    pub fn into_teacher(self) -> Result<Teacher> {
        match self {
            SavedModel::Teacher(t) => Ok(t),
            SavedModel::RenewNat(_) => Err(Error::Checkpoint("expected a teacher checkpoint, found RenewNAT".into())),
        }
    }
}

/// CRC32 stored in a checkpoint file's last four bytes.
pub fn file_crc(path: &Path) -> Result<u32> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    Ok(u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()))
}
