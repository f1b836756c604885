//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic `SMACCKPT`, `u32` version, `u32` byte length + UTF-8 `key=value`
//! block, `u32` tensor count, then per tensor `u32` name length + name
//! bytes, `u32` rank, `u64` per dim, and `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{EpochRecord, TrainConfig};
use crate::cell::MacVariant;
use crate::config::KeyValues;
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{MacModel, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMACCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: MacModel<f64>,
    pub vocab: Vocabulary,
    pub answers: Vocabulary,
    pub history: Vec<EpochRecord>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

fn vocab_entries(kv: &mut KeyValues, prefix: &str, v: &Vocabulary) {
    kv.set(&format!("{prefix}.reserved"), v.reserved());
    kv.set(&format!("{prefix}.words"), v.words().join(" "));
}

fn vocab_from(kv: &KeyValues, prefix: &str) -> Result<Vocabulary> {
    let words: Vec<&str> = kv.require(&format!("{prefix}.words"))?.split_whitespace().collect();
    match kv.require_parsed::<usize>(&format!("{prefix}.reserved"))? {
        0 => Vocabulary::closed(&words),
        2 => Vocabulary::with_reserved(&words),
        n => Err(Error::format("checkpoint", format!("unsupported reserved count {n}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format("checkpoint", format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn header(&self) -> KeyValues {
        let mut kv = self.train.to_key_values();
        let m = &self.model.config;
        kv.set("model.variant", m.variant);
        kv.set("model.d", m.d);
        kv.set("model.p", m.p);
        kv.set("model.h", m.h);
        kv.set("model.w", m.w);
        kv.set("model.d_in", m.d_in);
        vocab_entries(&mut kv, "vocab", &self.vocab);
        vocab_entries(&mut kv, "answers", &self.answers);
        kv.set("rng.seed", self.rng_seed);
        kv.set("rng.word_pos", self.rng_word_pos);
        kv.set("history.len", self.history.len());
        for (i, h) in self.history.iter().enumerate() {
            // `{:?}` round-trips f64 exactly.
            kv.set(
                &format!("history.{i}"),
                format!("{} {:?} {:?} {:?} {:?}", h.epoch, h.train_loss, h.train_accuracy, h.val_accuracy, h.seconds),
            );
        }
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = self.header().to_string();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for p in self.model.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. When `expect` is given the stored variant must
    /// match it.
    pub fn from_bytes(bytes: &[u8], expect: Option<MacVariant>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let kv = KeyValues::parse(text)?;
        let train = TrainConfig::from_key_values(&kv, TrainConfig::default())?;
        let vocab = vocab_from(&kv, "vocab")?;
        let answers = vocab_from(&kv, "answers")?;
        let variant: MacVariant = kv.require_parsed("model.variant")?;
        if let Some(want) = expect {
            if want != variant {
                return Err(Error::contract(format!("checkpoint holds a {variant} model, expected {want}")));
            }
        }
        let config = ModelConfig {
            variant,
            d: kv.require_parsed("model.d")?,
            p: kv.require_parsed("model.p")?,
            h: kv.require_parsed("model.h")?,
            w: kv.require_parsed("model.w")?,
            d_in: kv.require_parsed("model.d_in")?,
            vocab: vocab.len(),
            answers: answers.len(),
        };
        let mut history = Vec::new();
        for i in 0..kv.require_parsed::<usize>("history.len")? {
            let line = kv.require(&format!("history.{i}"))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |j: usize| -> Result<f64> {
                f.get(j)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format("checkpoint", format!("bad history line {line:?}")))
            };
            history.push(EpochRecord {
                epoch: num(0)? as usize,
                train_loss: num(1)?,
                train_accuracy: num(2)?,
                val_accuracy: num(3)?,
                seconds: num(4)?,
            });
        }

        let mut model = MacModel::<f64>::new(config, 0)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{count} tensors stored, model has {}", model.params.len()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|e| Error::format("checkpoint", e.to_string()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::format("checkpoint", format!("tensor {name:?} stored twice")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            model.params.assign(&name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            train,
            model,
            vocab,
            answers,
            history,
            rng_seed: kv.require_parsed("rng.seed")?,
            rng_word_pos: kv.require_parsed("rng.word_pos")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expect: Option<MacVariant>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expect)
    }
}
