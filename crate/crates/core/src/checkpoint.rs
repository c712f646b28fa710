//! Versioned binary checkpoints ("MUGC") with a trailing CRC-32.
//!
//! Layout (little-endian): magic, `u32` version, `u32` config length and
//! `key=value` config text, `u32` tensor count and per tensor `u32` name
//! length, name, `u32` ndim, dims, `f32` data; then a `u8` optimizer flag
//! followed, when set, by a `u64` step and a second tensor section holding
//! `m/<name>` and `v/<name>` moments; finally the CRC of all prior bytes.

use std::fs;
use std::path::Path;

use crate::error::{MugError, Result};
use crate::kv;
use crate::model::{Model, ModelConfig};
use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::Vocab;

const MAGIC: &[u8; 4] = b"MUGC";
pub const VERSION: u32 = 1;
const VOCAB_KEY: &str = "vocab";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Option<Vocab>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model<f32>> {
        Model::init(&self.config, 0)?.with_params(self.params.clone())
    }

    pub fn require_vocab(&self) -> Result<&Vocab> {
        self.vocab
            .as_ref()
            .ok_or_else(|| MugError::Config("checkpoint carries no vocabulary".into()))
    }
}

/// Bounds-checked cursor over a CRC-terminated buffer.
pub(crate) struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
    source: String,
}

impl<'a> Reader<'a> {
    /// Verifies the trailing CRC and exposes the bytes before it.
    pub fn new(bytes: &'a [u8], source: &str) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(MugError::format(source, format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(MugError::Checksum {
                path: source.to_string(),
                stored,
                computed,
            });
        }
        Ok(Self {
            body,
            pos: 0,
            source: source.to_string(),
        })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.body.len());
        let end = end.ok_or_else(|| MugError::format(&self.source, "unexpected end of data"))?;
        let s = &self.body[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| MugError::format(&self.source, "invalid UTF-8"))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(MugError::format(
                &self.source,
                format!("{} trailing bytes", self.body.len() - self.pos),
            ));
        }
        Ok(())
    }

    fn err(&self, msg: impl Into<String>) -> MugError {
        MugError::format(&self.source, msg)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensors<'a>(buf: &mut Vec<u8>, tensors: &[(String, &'a Tensor<f32>)]) {
    put_u32(buf, tensors.len());
    for (name, t) in tensors {
        put_u32(buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(buf, t.shape().len());
        for &d in t.shape() {
            put_u32(buf, d);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(r.err(format!("tensor {name} has rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| r.err(format!("tensor {name} has invalid shape {shape:?}")))?;
        let data = r.f32s(n)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn encode_checkpoint(
    model: &Model<f32>,
    vocab: Option<&Vocab>,
    optimizer: Option<&OptimizerState<f32>>,
) -> Result<Vec<u8>> {
    let mut config = model.config.to_kv();
    if let Some(v) = vocab {
        config.push_str(&format!("{VOCAB_KEY}={}\n", v.tokens().join(" ")));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize);
    put_u32(&mut buf, config.len());
    buf.extend_from_slice(config.as_bytes());
    let params: Vec<_> = model.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    put_tensors(&mut buf, &params);
    match optimizer {
        None => buf.push(0),
        Some(st) => {
            if !st.matches(&model.params) {
                return Err(MugError::Shape("optimizer state does not match parameters".into()));
            }
            buf.push(1);
            buf.extend_from_slice(&st.step.to_le_bytes());
            let mut moments = Vec::with_capacity(2 * params.len());
            for (i, (name, _)) in params.iter().enumerate() {
                moments.push((format!("m/{name}"), &st.m[i]));
            }
            for (i, (name, _)) in params.iter().enumerate() {
                moments.push((format!("v/{name}"), &st.v[i]));
            }
            put_tensors(&mut buf, &moments);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8], source: &str) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, source)?;
    if r.take(4)? != MAGIC {
        return Err(r.err("bad magic (expected MUGC)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| r.err("config block is not UTF-8"))?;
    let mut config = ModelConfig::default();
    let mut vocab = None;
    for (k, v) in kv::parse(text, source)? {
        if k == VOCAB_KEY {
            vocab = Some(Vocab::from_text(&v.split(' ').map(|t| format!("{t}\n")).collect::<String>())?);
        } else if !config.set(&k, &v)? {
            return Err(r.err(format!("unknown config key {k}")));
        }
    }
    config.validate()?;

    let mut params = ParamStore::new();
    for (name, t) in read_tensors(&mut r)? {
        params.insert(name, t)?;
    }
    // validates names and shapes against the architecture
    let reference = Model::<f32>::init(&config, 0)?.with_params(params)?;
    let params = reference.params;

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut by_name: std::collections::HashMap<String, Tensor<f32>> = read_tensors(&mut r)?.into_iter().collect();
            let mut take = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
                params
                    .iter()
                    .map(|(name, p)| {
                        let key = format!("{prefix}/{name}");
                        let t = by_name
                            .remove(&key)
                            .ok_or_else(|| MugError::format(source, format!("missing optimizer entry {key}")))?;
                        if t.shape() != p.shape() {
                            return Err(MugError::format(source, format!("optimizer entry {key} has wrong shape")));
                        }
                        Ok(t)
                    })
                    .collect()
            };
            let m = take("m")?;
            let v = take("v")?;
            if let Some(extra) = by_name.keys().min() {
                return Err(MugError::format(source, format!("unknown optimizer entry {extra}")));
            }
            Some(OptimizerState { step, m, v })
        }
        f => return Err(r.err(format!("invalid optimizer flag {f}"))),
    };
    r.finish()?;
    Ok(Checkpoint {
        config,
        vocab,
        params,
        optimizer,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    vocab: Option<&Vocab>,
    optimizer: Option<&OptimizerState<f32>>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, vocab, optimizer)?;
    fs::write(path, bytes).map_err(|e| MugError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| MugError::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
