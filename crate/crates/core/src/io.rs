//! Checkpoint files and atomic writes.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LPFM" | u32 version
//! u32 len | model config (TOML)
//! u32 len | train config (TOML, empty when absent)
//! u32 len | metadata (TOML)
//! u64 step
//! u32 count | count × (u32 name_len | name | u32 rank | rank × u64 dim | f32 payload)
//! u8 has_optimizer | [u64 adam_step | per tensor: f32 first moment | f32 second moment]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Tokenizer, TokenizerMode};
use crate::error::{Error, Result};
use crate::model::{LoopedModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{AdamW, TrainConfig};

pub const MAGIC: &[u8; 4] = b"LPFM";
pub const FORMAT_VERSION: u32 = 1;

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Tokenizer description needed to turn checkpoint outputs back into text.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointMeta {
    pub tokenizer: TokenizerMode,
    /// Char-mode alphabet; empty in byte mode.
    pub alphabet: String,
}

impl CheckpointMeta {
    pub fn for_tokenizer(t: &Tokenizer) -> Self {
        Self { tokenizer: t.mode(), alphabet: t.alphabet() }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::from_alphabet(self.tokenizer, &self.alphabet)
    }
}

pub struct Checkpoint {
    pub model: LoopedModel,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_payload(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.reserve(t.numel() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn toml_text<S: Serialize>(v: &S) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Checkpoint(format!("cannot encode config: {e}")))
}

pub fn encode_checkpoint(
    model: &LoopedModel,
    train: Option<&TrainConfig>,
    optimizer: Option<&AdamW>,
    step: u64,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(model.num_params() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_text(&mut out, &toml_text(model.config())?);
    put_text(&mut out, &train.map(toml_text).transpose()?.unwrap_or_default());
    put_text(&mut out, &toml_text(meta)?);
    put_u64(&mut out, step);
    put_u32(&mut out, model.params.len() as u32);
    for (_, p) in model.params.iter() {
        put_text(&mut out, &p.name);
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u64(&mut out, d as u64);
        }
        put_payload(&mut out, &p.value);
    }
    match optimizer {
        Some(opt) => {
            out.push(1);
            put_u64(&mut out, opt.step);
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_payload(&mut out, m);
                put_payload(&mut out, v);
            }
        }
        None => out.push(0),
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &LoopedModel,
    train: Option<&TrainConfig>,
    optimizer: Option<&AdamW>,
    step: u64,
    meta: &CheckpointMeta,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, train, optimizer, step, meta)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated payload: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn payload(&mut self, shape: &[usize], what: &str) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{what} is too large")))?, what)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

struct Decoded {
    config: ModelConfig,
    train: Option<TrainConfig>,
    meta: CheckpointMeta,
    step: u64,
    tensors: Vec<(String, Tensor<f32>)>,
    optimizer: Option<(u64, Vec<(Tensor<f32>, Tensor<f32>)>)>,
}

fn parse_toml<'de, S: Deserialize<'de>>(text: &'de str, what: &str) -> Result<S> {
    toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad {what} block: {e}")))
}

fn decode(buf: &[u8]) -> Result<Decoded> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
    }
    let config: ModelConfig = parse_toml(r.text("model config")?, "model config")?;
    let train_text = r.text("train config")?;
    let train = if train_text.is_empty() { None } else { Some(parse_toml(train_text, "train config")?) };
    let meta: CheckpointMeta = parse_toml(r.text("metadata")?, "metadata")?;
    let step = r.u64("step")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.text("tensor name")?.to_string();
        let rank = r.u32("tensor rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let value = r.payload(&shape, &name)?;
        tensors.push((name, value));
    }
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let adam_step = r.u64("optimizer step")?;
            let moments = tensors
                .iter()
                .map(|(name, t)| Ok((r.payload(t.shape(), name)?, r.payload(t.shape(), name)?)))
                .collect::<Result<Vec<_>>>()?;
            Some((adam_step, moments))
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Decoded { config, train, meta, step, tensors, optimizer })
}

/// Copies named tensors into `store`, which must hold exactly the same names and shapes.
fn install(store: &mut ParamStore, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
    for (i, (name, shape)) in expected.iter().enumerate() {
        match tensors.get(i) {
            Some((n, t)) if n == name && t.shape() == shape.as_slice() => {}
            Some((n, t)) => {
                return Err(Error::Checkpoint(format!(
                    "census mismatch at tensor {name} {shape:?}: checkpoint has {n} {:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("census mismatch: checkpoint lacks tensor {name} {shape:?}"))),
        }
    }
    if let Some((n, _)) = tensors.get(expected.len()) {
        return Err(Error::Checkpoint(format!("census mismatch: unexpected tensor {n}")));
    }
    for (p, (_, t)) in store.iter_mut().zip(tensors) {
        p.value = t;
    }
    Ok(())
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let d = decode(buf)?;
    let mut model = LoopedModel::init(d.config, 0)?;
    install(&mut model.params, d.tensors)?;
    let optimizer = d.optimizer.map(|(step, moments)| {
        let cfg = d.train.clone().unwrap_or_default();
        let mut opt = AdamW::new(&model.params, &cfg);
        opt.step = step;
        (opt.m, opt.v) = moments.into_iter().unzip();
        opt
    });
    Ok(Checkpoint { model, train: d.train, optimizer, step: d.step, meta: d.meta })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads only the parameters into an existing model, checking the census against it.
pub fn load_parameters_into(path: &Path, model: &mut LoopedModel) -> Result<u64> {
    let d = decode(&fs::read(path)?)?;
    install(&mut model.params, d.tensors)?;
    Ok(d.step)
}
