//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PGTN"  version:u32  count:u64
//! count × { name_len:u32 name:[u8]  tag_kind:u8 tag_block:u32 tag_matrix:u8
//!           rank:u32 dims:[u64; rank]  payload:[f64; Π dims] }
//! ```
//!
//! A file of `n` tensors therefore takes
//! `16 + Σ (14 + name_len + 8·rank + 8·numel)` bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, LoraTarget, Model, ModelConfig, ParameterRegistry, ParameterTag};
use crate::peft::{self, PeftConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PGTN";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 16;
/// name length + tag (kind, block, matrix) + rank.
pub const TENSOR_OVERHEAD_BYTES: u64 = 4 + 1 + 4 + 1 + 4;
const MAX_RANK: usize = 8;
const MAX_NAME: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub tag: ParameterTag,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<CheckpointTensor>,
}

fn tag_code(tag: ParameterTag) -> (u8, u32, u8) {
    match tag {
        ParameterTag::Embedding => (0, 0, 0),
        ParameterTag::Block(i) => (1, i as u32, 0),
        ParameterTag::AdapterIn(i) => (2, i as u32, 0),
        ParameterTag::LoraFactor(i, t) => (3, i as u32, t.code()),
        ParameterTag::BiasTerm(i) => (4, i as u32, 0),
        ParameterTag::Head => (5, 0, 0),
    }
}

fn tag_from_code(kind: u8, block: u32, matrix: u8) -> Result<ParameterTag> {
    let block = block as usize;
    let tag = match kind {
        0 => ParameterTag::Embedding,
        1 => ParameterTag::Block(block),
        2 => ParameterTag::AdapterIn(block),
        3 => ParameterTag::LoraFactor(
            block,
            LoraTarget::from_code(matrix).ok_or_else(|| Error::Format(format!("unknown LoRA matrix code {matrix}")))?,
        ),
        4 => ParameterTag::BiasTerm(block),
        5 => ParameterTag::Head,
        other => return Err(Error::Format(format!("unknown tag code {other}"))),
    };
    if tag.block() == Some(0) {
        return Err(Error::Format("block indices start at 1".into()));
    }
    Ok(tag)
}

/// Exact encoded size of `tensors`.
pub fn encoded_size<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> u64 {
    HEADER_BYTES
        + tensors
            .into_iter()
            .map(|(name, t)| TENSOR_OVERHEAD_BYTES + name.len() as u64 + 8 * t.rank() as u64 + 8 * t.numel() as u64)
            .sum::<u64>()
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "checkpoint is truncated",
            )));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_registry(registry: &ParameterRegistry) -> Self {
        Checkpoint {
            tensors: registry
                .iter()
                .map(|(_, e)| CheckpointTensor {
                    name: e.name.clone(),
                    tag: e.tag,
                    value: e.value.clone(),
                })
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let size = encoded_size(self.tensors.iter().map(|t| (t.name.as_str(), &t.value)));
        let mut out = Vec::with_capacity(size as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            let (kind, block, matrix) = tag_code(t.tag);
            out.push(kind);
            out.extend_from_slice(&block.to_le_bytes());
            out.push(matrix);
            out.extend_from_slice(&(t.value.rank() as u32).to_le_bytes());
            for &d in t.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a whole checkpoint. Sizes read from the input are checked
    /// against the bytes that remain before anything is allocated.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        if count > r.buf.len() as u64 / TENSOR_OVERHEAD_BYTES {
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("{count} tensors do not fit in the file"),
            )));
        }
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME {
                return Err(Error::Format(format!("name length {name_len} is too long")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let tag = tag_from_code(r.u8()?, r.u32()?, r.u8()?)?;
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("rank {rank} of `{name}` is too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                if d == 0 {
                    return Err(Error::Format(format!("`{name}` has a zero dimension")));
                }
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= r.buf.len() as u64 / 8)
                    .ok_or_else(|| Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "payload exceeds file")))?;
                shape.push(d as usize);
            }
            let payload = r.take(numel as usize * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.push(CheckpointTensor { name, tag, value });
        }
        if !r.buf.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

pub fn save_checkpoint(registry: &ParameterRegistry, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, Checkpoint::from_registry(registry).encode())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

/// Rebuilds a model from a checkpoint. The architecture comes from
/// `config` and `peft`; every registered parameter must appear in the file
/// with a matching tag and shape, and the file may hold nothing else.
pub fn load_model(path: impl AsRef<Path>, config: &ModelConfig, peft: &PeftConfig) -> Result<(Model, ParameterRegistry)> {
    let ckpt = load_checkpoint(path)?;
    let (mut model, mut registry) = build_model(config, 0)?;
    peft::apply(&mut model, &mut registry, peft, 1)?;
    if ckpt.tensors.len() != registry.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, the model has {}",
            ckpt.tensors.len(),
            registry.len()
        )));
    }
    for t in ckpt.tensors {
        let id = registry
            .find(&t.name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor `{}`", t.name)))?;
        let e = registry.get_mut(id);
        if e.tag != t.tag || e.value.shape() != t.value.shape() {
            return Err(Error::Format(format!("`{}` does not match the model", t.name)));
        }
        e.value = t.value;
    }
    Ok((model, registry))
}
