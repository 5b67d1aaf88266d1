//! Binary model checkpoints: a fixed header (format version, model config,
//! vocabulary hash, training-step counter) followed by named parameter
//! blocks of little-endian f32 values. Roundtrips are byte-exact.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, TransformerLM};

const MAGIC: &[u8; 8] = b"DSGPTCK\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} unsupported (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, current {current}")]
    VocabHashMismatch { checkpoint: String, current: String },
    #[error("checkpoint config invalid: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A loaded checkpoint: the materialized model plus the provenance header.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: TransformerLM<f32>,
    pub vocab_hash: [u8; 32],
    pub step: u64,
}

impl Checkpoint {
    /// Fails with a distinct error kind when `current` is not the
    /// vocabulary the checkpoint was trained under.
    pub fn require_vocab(&self, current: &[u8; 32]) -> Result<(), CheckpointError> {
        if &self.vocab_hash != current {
            return Err(CheckpointError::VocabHashMismatch {
                checkpoint: hex_string(&self.vocab_hash),
                current: hex_string(current),
            });
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

pub fn serialize_checkpoint(
    model: &TransformerLM<f32>,
    vocab_hash: &[u8; 32],
    step: u64,
) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.n_layers as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.n_heads as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.d_model as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.d_ff as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.max_seq_len as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
    out.push(cfg.tie_embeddings as u8);
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(vocab_hash);
    out.extend_from_slice(&step.to_le_bytes());

    let mut count: u32 = 0;
    model.visit_params(|_, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    model.visit_params(|name, tensor| {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

pub fn save_checkpoint(
    model: &TransformerLM<f32>,
    vocab_hash: &[u8; 32],
    step: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    std::fs::write(path, serialize_checkpoint(model, vocab_hash, step))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let config = ModelConfig {
        n_layers: r.u32("n_layers")? as usize,
        n_heads: r.u32("n_heads")? as usize,
        d_model: r.u32("d_model")? as usize,
        d_ff: r.u32("d_ff")? as usize,
        max_seq_len: r.u32("max_seq_len")? as usize,
        vocab_size: r.u32("vocab_size")? as usize,
        dropout_rate: r.f32("dropout_rate")?,
        tie_embeddings: r.u8("tie_embeddings")? != 0,
        seed: r.u64("seed")?,
    };
    let vocab_hash: [u8; 32] = r.take(32, "vocab_hash")?.try_into().unwrap();
    let step = r.u64("step")?;
    let declared = r.u32("block_count")?;

    let mut model = TransformerLM::<f32>::init(config)?;
    let mut expected = 0u32;
    model.visit_params(|_, _| expected += 1);
    if declared != expected {
        return Err(CheckpointError::Corrupt(format!(
            "{declared} parameter blocks declared, model needs {expected}"
        )));
    }
    let mut failure: Option<CheckpointError> = None;
    model.visit_params_mut(|name, tensor| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = read_block_into(&mut r, name, tensor) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after final block",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model,
        vocab_hash,
        step,
    })
}

fn read_block_into(
    r: &mut Reader,
    name: &str,
    tensor: &mut crate::tensor::Tensor<f32>,
) -> Result<(), CheckpointError> {
    let name_len = r.u16("block name length")? as usize;
    let found_name = std::str::from_utf8(r.take(name_len, "block name")?)
        .map_err(|_| CheckpointError::Corrupt("block name is not UTF-8".into()))?;
    if found_name != name {
        return Err(CheckpointError::Corrupt(format!(
            "expected parameter block {name:?}, found {found_name:?}"
        )));
    }
    let ndims = r.u8("block rank")? as usize;
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        shape.push(r.u32("block extent")? as usize);
    }
    if shape != tensor.shape() {
        return Err(CheckpointError::Corrupt(format!(
            "parameter {name:?} has shape {shape:?}, model expects {:?}",
            tensor.shape()
        )));
    }
    let raw = r.take(tensor.numel() * 4, "block data")?;
    for (dst, chunk) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
        *dst = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    deserialize_checkpoint(&bytes)
}
