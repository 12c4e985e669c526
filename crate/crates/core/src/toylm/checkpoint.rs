// SPDX-License-Identifier: MIT OR Apache-2.0

//! `TOYLM1` checkpoint format.
//!
//! ```text
//! magic        6 bytes  "TOYLM1"
//! n_layers     u32 LE
//! n_heads      u32 LE
//! d_model      u32 LE
//! d_ff         u32 LE
//! vocab_size   u32 LE
//! max_seq_len  u32 LE
//! ln_eps       u32 LE   (bit pattern of the f32 epsilon)
//! params       f32 LE, row-major, in `ModelParams::iter` order
//! ```
//!
//! The vocabulary lives in a separate text file (one token per line).

use std::path::Path;

use super::model::{LanguageModel, ModelConfig, ModelParams};
use super::tokenizer::Tokenizer;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"TOYLM1";

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} does not fit in u32")))
}

pub fn encode_checkpoint(model: &LanguageModel) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(6 + 28 + 4 * model.params.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for (v, name) in [
        (c.n_layers, "n_layers"),
        (c.n_heads, "n_heads"),
        (c.d_model, "d_model"),
        (c.d_ff, "d_ff"),
        (c.vocab_size, "vocab_size"),
        (c.max_seq_len, "max_seq_len"),
    ] {
        out.extend_from_slice(&to_u32(v, name)?.to_le_bytes());
    }
    out.extend_from_slice(&(c.layer_norm_eps as f32).to_bits().to_le_bytes());
    for t in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format("checkpoint", format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], tokenizer: Tokenizer) -> Result<LanguageModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let mut field = || r.u32().map(|v| v as usize);
    let config = ModelConfig {
        n_layers: field()?,
        n_heads: field()?,
        d_model: field()?,
        d_ff: field()?,
        vocab_size: field()?,
        max_seq_len: field()?,
        layer_norm_eps: f32::from_bits(r.u32()?) as f64,
    };
    config
        .validate()
        .map_err(|e| Error::format("checkpoint", format!("config: {e}")))?;
    let shapes = ModelParams::shapes(&config);
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * 4;
    if bytes.len() - r.pos != expected {
        return Err(Error::format(
            "checkpoint",
            format!("expected {expected} parameter bytes, found {}", bytes.len() - r.pos),
        ));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    let params = ModelParams::from_ordered(config.n_layers, tensors)
        .ok_or_else(|| Error::format("checkpoint", "parameter layout mismatch"))?;
    LanguageModel::new(config, tokenizer, params)
}

/// Writes `checkpoint` and `vocab` files.
pub fn save_model(model: &LanguageModel, checkpoint: &Path, vocab: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    crate::io::write_atomic(checkpoint, &bytes)?;
    crate::io::write_atomic(vocab, model.tokenizer.to_vocab_text().as_bytes())
}

pub fn load_model(checkpoint: &Path, vocab: &Path) -> Result<LanguageModel> {
    let tokenizer = Tokenizer::load(vocab)?;
    let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    decode_checkpoint(&bytes, tokenizer)
}
