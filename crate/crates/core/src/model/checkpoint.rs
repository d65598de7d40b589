//! Checkpoint format: a small self-describing binary file.
//!
//! ```text
//! magic "LTHECKPT" | version u32 | vocab u32 | d_model u32 | n_heads u32 |
//! n_blocks u32 | d_ff u32 | max_seq_len u32 | n_tensors u32 |
//! repeat: name_len u32 | name bytes | rank u32 | dims u32… | data f64-LE…
//! ```
//!
//! Everything little-endian. Tensors appear in the model's canonical
//! parameter order and the loader verifies names, shapes, count and
//! finiteness — a truncated or shuffled file is an error, never a
//! silently-wrong model. Mask flags and trainable sets are transient state
//! and are not serialized.

use super::{ModelConfig, ModelError, ToyLm};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"LTHECKPT";
pub const CKPT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn to_bytes(model: &ToyLm) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let c = &model.cfg;
    for v in [
        c.vocab,
        c.d_model,
        c.n_heads,
        c.n_blocks,
        c.d_ff,
        c.max_seq_len,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.param_count() as u32).to_le_bytes());
    model.for_each_param(|name, _, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    });
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ToyLm, ModelError> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic = r.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(bad(format!(
            "unsupported version {version} (expected {CKPT_VERSION})"
        )));
    }
    let cfg = ModelConfig {
        vocab: r.u32()? as usize,
        d_model: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        n_blocks: r.u32()? as usize,
        d_ff: r.u32()? as usize,
        max_seq_len: r.u32()? as usize,
    };
    cfg.validate()?;
    let n_tensors = r.u32()? as usize;
    // init-then-overwrite keeps shape/name authority in one place
    let mut model = ToyLm::init(cfg, 0)?;
    if n_tensors != model.param_count() {
        return Err(bad(format!(
            "tensor count {} does not match config ({} expected)",
            n_tensors,
            model.param_count()
        )));
    }
    let mut expected = Vec::with_capacity(n_tensors);
    model.for_each_param(|name, _, t| expected.push((name.to_string(), t.shape().to_vec())));
    let mut loaded: Vec<Tensor> = Vec::with_capacity(n_tensors);
    for (name, shape) in &expected {
        let name_len = r.u32()? as usize;
        let got_name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("tensor name is not utf-8"))?;
        if got_name != name {
            return Err(bad(format!("expected tensor {name:?}, found {got_name:?}")));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        if &dims != shape {
            return Err(bad(format!(
                "tensor {name}: shape {dims:?} does not match config shape {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
            .collect();
        if !data.iter().all(|x| x.is_finite()) {
            return Err(bad(format!("tensor {name} contains non-finite values")));
        }
        loaded.push(Tensor::from_vec(&dims, data)?);
    }
    if r.at != bytes.len() {
        return Err(bad(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.at
        )));
    }
    let mut it = loaded.into_iter();
    model.for_each_param_mut(|_, t| *t = it.next().expect("counts checked above"));
    Ok(model)
}

pub fn save_checkpoint(model: &ToyLm, path: &Path) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyLm, ModelError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

/// Hex SHA-256 of the serialized model — the cheap "are these weights
/// bit-identical" probe used by restore checks and determinism tests.
pub fn model_hash(model: &ToyLm) -> String {
    let mut h = Sha256::new();
    h.update(to_bytes(model));
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.at + n > self.buf.len() {
            return Err(bad("unexpected end of file"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("slice is 4 bytes")))
    }
}
