//! Binary model container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes   "CRRM"
//! version      u8        1
//! hidden_dim   u32
//! vocab_len    u32
//! oov_buckets  u32
//! hash_salt    u64
//! dropout_rate f64
//! vocabulary   vocab_len × (u32 byte length, UTF-8 bytes), in index order
//! w1           feature_dim × hidden_dim f64, one row per feature
//! b1           hidden_dim f64
//! w2           2 × hidden_dim f64, row-major
//! b2           2 f64
//! ```
//!
//! `feature_dim = 2·(vocab_len + oov_buckets) + 2`.

use std::sync::Arc;

use super::features::FeatureSpace;
use super::model::{Params, RerankerModel, NUM_CLASSES};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"CRRM";
pub const MODEL_VERSION: u8 = 1;

pub fn model_to_bytes(model: &RerankerModel) -> Vec<u8> {
    let space = model.space();
    let p = model.params();
    let mut out = Vec::with_capacity(64 + p.len() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(p.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(space.vocabulary().len() as u32).to_le_bytes());
    out.extend_from_slice(&(space.oov_buckets() as u32).to_le_bytes());
    out.extend_from_slice(&space.salt().to_le_bytes());
    out.extend_from_slice(&model.dropout_rate().to_le_bytes());
    for t in space.vocabulary().tokens() {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        out.extend_from_slice(t.as_bytes());
    }
    for block in p.blocks() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a model and returns it with the number of bytes consumed.
pub(crate) fn model_from_prefix(buf: &[u8]) -> Result<(RerankerModel, usize)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u8()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hidden = r.u32()? as usize;
    let vocab_len = r.u32()? as usize;
    let oov = r.u32()? as usize;
    if oov == 0 {
        return Err(Error::Format("zero OOV buckets".into()));
    }
    let salt = r.u64()?;
    let dropout = r.f64()?;
    let mut vocab = Vocabulary::default();
    for _ in 0..vocab_len {
        let n = r.u32()? as usize;
        let s = std::str::from_utf8(r.take(n)?)
            .map_err(|e| Error::Format(format!("vocabulary entry: {e}")))?;
        vocab.insert(s);
    }
    if vocab.len() != vocab_len {
        return Err(Error::Format("duplicate vocabulary entry".into()));
    }
    let space = Arc::new(FeatureSpace::new(vocab, oov, salt));
    let features = space.dim();
    let params = Params {
        hidden,
        features,
        w1: r.f64s(features * hidden)?,
        b1: r.f64s(hidden)?,
        w2: r.f64s(NUM_CLASSES * hidden)?,
        b2: r.f64s(NUM_CLASSES)?,
    };
    let model = RerankerModel::new(space, params, dropout)?;
    Ok((model, r.pos))
}

pub fn model_from_bytes(buf: &[u8]) -> Result<RerankerModel> {
    let (model, used) = model_from_prefix(buf)?;
    if used != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            buf.len() - used
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reranker::model::ModelConfig;

    #[test]
    fn roundtrip_and_corruption() {
        let space = Arc::new(FeatureSpace::new(
            Vocabulary::from_tokens(["a", "βeta"]),
            8,
            42,
        ));
        let m = RerankerModel::init(space, &ModelConfig { hidden_dim: 4, ..Default::default() }, 1)
            .unwrap();
        let bytes = model_to_bytes(&m);
        assert_eq!(model_from_bytes(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(model_from_bytes(&bad), Err(Error::Format(_))));
        assert!(model_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
