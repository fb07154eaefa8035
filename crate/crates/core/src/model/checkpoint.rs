//! Self-describing binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "DAAF1"
//! field count, ModelConfig fields...
//! blob count
//! per blob: name length, name bytes (UTF-8), rank, extents..., f32 values
//! ```
//!
//! Blobs other than model parameters (optimizer moments, step counters) may
//! follow under names outside the model's parameter prefixes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{is_hab_param, is_inference_param, is_pab_param, ModelBundle, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"DAAF1";

/// A decoded container: the config and every named blob in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub blobs: Vec<(String, Tensor<f32>)>,
}

pub fn is_model_param(name: &str) -> bool {
    is_inference_param(name) || is_hab_param(name) || is_pab_param(name)
}

impl Checkpoint {
    pub fn from_bundle<T: Real>(bundle: &ModelBundle<T>) -> Self {
        Self {
            config: bundle.config.clone(),
            blobs: bundle
                .params
                .iter()
                .map(|(n, t)| (String::from(n), t.cast::<f32>()))
                .collect(),
        }
    }

    pub fn push(&mut self, name: &str, value: Tensor<f32>) {
        self.blobs.push((String::from(name), value));
    }

    pub fn blob(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// The model parameters as a bundle; fails unless they match the config exactly.
    pub fn bundle<T: Real>(&self) -> Result<ModelBundle<T>> {
        let mut store = ParamStore::new();
        for (n, t) in self.blobs.iter().filter(|(n, _)| is_model_param(n)) {
            store.insert(n, t.cast());
        }
        ModelBundle::from_params(self.config.clone(), store)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let words = self.config.to_words();
        put(&mut out, words.len() as u32);
        for w in words {
            put(&mut out, w);
        }
        put(&mut out, self.blobs.len() as u32);
        for (name, t) in &self.blobs {
            put(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic; not a DAAF1 checkpoint".into()));
        }
        let nwords = r.u32()? as usize;
        if nwords != ModelConfig::WORDS {
            return Err(Error::Format(format!(
                "config block has {nwords} fields, this version reads {}",
                ModelConfig::WORDS
            )));
        }
        let words = (0..nwords).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let config = ModelConfig::from_words(&words)?;
        let nblobs = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(nblobs.min(4096));
        for _ in 0..nblobs {
            let len = r.u32()? as usize;
            let name = core::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("blob name is not UTF-8".into()))?
                .into();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("blob `{name}` has implausible rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("blob `{name}` extent overflows")))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format("blob too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blobs.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last blob",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, blobs })
    }
}

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated checkpoint: wanted {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
