//! Binary checkpoint: `HETACKPT`, u32 version, u64 header length, JSON
//! header, then every parameter as little-endian f64 in canonical order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::transformer::{Model, Params};
use super::vocab::Vocab;
use crate::autodiff::Tensor;
use crate::error::{HetaError, Result};

pub const MAGIC: &[u8; 8] = b"HETACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Option<Vocab>,
    vocab_hash: Option<String>,
    num_values: usize,
}

/// A model with the vocabulary it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Option<Vocab>,
}

impl Checkpoint {
    pub fn vocab_hash(&self) -> Option<String> {
        self.vocab.as_ref().map(Vocab::hash)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.model.config.clone(),
            vocab: self.vocab.clone(),
            vocab_hash: self.vocab_hash(),
            num_values: self.model.params.num_values(),
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.model.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(HetaError::Malformed {
                line: 0,
                message: "not a checkpoint file".into(),
            });
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(HetaError::Version {
                found: version.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(truncated());
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        header.config.validate()?;
        if let (Some(v), Some(h)) = (&header.vocab, &header.vocab_hash) {
            if &v.hash() != h {
                return Err(HetaError::VocabMismatch("stored vocabulary does not match its hash".into()));
            }
        }
        let shapes = Params::shapes(&header.config);
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if expected != header.num_values || r.len() != 8 * expected {
            return Err(HetaError::Malformed {
                line: 0,
                message: format!("expected {} parameters, blob holds {} bytes", expected, r.len()),
            });
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut values = r.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        for shape in shapes {
            let n = shape.iter().product();
            tensors.push(Tensor::new(shape, values.by_ref().take(n).collect())?);
        }
        let params = Params::from_tensors(&header.config, tensors)?;
        Ok(Self {
            model: Model {
                config: header.config,
                params,
            },
            vocab: header.vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn truncated() -> HetaError {
    HetaError::Malformed {
        line: 0,
        message: "truncated checkpoint".into(),
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated())
}
