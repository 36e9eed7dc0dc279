//! Binary checkpoint container.
//!
//! ```text
//! magic   8 bytes  "RLABCKPT"
//! version u32 LE
//! hlen    u64 LE   length of the JSON header
//! header  hlen bytes of JSON: config, vocabulary (+ hash), tensor index
//! data    f32 LE tensor payloads, in index order
//! ```
//!
//! Saving writes a sibling temp file and renames it into place.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcore::Vocab;

use super::graph::{Mat, Scalar};
use super::{ModelConfig, RewriterModel};

const MAGIC: &[u8; 8] = b"RLABCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    vocab: Vocab,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    header: Header,
    data: Vec<Mat<f32>>,
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(model: &RewriterModel<F>, vocab: &Vocab) -> Self {
        let params = model.params();
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for id in params.ids() {
            let m = params.get(id);
            tensors.push(TensorEntry {
                name: params.name(id).to_owned(),
                rows: m.nrows(),
                cols: m.ncols(),
            });
            data.push(m.mapv(|x| x.as_f64() as f32));
        }
        Checkpoint {
            header: Header {
                config: model.config().clone(),
                vocab_hash: vocab.hash(),
                vocab: vocab.clone(),
                tensors,
            },
            data,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.header.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.header.vocab
    }

    pub fn vocab_hash(&self) -> &str {
        &self.header.vocab_hash
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in &self.data {
            for &x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let vocab = Vocab::from_json(&serde_json::to_string(&header.vocab).expect("vocab serializes"))?;
        if vocab.hash() != header.vocab_hash {
            return Err(bad("embedded vocabulary does not match its hash"));
        }
        let mut rest = &body[hlen..];
        let mut data = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.rows * t.cols;
            if rest.len() < 4 * n {
                return Err(Error::Checkpoint(format!("truncated tensor {}", t.name)));
            }
            let vals: Vec<f32> = rest[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data.push(Mat::from_shape_vec((t.rows, t.cols), vals).expect("shape matches length"));
            rest = &rest[4 * n..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            header: Header { vocab, ..header },
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model, refusing a vocabulary other than the one it was
    /// trained with.
    pub fn into_model<F: Scalar>(self, vocab: &Vocab) -> Result<RewriterModel<F>> {
        let found = vocab.hash();
        if found != self.header.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.header.vocab_hash,
                found,
            });
        }
        let mut model = RewriterModel::<F>::new(self.header.config.clone(), vocab.len())?;
        if model.params().len() != self.data.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for (entry, m) in self.header.tensors.iter().zip(self.data) {
            let id = model
                .params()
                .find(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
            let dst = model.params_mut().get_mut(id);
            if dst.dim() != m.dim() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", entry.name)));
            }
            *dst = m.mapv(|x| F::of(x as f64));
        }
        Ok(model)
    }
}
