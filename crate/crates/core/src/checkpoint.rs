//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DGARCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header describing the
//! tensors, then every tensor's `f64` values in little-endian order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::diffusion::{DenoiserParams, DiffusionModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::reasoner::ReasonerParams;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"DGARCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors with a kind tag and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let values: usize = self.tensors.iter().map(|(_, m)| m.data().len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut data = &body[header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.rows * t.cols;
            if data.len() < 8 * n {
                return Err(bad(&format!("truncated tensor {}", t.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            tensors.push((t.name, Matrix::from_vec(t.rows, t.cols, values)));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes the file and returns its SHA-256.
    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected a {kind} checkpoint, found {}", self.kind),
            });
        }
        Ok(())
    }

    fn named(self) -> BTreeMap<String, Matrix> {
        self.tensors.into_iter().collect()
    }
}

pub const REASONER_KIND: &str = "reasoner";
pub const DIFFUSION_KIND: &str = "diffusion";

pub fn reasoner_checkpoint(params: &ReasonerParams, vocab: Vocabulary, task: usize) -> Checkpoint {
    Checkpoint {
        kind: REASONER_KIND.into(),
        meta: serde_json::json!({
            "task": task,
            "num_entities": vocab.num_entities,
            "num_relations": vocab.num_relations,
            "dim": params.dim(),
            "layers": params.num_layers(),
        }),
        tensors: params.tensors().into_iter().map(|(n, m)| (n, m.clone())).collect(),
    }
}

pub fn save_reasoner(path: &Path, params: &ReasonerParams, vocab: Vocabulary, task: usize) -> Result<String> {
    reasoner_checkpoint(params, vocab, task).write(path)
}

pub fn load_reasoner(path: &Path, vocab: Vocabulary) -> Result<ReasonerParams> {
    let ckpt = Checkpoint::read(path)?;
    ckpt.expect_kind(REASONER_KIND, path)?;
    ReasonerParams::from_named(vocab, ckpt.named()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn diffusion_checkpoint(model: &DiffusionModel, task: usize) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: DIFFUSION_KIND.into(),
        meta: serde_json::json!({
            "task": task,
            "betas": model.schedule.betas(),
        }),
        tensors: model
            .denoiser
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect(),
    })
}

pub fn save_diffusion(path: &Path, model: &DiffusionModel, task: usize) -> Result<String> {
    diffusion_checkpoint(model, task)?.write(path)
}

pub fn load_diffusion(path: &Path) -> Result<DiffusionModel> {
    let ckpt = Checkpoint::read(path)?;
    ckpt.expect_kind(DIFFUSION_KIND, path)?;
    let wrap = |e: Error| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let betas: Vec<f64> = serde_json::from_value(ckpt.meta["betas"].clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("bad schedule: {e}"),
    })?;
    let schedule = NoiseSchedule::from_betas(betas).map_err(wrap)?;
    let denoiser = DenoiserParams::from_named(ckpt.named()).map_err(wrap)?;
    let model = DiffusionModel { schedule, denoiser };
    model.validate().map_err(wrap)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(b"hello", p).is_err());
        let c = Checkpoint {
            kind: "k".into(),
            meta: serde_json::Value::Null,
            tensors: vec![("a".into(), Matrix::identity(2))],
        };
        let mut bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes, p).unwrap(), c);
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes, p).is_err());
    }
}
