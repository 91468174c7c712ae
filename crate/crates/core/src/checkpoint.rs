//! Versioned binary container for model parameters.
//!
//! Layout (little endian):
//! `magic[8] | version u32 | descriptor_len u32 | descriptor JSON |
//!  param_count u64 | params f64 × count | sha256[32]`,
//! where the digest covers every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{Classifier, ClassifierDescriptor};
use crate::denoiser::{Denoiser, DenoiserDescriptor, MlpEps};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLDIFFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Denoiser(DenoiserDescriptor),
    Classifier(ClassifierDescriptor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: ModelDescriptor,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let desc = serde_json::to_vec(&self.descriptor)?;
        let mut out = Vec::with_capacity(64 + desc.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(&desc);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 8 + 8 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let desc_len = u32::from_le_bytes(r.array()?) as usize;
        let descriptor = serde_json::from_slice(r.take(desc_len)?)?;
        let count = u64::from_le_bytes(r.array()?) as usize;
        if body.len() - r.pos != count * 8 {
            return Err(bad("parameter count does not match payload size"));
        }
        let params = (0..count).map(|_| r.array().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        Ok(Self { descriptor, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Load and require the stored descriptor to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelDescriptor) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.descriptor != expected {
            return Err(Error::Checkpoint(format!(
                "descriptor mismatch: file has {:?}, expected {:?}",
                ck.descriptor, expected
            )));
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn save_denoiser(path: &Path, den: &Denoiser<MlpEps>) -> Result<()> {
    Checkpoint { descriptor: ModelDescriptor::Denoiser(den.descriptor().clone()), params: den.params().to_vec() }
        .save(path)
}

pub fn load_denoiser(path: &Path, expected: &DenoiserDescriptor) -> Result<Denoiser<MlpEps>> {
    let ck = Checkpoint::load_expecting(path, &ModelDescriptor::Denoiser(expected.clone()))?;
    let net = MlpEps::from_params(expected.clone(), ck.params)?;
    Ok(Denoiser::new(net, expected.horizon))
}

pub fn save_classifier(path: &Path, c: &Classifier) -> Result<()> {
    Checkpoint { descriptor: ModelDescriptor::Classifier(c.descriptor().clone()), params: c.params().to_vec() }
        .save(path)
}

pub fn load_classifier(path: &Path, expected: &ClassifierDescriptor) -> Result<Classifier> {
    let ck = Checkpoint::load_expecting(path, &ModelDescriptor::Classifier(expected.clone()))?;
    Classifier::from_params(expected.clone(), ck.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let desc = ClassifierDescriptor { input_dim: 4, hidden: vec![3], num_classes: 2, dropout: 0.0 };
        Checkpoint { descriptor: ModelDescriptor::Classifier(desc), params: vec![0.5, -1.25, f64::MIN_POSITIVE] }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode().unwrap();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::decode(&bytes[..10]).is_err());
    }
}
