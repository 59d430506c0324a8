//! The model checkpoint container.
//!
//! Layout (little-endian): magic `SALM`, format version `u32`, RNG version
//! `u32`, model kind `u32`, length-prefixed JSON config block, tensor
//! directory (count, then name / rank / dims per tensor, packed in order),
//! and the flat `f64` payload.

use std::path::Path;

use crate::binio::{sha256_hex, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::ParamLayout;
use crate::rng::RNG_VERSION;

const MAGIC: &[u8; 4] = b"SALM";
const VERSION: u32 = 1;
const MAX_CONFIG_BYTES: usize = 1 << 16;
const MAX_TENSORS: u64 = 4096;
const MAX_NAME: usize = 256;
const MAX_RANK: u32 = 4;
const MAX_PARAMS: u64 = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Ar,
    Nar,
    Reward,
}

impl ModelKind {
    fn tag(self) -> u32 {
        match self {
            ModelKind::Ar => 1,
            ModelKind::Nar => 2,
            ModelKind::Reward => 3,
        }
    }

    fn from_tag(t: u32) -> Result<Self> {
        match t {
            1 => Ok(ModelKind::Ar),
            2 => Ok(ModelKind::Nar),
            3 => Ok(ModelKind::Reward),
            _ => Err(Error::Format(format!("unknown model kind {t}"))),
        }
    }
}

/// A decoded checkpoint, not yet bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config_json: String,
    /// `(name, shape)` in payload order.
    pub tensors: Vec<(String, Vec<usize>)>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(RNG_VERSION);
        w.u32(self.kind.tag());
        w.str(&self.config_json);
        w.u64(self.tensors.len() as u64);
        for (name, shape) in &self.tensors {
            w.str(name);
            w.u32(shape.len() as u32);
            for &d in shape {
                w.u64(d as u64);
            }
        }
        w.f64s(&self.params);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let rng = r.u32()?;
        if rng != RNG_VERSION {
            return Err(Error::Format(format!("checkpoint written with RNG version {rng}, expected {RNG_VERSION}")));
        }
        let kind = ModelKind::from_tag(r.u32()?)?;
        let config_json = r.str(MAX_CONFIG_BYTES)?;
        let count = r.count(MAX_TENSORS, "tensor directory")?;
        let mut tensors = Vec::with_capacity(count);
        let mut total: u64 = 0;
        for _ in 0..count {
            let name = r.str(MAX_NAME)?;
            let rank = r.u32()?;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                numel = numel.saturating_mul(d);
                shape.push(d as usize);
            }
            total = total.saturating_add(numel);
            if total > MAX_PARAMS {
                return Err(Error::Format("tensor directory exceeds the parameter limit".into()));
            }
            tensors.push((name, shape));
        }
        let params = r.f64s_exact(total as usize, "parameter payload")?;
        r.finish()?;
        Ok(Checkpoint {
            kind,
            config_json,
            tensors,
            params,
        })
    }

    pub fn from_layout(kind: ModelKind, config_json: String, layout: &ParamLayout, params: &[f64]) -> Self {
        Checkpoint {
            kind,
            config_json,
            tensors: layout.entries().iter().map(|e| (e.name.clone(), e.shape.clone())).collect(),
            params: params.to_vec(),
        }
    }

    /// Checks kind, directory and values against the layout a model expects.
    pub fn check(&self, kind: ModelKind, layout: &ParamLayout) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        let expected: Vec<(&str, &[usize])> = layout.entries().iter().map(|e| (e.name.as_str(), e.shape.as_slice())).collect();
        let found: Vec<(&str, &[usize])> = self.tensors.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
        if expected != found {
            return Err(Error::Format("tensor directory does not match the model configuration".into()));
        }
        if let Some(i) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite parameter at index {i}")));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Decodes a config block, mapping JSON errors to format errors.
pub(crate) fn parse_config<T: serde::de::DeserializeOwned>(json: &str) -> Result<T> {
    serde_json::from_str(json).map_err(|e| Error::Format(format!("checkpoint config: {e}")))
}

pub(crate) fn config_json<T: serde::Serialize>(cfg: &T) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn sample() -> Checkpoint {
        let mut layout = ParamLayout::new();
        layout.add("a", &[2, 3], Init::Normal);
        layout.add("b", &[4], Init::Zeros);
        let p = layout.init(1, 0.1);
        Checkpoint::from_layout(ModelKind::Ar, "{\"x\":1}".into(), &layout, &p)
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn kind_and_directory_checked() {
        let c = sample();
        let mut layout = ParamLayout::new();
        layout.add("a", &[2, 3], Init::Normal);
        layout.add("b", &[4], Init::Zeros);
        c.check(ModelKind::Ar, &layout).unwrap();
        assert!(c.check(ModelKind::Nar, &layout).is_err());
        layout.add("c", &[1], Init::Zeros);
        assert!(c.check(ModelKind::Ar, &layout).is_err());
    }
}
