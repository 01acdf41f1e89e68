//! Model files.
//!
//! Layout: the magic bytes `CDNT`, a little-endian `u32` format version, a
//! little-endian `u32` header length, a UTF-8 header of `key=value` lines,
//! every tensor as row-major little-endian `f64`, and finally the SHA-256
//! digest of the tensor bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::{Architecture, CardNetModel, Mode};
use crate::nn::Params;

pub const MAGIC: &[u8; 4] = b"CDNT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const META_PREFIX: &str = "meta.";

/// A model plus free-form metadata (training fingerprint, splits, ...).
#[derive(Clone, Debug)]
pub struct ModelFile {
    pub model: CardNetModel,
    pub meta: BTreeMap<String, String>,
}

impl ModelFile {
    pub fn new(model: CardNetModel) -> Self {
        ModelFile {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let mut header = vec![("mode".to_string(), model.mode().to_string())];
        header.extend(model.features.to_kv());
        header.extend(model.arch.to_kv());
        let lengths: Vec<String> = model.tensors().iter().map(|t| t.len().to_string()).collect();
        header.push(("tensor_lengths".into(), lengths.join(",")));
        for (k, v) in &self.meta {
            header.push((format!("{META_PREFIX}{k}"), v.clone()));
        }
        let mut text = String::new();
        for (k, v) in &header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Container(format!("header entry '{k}' cannot be stored")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }

        let mut tensors = Vec::with_capacity(8 * model.param_count());
        for t in model.tensors() {
            for v in t {
                tensors.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(12 + text.len() + tensors.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let len = u32::try_from(text.len()).map_err(|_| Error::Container("header too large".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&tensors);
        out.extend_from_slice(&Sha256::digest(&tensors));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Container("not a model file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Container(format!("unsupported format version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(Error::Checksum);
        }
        let text = std::str::from_utf8(&body[..hlen]).map_err(|_| Error::Container("header is not UTF-8".into()))?;
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Container(format!("malformed header line '{line}'")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let rest = &body[hlen..];
        if rest.len() < DIGEST_LEN {
            return Err(Error::Checksum);
        }
        let (tensors, digest) = rest.split_at(rest.len() - DIGEST_LEN);
        if Sha256::digest(tensors).as_slice() != digest {
            return Err(Error::Checksum);
        }

        let mode: Mode = kv
            .get("mode")
            .ok_or_else(|| Error::Container("missing mode".into()))?
            .parse()?;
        let features = FeatureConfig::from_kv(&kv)?;
        let arch = Architecture::from_kv(&kv)?;
        let mut model = CardNetModel::new(features, arch, mode, 0)?;
        let lengths: Vec<usize> = kv
            .get("tensor_lengths")
            .ok_or_else(|| Error::Container("missing tensor_lengths".into()))?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Container("bad tensor length".into())))
            .collect::<Result<_>>()?;
        let mut targets = model.tensors_mut();
        if targets.len() != lengths.len() || targets.iter().zip(&lengths).any(|(t, l)| t.len() != *l) {
            return Err(Error::Container("tensor layout does not match the architecture".into()));
        }
        let total: usize = lengths.iter().sum();
        if tensors.len() != 8 * total {
            return Err(Error::Container("tensor section has the wrong size".into()));
        }
        let mut chunks = tensors.chunks_exact(8);
        for t in targets.iter_mut() {
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
            }
        }
        drop(targets);
        if !model.is_finite() {
            return Err(Error::Container("stored parameters are not finite".into()));
        }
        let meta = kv
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(META_PREFIX).map(|s| (s.to_string(), v)))
            .collect();
        Ok(ModelFile { model, meta })
    }
}

pub fn save_model(path: impl AsRef<Path>, file: &ModelFile) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, file.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelFile::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::Bits;
    use crate::data::Record;
    use crate::CardinalityEstimator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_file(mode: Mode) -> ModelFile {
        let features = FeatureConfig::hamming(12, 6.0, 6).unwrap();
        let mut f = ModelFile::new(CardNetModel::new(features, Architecture::tiny(), mode, 5).unwrap());
        f.meta.insert("train.seed".into(), "5".into());
        f.meta.insert("note".into(), "a=b".into());
        f
    }

    #[test]
    fn roundtrip_preserves_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [Mode::CardNet, Mode::CardNetA] {
            let f = sample_file(mode);
            let back = ModelFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
            assert_eq!(back.meta, f.meta);
            assert_eq!(back.model.mode(), mode);
            for _ in 0..100 {
                let q = Record::Bits(Bits::from_bools((0..12).map(|_| rng.random::<bool>())));
                let t = rng.random_range(0..=6) as f64;
                assert_eq!(
                    f.model.estimate(&q, t).unwrap().to_bits(),
                    back.model.estimate(&q, t).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample_file(Mode::CardNet).to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 100];
        assert!(matches!(ModelFile::from_bytes(truncated), Err(Error::Checksum)));
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 200;
        flipped[mid] ^= 1;
        assert!(matches!(ModelFile::from_bytes(&flipped), Err(Error::Checksum)));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&wrong), Err(Error::Container(_))));
        assert!(ModelFile::from_bytes(&bytes[..6]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cdnt");
        let f = sample_file(Mode::CardNetA);
        save_model(&path, &f).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.model.tensors(), f.model.tensors());
        assert!(load_model(dir.path().join("missing")).is_err());
    }
}
