//! Checkpoint container.
//!
//! ```text
//! 0   magic "WFCK"
//! 4   u32 version (1)
//! 8   u64 metadata length L
//! 16  L bytes of metadata JSON (config, regime, step, vocabulary)
//! ..  u32 tensor count
//! ..  per tensor: u16 name length, name bytes, u8 rank, rank × u32 dims
//! ..  tensor data, f32 little-endian, in table order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MaskRegime, Model, ModelConfig};
use crate::action_codec::{ActionVocabLayout, CameraBinning};
use crate::decoding::FrameLayout;
use crate::error::{Error, Result};
use crate::sequence::Vocabulary;

const MAGIC: &[u8; 4] = b"WFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub regime: MaskRegime,
    pub step: usize,
    /// Hex of the 64-bit vocabulary fingerprint.
    pub fingerprint: String,
    pub image_vocab_size: u32,
    pub codebook_digest: String,
    pub camera: CameraBinning,
    pub action_layout: ActionVocabLayout,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, vocab: &Vocabulary, frame: FrameLayout, regime: MaskRegime, step: usize) -> Self {
        Self {
            model,
            regime,
            step,
            fingerprint: format!("{:016x}", vocab.fingerprint()),
            image_vocab_size: vocab.image_vocab_size,
            codebook_digest: hex::encode(vocab.codebook_digest),
            camera: vocab.actions.camera,
            action_layout: vocab.actions.layout.clone(),
            grid_h: frame.h,
            grid_w: frame.w,
        }
    }

    pub fn fingerprint(&self) -> Result<u64> {
        u64::from_str_radix(&self.fingerprint, 16)
            .map_err(|_| Error::config(format!("bad fingerprint {:?}", self.fingerprint)))
    }

    /// Rebuilds the vocabulary and verifies it against the stored fingerprint.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let bytes = hex::decode(&self.codebook_digest).map_err(|e| Error::config(format!("codebook digest: {e}")))?;
        let digest: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::config("codebook digest must be 32 bytes"))?;
        let vocab = Vocabulary::from_parts(self.image_vocab_size, digest, self.camera)?;
        self.check_vocabulary(&vocab)?;
        Ok(vocab)
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        let stored = self.fingerprint()?;
        if stored != vocab.fingerprint() {
            return Err(Error::IncompatibleVocabulary {
                expected: vocab.fingerprint(),
                found: stored,
            });
        }
        Ok(())
    }

    pub fn frame_layout(&self) -> Result<FrameLayout> {
        FrameLayout::new(self.grid_h, self.grid_w)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.model = *self.model.config();
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(self.model.params().len() * 4 + json.len() + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self.model.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
        }
        for t in tensors {
            for v in &self.model.params()[t.offset..t.offset + t.len()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptFile { reason, .. } => Error::corrupt_file(path, reason),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: &str| Error::corrupt_file("<checkpoint>", reason);
        let mut r = Reader { bytes, at: 0 };
        if r.take(4).ok_or_else(|| corrupt("truncated header"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let len = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let json = r.take(len).ok_or_else(|| corrupt("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| corrupt(&format!("metadata: {e}")))?;
        meta.model.validate()?;
        let template = Model::from_params(meta.model, vec![0.0; meta.model.parameter_count()])?;
        let count = r.u32().ok_or_else(|| corrupt("truncated tensor table"))? as usize;
        if count != template.tensors().len() {
            return Err(corrupt(&format!(
                "{count} tensors stored, config implies {}",
                template.tensors().len()
            )));
        }
        for t in template.tensors() {
            let name_len = r.u16().ok_or_else(|| corrupt("truncated tensor table"))? as usize;
            let name = r.take(name_len).ok_or_else(|| corrupt("truncated tensor table"))?;
            let rank = r.take(1).ok_or_else(|| corrupt("truncated tensor table"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| corrupt("truncated tensor table"))? as usize);
            }
            if name != t.name.as_bytes() || shape != t.shape {
                return Err(corrupt(&format!(
                    "tensor {:?} {:?} does not match expected {} {:?}",
                    String::from_utf8_lossy(name),
                    shape,
                    t.name,
                    t.shape
                )));
            }
        }
        let n = template.params().len();
        let data = r.take(n * 4).ok_or_else(|| corrupt("truncated tensor data"))?;
        if r.at != bytes.len() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        let params = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            model: Model::from_params(meta.model, params)?,
            meta,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        Some(u16::from_le_bytes(self.take(2)?.try_into().ok()?))
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VisibilityMask;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::from_parts(8, [3; 32], CameraBinning::default()).unwrap();
        let cfg = ModelConfig::tiny(vocab.total_size() as usize, 64);
        Checkpoint {
            model: Model::init(cfg, 1).unwrap(),
            meta: CheckpointMeta::new(cfg, &vocab, FrameLayout::new(2, 2).unwrap(), MaskRegime::Causal, 12),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.meta.step, 12);
        assert_eq!(back.meta.model, *ck.model.config());
        let toks = [1u32, 5, 40, 2];
        let pos = [0u32, 1, 2, 3];
        let mask = VisibilityMask::causal(4);
        let a = ck.model.forward(&toks, &pos, &mask).unwrap();
        let b = back.model.forward(&toks, &pos, &mask).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(back.meta.vocabulary().is_ok());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptFile { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptFile { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn vocabulary_mismatch_detected() {
        let ck = sample();
        let other = Vocabulary::from_parts(8, [4; 32], CameraBinning::default()).unwrap();
        assert!(matches!(ck.meta.check_vocabulary(&other), Err(Error::IncompatibleVocabulary { .. })));
    }
}
