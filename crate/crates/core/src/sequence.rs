//! Interleaved clip sequences and the dataset shard format.
//!
//! A clip of `n` (frame, action) pairs becomes `n · (c + 11)` tokens: each
//! frame's `c = h·w` image ids in raster order followed by its action block.
//!
//! Shard layout (little-endian):
//!
//! ```text
//! 0   magic "WFSH"
//! 4   u32 version (1)
//! 8   u64 vocabulary fingerprint
//! 16  u32 clip count
//! 20  u32 tokens per clip
//! 24  u16 grid height, u16 grid width
//! 28  clip count × u64 seed
//! ..  clip count × tokens per clip × u16 token id
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::action_codec::{ActionCodec, ActionTokenBlock, CameraBinning, TokenId, ACTION_BLOCK_LEN};
use crate::error::{Error, Result};
use crate::gridcraft::Clip;
use crate::visual_codec::{Codebook, TokenGrid};

const SHARD_MAGIC: &[u8; 4] = b"WFSH";
const SHARD_VERSION: u32 = 1;
const SHARD_HEADER: usize = 28;

/// Unified token space: image ids `[0, K)`, action ids `[K, K + 41)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub image_vocab_size: u32,
    pub codebook_digest: [u8; 32],
    pub actions: ActionCodec,
}

impl Vocabulary {
    pub fn new(codebook: &Codebook, camera: CameraBinning) -> Result<Self> {
        Self::from_parts(codebook.len() as u32, codebook.digest(), camera)
    }

    pub fn from_parts(image_vocab_size: u32, codebook_digest: [u8; 32], camera: CameraBinning) -> Result<Self> {
        let actions = ActionCodec::new(image_vocab_size, camera)?;
        let v = Self {
            image_vocab_size,
            codebook_digest,
            actions,
        };
        if v.total_size() > u16::MAX as u32 + 1 {
            return Err(Error::config(format!("vocabulary of {} ids does not fit 16-bit storage", v.total_size())));
        }
        Ok(v)
    }

    pub fn total_size(&self) -> u32 {
        self.image_vocab_size + self.actions.layout.total()
    }

    pub fn is_image(&self, id: TokenId) -> bool {
        id < self.image_vocab_size
    }

    pub fn is_action(&self, id: TokenId) -> bool {
        id >= self.image_vocab_size && id < self.total_size()
    }

    /// 64-bit digest of (K, codebook contents, action layout, camera binning).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"wfworld-vocab-v1");
        h.update(self.image_vocab_size.to_le_bytes());
        h.update(self.codebook_digest);
        h.update(self.actions.layout.canonical_bytes());
        let cam = &self.actions.camera;
        h.update(cam.bin_count.to_le_bytes());
        h.update(cam.dmax.to_le_bytes());
        h.update(cam.mu.to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Token ids of one clip, flattened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipTokens {
    pub ids: Vec<TokenId>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ClipTokens {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn pair_len(&self) -> usize {
        self.tokens_per_frame() + ACTION_BLOCK_LEN
    }

    pub fn pair_count(&self) -> usize {
        self.ids.len() / self.pair_len()
    }
}

pub fn pair_len(grid_h: usize, grid_w: usize) -> usize {
    grid_h * grid_w + ACTION_BLOCK_LEN
}

pub fn interleave(grids: &[TokenGrid], actions: &[ActionTokenBlock], vocab: &Vocabulary) -> Result<ClipTokens> {
    if grids.len() != actions.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} action blocks",
            grids.len(),
            actions.len()
        )));
    }
    let Some(first) = grids.first() else {
        return Err(Error::invalid("a clip needs at least one pair"));
    };
    let (h, w) = (first.h, first.w);
    let mut ids = Vec::with_capacity(grids.len() * pair_len(h, w));
    for (i, (g, a)) in grids.iter().zip(actions).enumerate() {
        if (g.h, g.w) != (h, w) {
            return Err(Error::invalid(format!("frame {i} is {}x{}, expected {h}x{w}", g.h, g.w)));
        }
        if let Some(pos) = g.ids.iter().position(|&id| !vocab.is_image(id)) {
            return Err(Error::InvalidToken {
                row: pos / w,
                col: pos % w,
                id: g.ids[pos],
                limit: vocab.image_vocab_size as usize,
            });
        }
        a.validate(&vocab.actions.layout)?;
        ids.extend_from_slice(&g.ids);
        ids.extend_from_slice(&a.ids);
    }
    Ok(ClipTokens {
        ids,
        grid_h: h,
        grid_w: w,
    })
}

pub fn split(clip: &ClipTokens, vocab: &Vocabulary) -> Result<Vec<(TokenGrid, ActionTokenBlock)>> {
    let c = clip.tokens_per_frame();
    let plen = clip.pair_len();
    if clip.ids.is_empty() || clip.ids.len() % plen != 0 {
        return Err(Error::CorruptClip {
            pair: clip.ids.len() / plen,
            reason: format!("length {} is not a multiple of {plen}", clip.ids.len()),
        });
    }
    let layout = &vocab.actions.layout;
    clip.ids
        .chunks_exact(plen)
        .enumerate()
        .map(|(pair, chunk)| {
            let (image, action) = chunk.split_at(c);
            if let Some(pos) = image.iter().position(|&id| !vocab.is_image(id)) {
                return Err(Error::CorruptClip {
                    pair,
                    reason: format!("token {pos} ({}) is not an image id", image[pos]),
                });
            }
            if action[0] != layout.abos() {
                return Err(Error::CorruptClip {
                    pair,
                    reason: format!("token {c} is {}, expected aBOS {}", action[0], layout.abos()),
                });
            }
            if action[ACTION_BLOCK_LEN - 1] != layout.aeos() {
                return Err(Error::CorruptClip {
                    pair,
                    reason: format!("token {} is not aEOS", plen - 1),
                });
            }
            let block = ActionTokenBlock::from_slice(action)?;
            block.validate(layout).map_err(|e| Error::CorruptClip {
                pair,
                reason: e.to_string(),
            })?;
            Ok((TokenGrid::new(clip.grid_h, clip.grid_w, image.to_vec())?, block))
        })
        .collect()
}

/// Encodes a rendered clip into interleaved tokens.
pub fn tokenize_clip(clip: &Clip, codebook: &Codebook, vocab: &Vocabulary) -> Result<ClipTokens> {
    let grids = clip
        .frames
        .iter()
        .map(|f| codebook.encode_frame(f))
        .collect::<Result<Vec<_>>>()?;
    let blocks = clip
        .actions
        .iter()
        .map(|a| vocab.actions.encode(a))
        .collect::<Result<Vec<_>>>()?;
    interleave(&grids, &blocks, vocab)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard {
    pub fingerprint: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub tokens_per_clip: usize,
    pub seeds: Vec<u64>,
    pub clips: Vec<ClipTokens>,
}

impl DatasetShard {
    pub fn new(vocab: &Vocabulary, clips: Vec<ClipTokens>, seeds: Vec<u64>) -> Result<Self> {
        let Some(first) = clips.first() else {
            return Err(Error::invalid("a shard needs at least one clip"));
        };
        if seeds.len() != clips.len() {
            return Err(Error::invalid("one seed per clip is required"));
        }
        let (h, w, n) = (first.grid_h, first.grid_w, first.ids.len());
        for (i, c) in clips.iter().enumerate() {
            if (c.grid_h, c.grid_w, c.ids.len()) != (h, w, n) {
                return Err(Error::invalid(format!("clip {i} differs in shape from clip 0")));
            }
            if let Some(&bad) = c.ids.iter().find(|&&id| id >= vocab.total_size()) {
                return Err(Error::invalid(format!("clip {i} holds id {bad} outside the vocabulary")));
            }
        }
        Ok(Self {
            fingerprint: vocab.fingerprint(),
            grid_h: h,
            grid_w: w,
            tokens_per_clip: n,
            seeds,
            clips,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(SHARD_HEADER + self.seeds.len() * 8 + self.clips.len() * self.tokens_per_clip * 2);
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.clips.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.tokens_per_clip as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid_h as u16).to_le_bytes());
        out.extend_from_slice(&(self.grid_w as u16).to_le_bytes());
        for s in &self.seeds {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for c in &self.clips {
            for &id in &c.ids {
                out.extend_from_slice(&(id as u16).to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a shard, checking it was built for `vocab`.
    pub fn read(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let shard = Self::read_unchecked(path)?;
        if shard.fingerprint != vocab.fingerprint() {
            return Err(Error::IncompatibleVocabulary {
                expected: vocab.fingerprint(),
                found: shard.fingerprint,
            });
        }
        for (i, c) in shard.clips.iter().enumerate() {
            if let Some(&bad) = c.ids.iter().find(|&&id| id >= vocab.total_size()) {
                return Err(Error::corrupt_file(path, format!("clip {i} holds id {bad} outside the vocabulary")));
            }
        }
        Ok(shard)
    }

    /// Reads a shard without a vocabulary check (for inspection tools).
    pub fn read_unchecked(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < SHARD_HEADER || &bytes[..4] != SHARD_MAGIC {
            return Err(Error::corrupt_file(path, "not a shard file (bad magic or short header)"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().unwrap());
        let version = u32_at(4);
        if version != SHARD_VERSION {
            return Err(Error::corrupt_file(path, format!("unsupported shard version {version}")));
        }
        let fingerprint = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let count = u32_at(16) as usize;
        let per_clip = u32_at(20) as usize;
        let (grid_h, grid_w) = (u16_at(24) as usize, u16_at(26) as usize);
        let plen = pair_len(grid_h, grid_w);
        if grid_h == 0 || grid_w == 0 || per_clip == 0 || per_clip % plen != 0 {
            return Err(Error::corrupt_file(path, "inconsistent shard header"));
        }
        let expected = SHARD_HEADER + count * 8 + count * per_clip * 2;
        if bytes.len() != expected {
            return Err(Error::corrupt_file(
                path,
                format!("expected {expected} bytes for {count} clips, found {}", bytes.len()),
            ));
        }
        let seeds = (0..count)
            .map(|i| u64::from_le_bytes(bytes[SHARD_HEADER + i * 8..SHARD_HEADER + i * 8 + 8].try_into().unwrap()))
            .collect();
        let body = &bytes[SHARD_HEADER + count * 8..];
        let clips = body
            .chunks_exact(per_clip * 2)
            .map(|chunk| ClipTokens {
                ids: chunk
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]) as u32)
                    .collect(),
                grid_h,
                grid_w,
            })
            .collect();
        Ok(Self {
            fingerprint,
            grid_h,
            grid_w,
            tokens_per_clip: per_clip,
            seeds,
            clips,
        })
    }

    /// Human-readable dump: header, then one line per pair.
    pub fn dump(&self, max_clips: usize) -> String {
        let mut s = String::new();
        let plen = pair_len(self.grid_h, self.grid_w);
        let _ = writeln!(s, "fingerprint {:016x}", self.fingerprint);
        let _ = writeln!(s, "clips {}", self.clips.len());
        let _ = writeln!(s, "tokens_per_clip {}", self.tokens_per_clip);
        let _ = writeln!(s, "grid {}x{} (pair length {plen})", self.grid_h, self.grid_w);
        for (i, (c, seed)) in self.clips.iter().zip(&self.seeds).take(max_clips).enumerate() {
            let _ = writeln!(s, "clip {i} seed {seed} tokens {}", c.ids.len());
            for (p, pair) in c.ids.chunks(plen).enumerate() {
                let (img, act) = pair.split_at(plen - ACTION_BLOCK_LEN);
                let _ = writeln!(s, "  pair {p}: image {:?} action {:?}", img, act);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_codec::ActionRecord;
    use proptest::prelude::*;

    fn vocab(seed: u8) -> Vocabulary {
        Vocabulary::from_parts(512, [seed; 32], CameraBinning::default()).unwrap()
    }

    fn random_clip(v: &Vocabulary, pairs: usize, seed: u64) -> ClipTokens {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grids: Vec<TokenGrid> = (0..pairs)
            .map(|_| TokenGrid::new(8, 12, (0..96).map(|_| rng.gen_range(0..512)).collect()).unwrap())
            .collect();
        let blocks: Vec<ActionTokenBlock> = (0..pairs)
            .map(|_| {
                let a = ActionRecord::discrete_space().nth(rng.gen_range(0..432)).unwrap();
                v.actions.encode_with_bins(&a, rng.gen_range(0..11), rng.gen_range(0..11))
            })
            .collect();
        interleave(&grids, &blocks, v).unwrap()
    }

    #[test]
    fn vocabulary_sizes() {
        let v = vocab(0);
        assert_eq!(v.total_size(), 553);
        assert!(v.is_image(511) && !v.is_image(512));
        assert!(v.is_action(512) && v.is_action(552) && !v.is_action(553));
        assert_ne!(v.fingerprint(), vocab(1).fingerprint());
    }

    #[test]
    fn clip_lengths() {
        let v = vocab(0);
        let c = random_clip(&v, 16, 1);
        assert_eq!(c.pair_len(), 107);
        assert_eq!(c.ids.len(), 1712);
        assert_eq!(c.pair_count(), 16);
        assert_eq!(pair_len(14, 24), 347);
        assert_eq!(16 * pair_len(14, 24), 5552);
        let one = random_clip(&v, 1, 2);
        assert_eq!(one.ids.len(), 107);
        assert_eq!(split(&one, &v).unwrap().len(), 1);
    }

    #[test]
    fn misaligned_abos_is_reported_with_pair() {
        let v = vocab(0);
        let mut c = random_clip(&v, 3, 3);
        c.ids[96] = 5;
        assert!(matches!(split(&c, &v), Err(Error::CorruptClip { pair: 0, .. })));
        let mut c = random_clip(&v, 3, 3);
        c.ids[107 * 2 + 106] = v.actions.layout.abos();
        assert!(matches!(split(&c, &v), Err(Error::CorruptClip { pair: 2, .. })));
        let mut c = random_clip(&v, 3, 3);
        c.ids.pop();
        assert!(matches!(split(&c, &v), Err(Error::CorruptClip { .. })));
    }

    #[test]
    fn interleave_length_mismatch() {
        let v = vocab(0);
        let g = TokenGrid::new(8, 12, vec![0; 96]).unwrap();
        assert!(matches!(interleave(&[g], &[], &v), Err(Error::InvalidInput(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn split_inverts_interleave(seed in 0u64..1_000, pairs in 1usize..6) {
            let v = vocab(0);
            let c = random_clip(&v, pairs, seed);
            let parts = split(&c, &v).unwrap();
            let (g, a): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
            prop_assert_eq!(interleave(&g, &a, &v).unwrap(), c);
        }
    }

    #[test]
    fn shard_round_trip_and_errors() {
        let v = vocab(0);
        let clips: Vec<ClipTokens> = (0..100).map(|i| random_clip(&v, 16, i)).collect();
        let seeds: Vec<u64> = (1000..1100).collect();
        let shard = DatasetShard::new(&v, clips.clone(), seeds.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wfsh");
        shard.write(&path).unwrap();
        let back = DatasetShard::read(&path, &v).unwrap();
        assert_eq!(back.clips, clips);
        assert_eq!(back.seeds, seeds);
        assert_eq!(back, shard);

        assert!(matches!(
            DatasetShard::read(&path, &vocab(9)),
            Err(Error::IncompatibleVocabulary { .. })
        ));

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1000]).unwrap();
        assert!(matches!(DatasetShard::read(&path, &v), Err(Error::CorruptFile { .. })));
    }
}
