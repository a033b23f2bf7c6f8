#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use wfworld::action_codec::CameraBinning;
use wfworld::decoding::FrameLayout;
use wfworld::gridcraft::{rollout, PolicyConfig};
use wfworld::model::{Checkpoint, CheckpointMeta, MaskRegime, Model, ModelConfig};
use wfworld::sequence::Vocabulary;
use wfworld::visual_codec::{distinct_patches, pad_codebook, train_codebook, Codebook};

/// Codebook fitted to a few GridCraft clips, padded to `k` entries.
pub fn small_codebook(k: usize) -> Codebook {
    let cam = CameraBinning::default();
    let frames: Vec<_> = (0..8)
        .flat_map(|s| rollout(s, 16, &PolicyConfig::default(), &cam).unwrap().frames)
        .collect();
    let fit = distinct_patches(&frames).unwrap().min(k);
    pad_codebook(&train_codebook(&frames, fit, 10, 0).unwrap().0, k, 0).unwrap()
}

/// Random-init tiny model over 8×12 grids.
pub fn tiny_checkpoint(codebook: &Codebook, max_positions: usize, regime: MaskRegime) -> Checkpoint {
    let vocab = Vocabulary::new(codebook, CameraBinning::default()).unwrap();
    let cfg = ModelConfig::tiny(vocab.total_size() as usize, max_positions);
    Checkpoint {
        model: Model::init(cfg, 17).unwrap(),
        meta: CheckpointMeta::new(cfg, &vocab, FrameLayout::new(8, 12).unwrap(), regime, 0),
    }
}

pub fn write_fixture(dir: &Path, max_positions: usize) -> (PathBuf, PathBuf, Arc<Checkpoint>, Codebook) {
    let cb = small_codebook(64);
    let ck = tiny_checkpoint(&cb, max_positions, MaskRegime::Causal);
    let (ckp, cbp) = (dir.join("model.wfck"), dir.join("codebook.bin"));
    ck.save(&ckp).unwrap();
    cb.save(&cbp).unwrap();
    (ckp, cbp, Arc::new(ck), cb)
}
