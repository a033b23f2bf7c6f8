//! Autoregressive and diagonal (wavefront) decoding with a KV cache.
//!
//! An [`Episode`] holds one interleaved sequence. The last image token of
//! the newest frame is kept pending and committed together with the next
//! action block, so every frame costs exactly `h·w` (raster) or `h+w−1`
//! (diagonal) forward passes.

mod bench;
mod schedule;

use std::sync::Arc;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_codec::{ActionTokenBlock, ACTION_BLOCK_LEN};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, MaskRegime, VisibilityMask};
use crate::model::ops::argmax;
use crate::sequence::Vocabulary;
use crate::visual_codec::{Codebook, Frame, TokenGrid};

pub use bench::{benchmark, BenchConfig, BenchReport, DecodeTiming, GridDims, REALTIME_FPS};
pub use schedule::{
    build_schedule, speedup_ratio, wavefront_visibility, FrameLayout, Ratio, RowKind, SequenceLayout, WavefrontSchedule,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Actions are supplied and force-fed.
    WorldModel,
    /// The model samples its own actions.
    Agent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    Greedy,
    TopK { k: usize, temperature: f32, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Autoregressive,
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: Mode,
    pub sampler: Sampler,
    pub decoding: Decoding,
    pub frames_to_generate: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: Mode::WorldModel,
            sampler: Sampler::Greedy,
            decoding: Decoding::Diagonal,
            frames_to_generate: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Sampler::TopK { k, temperature, .. } = self.sampler {
            if k == 0 || !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::config("top-k sampling needs k ≥ 1 and a positive temperature"));
            }
        }
        Ok(())
    }
}

/// Conditioning context: `frames.len()` frames with the action blocks
/// between them (`actions.len() == frames.len() − 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub frames: Vec<TokenGrid>,
    pub actions: Vec<ActionTokenBlock>,
}

impl Prompt {
    pub fn single(frame: TokenGrid) -> Self {
        Self {
            frames: vec![frame],
            actions: Vec::new(),
        }
    }

    /// Prompt frames interleaved with their actions, as the model reads them.
    pub fn stream(&self) -> Vec<u32> {
        let mut s = Vec::new();
        for (i, f) in self.frames.iter().enumerate() {
            s.extend_from_slice(&f.ids);
            if let Some(a) = self.actions.get(i) {
                s.extend_from_slice(&a.ids);
            }
        }
        s
    }
}

/// One generated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStep {
    pub grid: TokenGrid,
    /// The action block that preceded this frame (forced or sampled).
    pub action: ActionTokenBlock,
    /// Forward passes spent on image tokens.
    pub iterations: usize,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub grids: Vec<TokenGrid>,
    pub actions: Vec<ActionTokenBlock>,
    pub iterations: Vec<usize>,
    pub frame_ms: Vec<f64>,
    /// Tokens consumed or emitted past the prompt.
    pub tokens: usize,
}

impl GenerationResult {
    pub fn decode_frames(&self, codebook: &Codebook) -> Result<Vec<Frame>> {
        self.grids.iter().map(|g| codebook.decode_tokens(g)).collect()
    }
}

/// Incremental decoding state for one episode over a shared checkpoint.
pub struct Episode {
    checkpoint: Arc<Checkpoint>,
    vocab: Vocabulary,
    frame: FrameLayout,
    schedule: WavefrontSchedule,
    decoding: Decoding,
    sampler: Sampler,
    rng: ChaCha8Rng,
    cache: crate::model::KvCache,
    /// Generated but not yet committed `(token, position)`.
    pending: Option<(u32, u32)>,
    /// Stream length so far, committed or pending.
    len: usize,
    last_grid: Option<TokenGrid>,
}

impl Episode {
    pub fn new(checkpoint: Arc<Checkpoint>, decoding: Decoding, sampler: Sampler) -> Result<Self> {
        let vocab = checkpoint.meta.vocabulary()?;
        let frame = checkpoint.meta.frame_layout()?;
        if checkpoint.model.config().vocab_size != vocab.total_size() as usize {
            return Err(Error::config("checkpoint vocabulary and model output size disagree"));
        }
        if decoding == Decoding::Diagonal && checkpoint.meta.regime == MaskRegime::Causal {
            tracing::debug!("diagonal decoding on a causal checkpoint; expect lower quality");
        }
        let seed = match sampler {
            Sampler::TopK { seed, .. } => seed,
            Sampler::Greedy => 0,
        };
        let cache = checkpoint.model.new_cache();
        Ok(Self {
            schedule: build_schedule(frame.h, frame.w)?,
            checkpoint,
            vocab,
            frame,
            decoding,
            sampler,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cache,
            pending: None,
            len: 0,
            last_grid: None,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn frame_layout(&self) -> FrameLayout {
        self.frame
    }

    /// Stream length so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn last_grid(&self) -> Option<&TokenGrid> {
        self.last_grid.as_ref()
    }

    /// Frames that still fit in the context window.
    pub fn remaining_frames(&self) -> usize {
        let max = self.checkpoint.model.config().max_positions;
        (max + 1).saturating_sub(self.len) / self.frame.pair_len()
    }

    /// Commits the prompt (all but its final token, which stays pending).
    pub fn start(&mut self, prompt: &Prompt) -> Result<()> {
        if self.len != 0 {
            return Err(Error::invalid("episode already started"));
        }
        if prompt.frames.is_empty() || prompt.actions.len() + 1 != prompt.frames.len() {
            return Err(Error::invalid("prompt needs n ≥ 1 frames and n − 1 action blocks"));
        }
        for g in &prompt.frames {
            if (g.h, g.w) != (self.frame.h, self.frame.w) {
                return Err(Error::invalid(format!(
                    "prompt grid {}x{} differs from the model's {}x{}",
                    g.h, g.w, self.frame.h, self.frame.w
                )));
            }
            if let Some(&id) = g.ids.iter().find(|&&id| !self.vocab.is_image(id)) {
                return Err(Error::invalid(format!("prompt holds non-image id {id}")));
            }
        }
        for a in &prompt.actions {
            a.validate(&self.vocab.actions.layout)?;
        }
        let stream = prompt.stream();
        let max = self.checkpoint.model.config().max_positions;
        if stream.len() > max {
            return Err(Error::ContextExceeded {
                needed: stream.len(),
                max,
            });
        }
        let regime = match self.decoding {
            Decoding::Autoregressive => MaskRegime::Causal,
            Decoding::Diagonal => MaskRegime::Wavefront,
        };
        let n = stream.len() - 1;
        let layout = SequenceLayout::new(self.frame, n, false);
        let positions: Vec<u32> = (0..n as u32).collect();
        self.checkpoint
            .model
            .extend(&mut self.cache, &stream[..n], &positions, &layout.mask(regime), n)?;
        self.pending = Some((stream[n], n as u32));
        self.len = stream.len();
        self.last_grid = prompt.frames.last().cloned();
        Ok(())
    }

    /// Generates the next frame. `action` is the forced block in world-model
    /// mode; `None` lets the model sample it (agent mode).
    pub fn step(&mut self, action: Option<&ActionTokenBlock>) -> Result<FrameStep> {
        let (pending_tok, pending_pos) = self.pending.ok_or_else(|| Error::invalid("episode not started"))?;
        let max = self.checkpoint.model.config().max_positions;
        let needed = self.len + self.frame.pair_len();
        // The final image token stays pending, so it needs no slot yet.
        if needed - 1 > max {
            return Err(Error::ContextExceeded { needed, max });
        }
        if let Some(a) = action {
            a.validate(&self.vocab.actions.layout)?;
        }
        let started = Instant::now();
        let base = self.len;
        let c = self.frame.tokens_per_frame();
        let checkpoint = self.checkpoint.clone();
        let model = &checkpoint.model;

        // Action block, committed with the pending token; its aEOS row predicts (0,0).
        let (block, first_logits) = match action {
            Some(a) => {
                let mut toks = vec![pending_tok];
                toks.extend_from_slice(&a.ids);
                let pos: Vec<u32> = (0..toks.len() as u32).map(|i| pending_pos + i).collect();
                let logits = model.append(&mut self.cache, &toks, &pos)?;
                let v = model.config().vocab_size;
                (*a, logits[(toks.len() - 1) * v..].to_vec())
            }
            None => self.sample_action(pending_tok, pending_pos)?,
        };
        self.pending = None;
        let image_pos = |k: usize| (base + ACTION_BLOCK_LEN + k) as u32;
        let mut ids = vec![0u32; c];
        ids[0] = self.sample_image(&first_logits);
        let w = self.frame.w;
        let iterations = match self.decoding {
            Decoding::Autoregressive => {
                for k in 1..c {
                    let logits = model.append(&mut self.cache, &[ids[k - 1]], &[image_pos(k - 1)])?;
                    ids[k] = self.sample_image(&logits);
                }
                c
            }
            Decoding::Diagonal => {
                let v = model.config().vocab_size;
                let schedule = self.schedule.wavefronts.clone();
                for k in 1..schedule.len() {
                    let prev = &schedule[k - 1];
                    let mut toks: Vec<u32> = prev.iter().map(|&(i, j)| ids[i * w + j]).collect();
                    let mut pos: Vec<u32> = prev.iter().map(|&(i, j)| image_pos(i * w + j)).collect();
                    let row_start = k < self.frame.h;
                    if row_start {
                        toks.push(ids[(k - 1) * w]);
                        pos.push(image_pos((k - 1) * w + w - 1));
                    }
                    let m = toks.len();
                    let mut intra = VisibilityMask::empty(m);
                    for r in 0..m {
                        intra.set(r, r, true);
                    }
                    if row_start {
                        for r in 0..prev.len() {
                            intra.set(m - 1, r, true);
                        }
                    }
                    let logits = model.extend(&mut self.cache, &toks, &pos, &intra, prev.len())?;
                    for &(i, j) in &schedule[k] {
                        let row = if j == 0 {
                            m - 1
                        } else {
                            prev.iter().position(|&p| p == (i, j - 1)).expect("left neighbour is on the previous wavefront")
                        };
                        ids[i * w + j] = self.sample_image(&logits[row * v..(row + 1) * v]);
                    }
                }
                schedule.len()
            }
        };
        self.pending = Some((ids[c - 1], image_pos(c - 1)));
        self.len = base + self.frame.pair_len();
        let grid = TokenGrid::new(self.frame.h, self.frame.w, ids)?;
        self.last_grid = Some(grid.clone());
        Ok(FrameStep {
            grid,
            action: block,
            iterations,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Samples slots 1–9 one pass at a time under their id ranges; aBOS and
    /// aEOS are forced. Returns the block and the aEOS logits.
    fn sample_action(&mut self, pending_tok: u32, pending_pos: u32) -> Result<(ActionTokenBlock, Vec<f32>)> {
        let checkpoint = self.checkpoint.clone();
        let model = &checkpoint.model;
        let layout = self.vocab.actions.layout.clone();
        let mut ids = [0u32; ACTION_BLOCK_LEN];
        ids[0] = layout.abos();
        ids[ACTION_BLOCK_LEN - 1] = layout.aeos();
        let mut logits = model.append(&mut self.cache, &[pending_tok, ids[0]], &[pending_pos, pending_pos + 1])?;
        let v = model.config().vocab_size;
        for s in 1..ACTION_BLOCK_LEN {
            if s < ACTION_BLOCK_LEN - 1 {
                let r = layout.range(s);
                let row = &logits[logits.len() - v..];
                ids[s] = r.first + self.sample_in(&row[r.first as usize..r.end() as usize]) as u32;
            }
            logits = model.append(&mut self.cache, &[ids[s]], &[pending_pos + 1 + s as u32])?;
        }
        Ok((ActionTokenBlock { ids }, logits))
    }

    fn sample_image(&mut self, logits: &[f32]) -> u32 {
        let k = self.vocab.image_vocab_size as usize;
        self.sample_in(&logits[..k]) as u32
    }

    fn sample_in(&mut self, logits: &[f32]) -> usize {
        match self.sampler {
            Sampler::Greedy => argmax(logits),
            Sampler::TopK { k, temperature, .. } => {
                let mut idx: Vec<usize> = (0..logits.len()).collect();
                // Stable sort keeps lower ids first among equal logits.
                idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
                idx.truncate(k.min(logits.len()));
                let top = logits[idx[0]];
                let weights: Vec<f64> = idx.iter().map(|&i| (((logits[i] - top) / temperature) as f64).exp()).collect();
                let dist = WeightedIndex::new(&weights).expect("top weight is 1");
                idx[dist.sample(&mut self.rng)]
            }
        }
    }
}

fn check_request(prompt: &Prompt, actions: Option<&[ActionTokenBlock]>, cfg: &DecodeConfig) -> Result<()> {
    cfg.validate()?;
    match (cfg.mode, actions) {
        (Mode::WorldModel, None) => Err(Error::config("world-model decoding needs an action sequence")),
        (Mode::WorldModel, Some(a)) if a.len() < cfg.frames_to_generate => Err(Error::config(format!(
            "{} actions supplied for {} frames",
            a.len(),
            cfg.frames_to_generate
        ))),
        (Mode::Agent, Some(_)) => Err(Error::config("agent decoding chooses its own actions")),
        _ if prompt.frames.is_empty() => Err(Error::invalid("prompt needs at least one frame")),
        _ => Ok(()),
    }
}

fn generate(
    checkpoint: &Arc<Checkpoint>,
    prompt: &Prompt,
    actions: Option<&[ActionTokenBlock]>,
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    check_request(prompt, actions, cfg)?;
    let mut ep = Episode::new(checkpoint.clone(), cfg.decoding, cfg.sampler)?;
    ep.start(prompt)?;
    let mut out = GenerationResult {
        grids: Vec::new(),
        actions: Vec::new(),
        iterations: Vec::new(),
        frame_ms: Vec::new(),
        tokens: 0,
    };
    for f in 0..cfg.frames_to_generate {
        let step = ep.step(actions.map(|a| &a[f]))?;
        out.tokens += ACTION_BLOCK_LEN + step.grid.len();
        out.grids.push(step.grid);
        out.actions.push(step.action);
        out.iterations.push(step.iterations);
        out.frame_ms.push(step.elapsed_ms);
    }
    Ok(out)
}

/// Raster-order generation: one cached forward pass per image token.
pub fn decode_ar(
    checkpoint: &Arc<Checkpoint>,
    prompt: &Prompt,
    actions: Option<&[ActionTokenBlock]>,
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    generate(checkpoint, prompt, actions, &DecodeConfig { decoding: Decoding::Autoregressive, ..*cfg })
}

/// Wavefront generation: one cached pass per anti-diagonal.
pub fn decode_diagonal(
    checkpoint: &Arc<Checkpoint>,
    prompt: &Prompt,
    actions: Option<&[ActionTokenBlock]>,
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    generate(checkpoint, prompt, actions, &DecodeConfig { decoding: Decoding::Diagonal, ..*cfg })
}

/// Greedy raster decoding that recomputes the whole causal sequence for
/// every token. Reference path for cache soundness; world-model mode only.
pub fn decode_ar_uncached(checkpoint: &Checkpoint, prompt: &Prompt, actions: &[ActionTokenBlock], frames: usize) -> Result<Vec<TokenGrid>> {
    if actions.len() < frames {
        return Err(Error::config(format!("{} actions supplied for {frames} frames", actions.len())));
    }
    let vocab = checkpoint.meta.vocabulary()?;
    let fl = checkpoint.meta.frame_layout()?;
    let k = vocab.image_vocab_size as usize;
    let v = checkpoint.model.config().vocab_size;
    let mut stream = prompt.stream();
    let mut grids = Vec::new();
    for a in actions.iter().take(frames) {
        stream.extend_from_slice(&a.ids);
        let mut ids = Vec::with_capacity(fl.tokens_per_frame());
        for _ in 0..fl.tokens_per_frame() {
            let n = stream.len();
            let pos: Vec<u32> = (0..n as u32).collect();
            let logits = checkpoint.model.forward(&stream, &pos, &VisibilityMask::causal(n))?;
            let id = argmax(&logits[(n - 1) * v..(n - 1) * v + k]) as u32;
            ids.push(id);
            stream.push(id);
        }
        grids.push(TokenGrid::new(fl.h, fl.w, ids)?);
    }
    Ok(grids)
}
