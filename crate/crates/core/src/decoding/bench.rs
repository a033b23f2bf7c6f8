use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use super::{speedup_ratio, DecodeConfig, Decoding, Episode, Mode, Prompt, Sampler};
use crate::action_codec::{ActionTokenBlock, ACTION_BLOCK_LEN};
use crate::error::{Error, Result};
use crate::model::Checkpoint;

/// Generated frames per second needed for real-time play.
pub const REALTIME_FPS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub episodes: usize,
    /// Episodes per decoding run before timing starts.
    pub warmup: usize,
    pub frames_per_episode: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            episodes: 5,
            warmup: 1,
            frames_per_episode: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GridDims {
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeTiming {
    pub decoding: Decoding,
    pub fps_median: f64,
    pub tokens_per_s: f64,
    pub iterations_per_frame: usize,
    pub frame_ms_median: f64,
    pub episode_fps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub grid: GridDims,
    pub decoding: Decoding,
    pub fps_median: f64,
    pub tokens_per_s: f64,
    pub iterations_per_frame: usize,
    pub speedup_vs_ar: f64,
    pub theoretical_ratio: f64,
    /// Exact `h·w/(h+w−1)`.
    pub theoretical_ratio_exact: String,
    /// Counted AR iterations over counted diagonal iterations, reduced.
    pub iteration_ratio: String,
    pub autoregressive: DecodeTiming,
    pub diagonal: DecodeTiming,
    pub realtime_fps_bar: f64,
    pub realtime_pass: bool,
}

impl BenchReport {
    /// One row per timed episode.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("decoding,episode,fps,iterations_per_frame\n");
        for t in [&self.autoregressive, &self.diagonal] {
            for (i, fps) in t.episode_fps.iter().enumerate() {
                let _ = writeln!(s, "{:?},{i},{fps:.4},{}", t.decoding, t.iterations_per_frame);
            }
        }
        s
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

struct EpisodeRun {
    fps: f64,
    tokens_per_s: f64,
    frame_ms: Vec<f64>,
    iterations: usize,
}

fn run_episode(ck: &Arc<Checkpoint>, prompt: &Prompt, actions: &[ActionTokenBlock], frames: usize, decoding: Decoding) -> Result<EpisodeRun> {
    let mut ep = Episode::new(ck.clone(), decoding, Sampler::Greedy)?;
    ep.start(prompt)?;
    let mut frame_ms = Vec::with_capacity(frames);
    let mut iterations = 0;
    for a in actions.iter().take(frames) {
        let step = ep.step(Some(a))?;
        iterations = step.iterations;
        frame_ms.push(step.elapsed_ms);
    }
    let total_s: f64 = frame_ms.iter().sum::<f64>() / 1e3;
    let tokens = frames * (ep.frame_layout().tokens_per_frame() + ACTION_BLOCK_LEN);
    Ok(EpisodeRun {
        fps: frames as f64 / total_s,
        tokens_per_s: tokens as f64 / total_s,
        frame_ms,
        iterations,
    })
}

/// Times greedy world-model decoding in both orders, alternating episodes so
/// drift affects both equally. Medians over timed episodes.
pub fn benchmark(ck: &Arc<Checkpoint>, prompt: &Prompt, actions: &[ActionTokenBlock], cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.episodes == 0 || cfg.frames_per_episode == 0 {
        return Err(Error::config("benchmark needs at least one episode and one frame"));
    }
    if actions.len() < cfg.frames_per_episode {
        return Err(Error::config(format!(
            "{} actions supplied for {} frames per episode",
            actions.len(),
            cfg.frames_per_episode
        )));
    }
    super::check_request(
        prompt,
        Some(actions),
        &DecodeConfig {
            mode: Mode::WorldModel,
            frames_to_generate: cfg.frames_per_episode,
            ..DecodeConfig::default()
        },
    )?;
    let orders = [Decoding::Autoregressive, Decoding::Diagonal];
    for _ in 0..cfg.warmup {
        for d in orders {
            run_episode(ck, prompt, actions, cfg.frames_per_episode, d)?;
        }
    }
    let mut runs: [Vec<EpisodeRun>; 2] = [Vec::new(), Vec::new()];
    for _ in 0..cfg.episodes {
        for (slot, d) in orders.into_iter().enumerate() {
            runs[slot].push(run_episode(ck, prompt, actions, cfg.frames_per_episode, d)?);
        }
    }
    let summarize = |d: Decoding, rs: &[EpisodeRun]| DecodeTiming {
        decoding: d,
        fps_median: median(&mut rs.iter().map(|r| r.fps).collect::<Vec<_>>()),
        tokens_per_s: median(&mut rs.iter().map(|r| r.tokens_per_s).collect::<Vec<_>>()),
        iterations_per_frame: rs[0].iterations,
        frame_ms_median: median(&mut rs.iter().flat_map(|r| r.frame_ms.iter().copied()).collect::<Vec<_>>()),
        episode_fps: rs.iter().map(|r| r.fps).collect(),
    };
    let ar = summarize(Decoding::Autoregressive, &runs[0]);
    let diag = summarize(Decoding::Diagonal, &runs[1]);
    let meta = &ck.meta;
    let ratio = speedup_ratio(meta.grid_h, meta.grid_w)?;
    let counted = super::Ratio::new(ar.iterations_per_frame as u64, diag.iterations_per_frame as u64);
    let c = ck.model.config();
    Ok(BenchReport {
        model: format!(
            "hidden {} / mlp {} / heads {} / layers {} ({} parameters, {:?} mask)",
            c.hidden_dim,
            c.mlp_dim,
            c.num_heads,
            c.num_layers,
            c.parameter_count(),
            meta.regime
        ),
        grid: GridDims {
            h: meta.grid_h,
            w: meta.grid_w,
        },
        decoding: Decoding::Diagonal,
        fps_median: diag.fps_median,
        tokens_per_s: diag.tokens_per_s,
        iterations_per_frame: diag.iterations_per_frame,
        speedup_vs_ar: diag.fps_median / ar.fps_median,
        theoretical_ratio: ratio.to_f64(),
        theoretical_ratio_exact: ratio.to_string(),
        iteration_ratio: counted.to_string(),
        realtime_fps_bar: REALTIME_FPS,
        realtime_pass: diag.fps_median >= REALTIME_FPS,
        autoregressive: ar,
        diagonal: diag,
    })
}
