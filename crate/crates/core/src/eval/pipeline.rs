//! End-to-end controllability and video-quality evaluation.

use std::sync::Arc;

use serde::Serialize;

use super::{classify, ControllabilityReport, InverseDynamics, SubtaskSpec, TransitionLabel};
use crate::action_codec::ActionRecord;
use crate::decoding::{self, DecodeConfig, Decoding, Mode, Prompt};
use crate::error::{Error, Result};
use crate::gridcraft::Clip;
use crate::model::Checkpoint;
use crate::visual_codec::{psnr, ssim, Codebook, Frame};

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decoding: Decoding,
    pub sampler: decoding::Sampler,
    /// Frames generated per clip after the one-frame prompt.
    pub horizon: usize,
    /// Leading horizon steps averaged into `psnr_first`.
    pub psnr_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::Autoregressive,
            sampler: decoding::Sampler::Greedy,
            horizon: 15,
            psnr_frames: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClipEvaluation {
    pub seed: u64,
    pub labels: Vec<(ActionRecord, ActionRecord)>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// Transitions whose generated frames the IDM could not read; scored
    /// as a no-op prediction.
    pub unreadable: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluationReport {
    pub source: String,
    pub clips: usize,
    pub controllability: ControllabilityReport,
    /// Mean over clips, per horizon step.
    pub psnr_by_step: Vec<f64>,
    pub ssim_by_step: Vec<f64>,
    pub psnr_first: f64,
    pub psnr_first_frames: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub unreadable_transitions: usize,
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        let mut s = format!("source: {}  clips: {}\n", self.source, self.clips);
        s.push_str(&self.controllability.table());
        s.push_str(&format!(
            "PSNR first {}: {:.2} dB  mean PSNR: {:.2} dB  mean SSIM: {:.4}  unreadable transitions: {}\n",
            self.psnr_first_frames, self.psnr_first, self.mean_psnr, self.mean_ssim, self.unreadable_transitions
        ));
        s
    }
}

fn label(idm: &dyn InverseDynamics, prev: &Frame, next: &Frame) -> Result<(ActionRecord, bool)> {
    match idm.infer(prev, next) {
        Ok(a) => Ok((a, false)),
        Err(Error::UnparseableFrame(_)) => Ok((ActionRecord::noop(), true)),
        Err(e) => Err(e),
    }
}

fn aggregate(source: String, evals: &[ClipEvaluation], idm: &dyn InverseDynamics, psnr_frames: usize) -> Result<EvaluationReport> {
    if evals.is_empty() {
        return Err(Error::invalid("no clips to evaluate"));
    }
    let labels: Vec<TransitionLabel> = evals
        .iter()
        .flat_map(|e| e.labels.iter().map(|&(truth, predicted)| TransitionLabel { truth, predicted }))
        .collect();
    let controllability = classify(&labels, &SubtaskSpec::default(), idm.camera())?;
    let steps = evals.iter().map(|e| e.psnr.len()).max().unwrap_or(0);
    let by_step = |f: fn(&ClipEvaluation) -> &Vec<f64>| -> Vec<f64> {
        (0..steps)
            .map(|s| {
                let xs: Vec<f64> = evals.iter().filter_map(|e| f(e).get(s).copied()).collect();
                xs.iter().sum::<f64>() / xs.len() as f64
            })
            .collect()
    };
    let psnr_by_step = by_step(|e| &e.psnr);
    let ssim_by_step = by_step(|e| &e.ssim);
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let first = psnr_frames.min(steps);
    Ok(EvaluationReport {
        source,
        clips: evals.len(),
        controllability,
        psnr_first: mean(&psnr_by_step[..first]),
        psnr_first_frames: first,
        mean_psnr: mean(&psnr_by_step),
        mean_ssim: mean(&ssim_by_step),
        psnr_by_step,
        ssim_by_step,
        unreadable_transitions: evals.iter().map(|e| e.unreadable).sum(),
    })
}

/// Scores the clips' own frames: generation bypassed.
pub fn evaluate_ground_truth(clips: &[Clip], idm: &dyn InverseDynamics) -> Result<EvaluationReport> {
    let mut evals = Vec::with_capacity(clips.len());
    for clip in clips {
        let mut e = ClipEvaluation {
            seed: clip.seed,
            labels: Vec::new(),
            psnr: Vec::new(),
            ssim: Vec::new(),
            unreadable: 0,
        };
        for i in 0..clip.len().saturating_sub(1) {
            let (pred, unreadable) = label(idm, &clip.frames[i], &clip.frames[i + 1])?;
            e.unreadable += unreadable as usize;
            e.labels.push((clip.actions[i], pred));
            e.psnr.push(psnr(&clip.frames[i + 1], &clip.frames[i + 1])?);
            e.ssim.push(ssim(&clip.frames[i + 1], &clip.frames[i + 1])?);
        }
        evals.push(e);
    }
    aggregate("ground truth".into(), &evals, idm, 4)
}

/// Conditions on each clip's first frame, force-feeds its actions, generates
/// `horizon` frames and scores what the IDM reads off them.
pub fn controllability_pipeline(
    checkpoint: &Arc<Checkpoint>,
    codebook: &Codebook,
    clips: &[Clip],
    cfg: &EvalConfig,
    idm: &dyn InverseDynamics,
) -> Result<EvaluationReport> {
    let vocab = checkpoint.meta.vocabulary()?;
    if vocab.codebook_digest != codebook.digest() {
        return Err(Error::config("codebook does not match the checkpoint's vocabulary"));
    }
    let decode = DecodeConfig {
        mode: Mode::WorldModel,
        sampler: cfg.sampler,
        decoding: cfg.decoding,
        frames_to_generate: cfg.horizon,
    };
    let mut evals = Vec::with_capacity(clips.len());
    for clip in clips {
        let run = || -> Result<ClipEvaluation> {
            if clip.len() < cfg.horizon + 1 {
                return Err(Error::invalid(format!(
                    "clip has {} frames, horizon {} needs {}",
                    clip.len(),
                    cfg.horizon,
                    cfg.horizon + 1
                )));
            }
            let prompt_grid = codebook.encode_frame(&clip.frames[0])?;
            let actions = clip.actions[..cfg.horizon]
                .iter()
                .map(|a| vocab.actions.encode(a))
                .collect::<Result<Vec<_>>>()?;
            let prompt = Prompt::single(prompt_grid.clone());
            let out = match cfg.decoding {
                Decoding::Autoregressive => decoding::decode_ar(checkpoint, &prompt, Some(&actions), &decode)?,
                Decoding::Diagonal => decoding::decode_diagonal(checkpoint, &prompt, Some(&actions), &decode)?,
            };
            let mut frames = vec![codebook.decode_tokens(&prompt_grid)?];
            frames.extend(out.decode_frames(codebook)?);
            let mut e = ClipEvaluation {
                seed: clip.seed,
                labels: Vec::new(),
                psnr: Vec::new(),
                ssim: Vec::new(),
                unreadable: 0,
            };
            for i in 0..cfg.horizon {
                let (pred, unreadable) = label(idm, &frames[i], &frames[i + 1])?;
                e.unreadable += unreadable as usize;
                e.labels.push((clip.actions[i], pred));
                e.psnr.push(psnr(&clip.frames[i + 1], &frames[i + 1])?);
                e.ssim.push(ssim(&clip.frames[i + 1], &frames[i + 1])?);
            }
            Ok(e)
        };
        evals.push(run().map_err(|e| Error::InClip {
            seed: clip.seed,
            source: Box::new(e),
        })?);
    }
    let source = format!("{:?} decoding, {:?} checkpoint", cfg.decoding, checkpoint.meta.regime);
    aggregate(source, &evals, idm, cfg.psnr_frames)
}
