//! Next-token training, parallel-mask fine-tuning and the optimizer.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, cross_entropy, matmul_at_acc, matmul_bt_acc, rms_norm_backward, rope_apply, silu, silu_grad, MatRef};
use super::{Activations, Checkpoint, CheckpointMeta, MaskRegime, Model, ModelConfig, VisibilityMask};
use crate::decoding::{FrameLayout, SequenceLayout};
use crate::error::{Error, Result};
use crate::sequence::{DatasetShard, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Cosine decay floor as a fraction of the peak rate.
    pub min_lr_ratio: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f32>,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop early once a step's batch loss falls below this value.
    pub target_loss: Option<f32>,
    /// Stop after the first step that ends past this many seconds.
    pub time_budget_s: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            warmup_steps: 200,
            total_steps: 2000,
            min_lr_ratio: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: Some(1.0),
            batch_size: 4,
            seed: 0,
            target_loss: None,
            time_budget_s: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) || self.weight_decay < 0.0 {
            return Err(Error::config("min_lr_ratio must lie in [0, 1] and weight_decay be non-negative"));
        }
        Ok(())
    }
}

/// Linear warmup to the peak rate, then cosine decay to `min_lr_ratio · peak`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f32 {
    let peak = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return peak * (step + 1) as f32 / cfg.warmup_steps as f32;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f32;
    let t = ((step - cfg.warmup_steps) as f32 / span).min(1.0);
    let floor = peak * cfg.min_lr_ratio;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f32::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
    pub elapsed_s: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// One training row set: inputs, positions, per-row targets and visibility.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub tokens: Vec<u32>,
    pub positions: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

/// Rows for one clip: every regular position, plus row-start queries under
/// the wavefront regime.
pub fn train_sequence(frame: FrameLayout, stream: &[u32], regime: MaskRegime) -> (SequenceLayout, TrainSequence) {
    let layout = SequenceLayout::new(frame, stream.len(), regime == MaskRegime::Wavefront);
    let seq = TrainSequence {
        tokens: layout.tokens(stream),
        positions: layout.positions(),
        targets: layout.targets(stream),
    };
    (layout, seq)
}

impl Model {
    /// Summed cross-entropy and target count. When `grads` is given,
    /// accumulates `scale · ∂(sum)/∂θ` into it.
    pub fn loss_and_grad(
        &self,
        seq: &TrainSequence,
        mask: &VisibilityMask,
        grads: Option<(&mut [f32], f32)>,
    ) -> Result<(f64, usize)> {
        self.check_inputs(&seq.tokens, &seq.positions)?;
        if mask.len() != seq.tokens.len() || seq.targets.len() != seq.tokens.len() {
            return Err(Error::invalid("mask, targets and tokens disagree in length"));
        }
        let v = self.config.vocab_size;
        let (logits, acts) = self.run(&seq.tokens, &seq.positions, mask, grads.is_some());
        let mut total = 0f64;
        let mut count = 0usize;
        let mut dlogits = grads.as_ref().map(|_| vec![0f32; logits.len()]);
        for (r, target) in seq.targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t as usize >= v {
                return Err(Error::invalid(format!("target {t} outside vocabulary of {v}")));
            }
            let (loss, probs) = cross_entropy(&logits[r * v..(r + 1) * v], t as usize);
            total += loss as f64;
            count += 1;
            if let Some(d) = dlogits.as_mut() {
                d[r * v..(r + 1) * v].copy_from_slice(&probs);
                d[r * v + t as usize] -= 1.0;
            }
        }
        if let (Some((g, scale)), Some(mut d), Some(acts)) = (grads, dlogits, acts) {
            d.iter_mut().for_each(|x| *x *= scale);
            self.backward(&seq.tokens, &seq.positions, mask, &acts, &d, g);
        }
        Ok((total, count))
    }

    fn backward(
        &self,
        tokens: &[u32],
        positions: &[u32],
        mask: &VisibilityMask,
        acts: &Activations,
        dlogits: &[f32],
        g: &mut [f32],
    ) {
        let c = &self.config;
        let (t, d, f, v) = (tokens.len(), c.hidden_dim, c.mlp_dim, c.vocab_size);
        let idx = &self.index;

        matmul_at_acc(&acts.h_final, t, d, dlogits, v, &mut g[idx.lm_head..idx.lm_head + d * v]);
        let mut dh = vec![0f32; t * d];
        matmul_bt_acc(dlogits, t, v, self.p(idx.lm_head, d * v), d, &mut dh);
        let mut dx = vec![0f32; t * d];
        rms_norm_backward(
            &acts.x_final,
            self.p(idx.final_norm, d),
            &acts.inv_final,
            &dh,
            &mut dx,
            &mut g[idx.final_norm..idx.final_norm + d],
        );

        for (li, a) in idx.layers.iter().zip(&acts.layers).rev() {
            // MLP block.
            matmul_at_acc(&a.act, t, f, &dx, d, &mut g[li.w_down..li.w_down + f * d]);
            let mut dact = vec![0f32; t * f];
            matmul_bt_acc(&dx, t, d, self.p(li.w_down, f * d), f, &mut dact);
            let mut dgate = vec![0f32; t * f];
            let mut dup = vec![0f32; t * f];
            for i in 0..t * f {
                dgate[i] = dact[i] * a.up[i] * silu_grad(a.gate[i]);
                dup[i] = dact[i] * silu(a.gate[i]);
            }
            matmul_at_acc(&a.h2, t, d, &dgate, f, &mut g[li.w_gate..li.w_gate + d * f]);
            matmul_at_acc(&a.h2, t, d, &dup, f, &mut g[li.w_up..li.w_up + d * f]);
            let mut dh2 = vec![0f32; t * d];
            matmul_bt_acc(&dgate, t, f, self.p(li.w_gate, d * f), d, &mut dh2);
            matmul_bt_acc(&dup, t, f, self.p(li.w_up, d * f), d, &mut dh2);
            let mut dx_mid = dx;
            rms_norm_backward(&a.x_mid, self.p(li.mlp_norm, d), &a.inv2, &dh2, &mut dx_mid, &mut g[li.mlp_norm..li.mlp_norm + d]);

            // Attention block.
            matmul_at_acc(&a.att, t, d, &dx_mid, d, &mut g[li.wo..li.wo + d * d]);
            let mut datt = vec![0f32; t * d];
            matmul_bt_acc(&dx_mid, t, d, self.p(li.wo, d * d), d, &mut datt);
            let (mut dq, mut dk, dv) = self.attention_backward(&a.q, &a.k, &a.v, t, mask, &datt);
            rope_apply(&mut dq, d, c.head_dim(), positions, &self.freqs, -1.0);
            rope_apply(&mut dk, d, c.head_dim(), positions, &self.freqs, -1.0);
            let mut dh1 = vec![0f32; t * d];
            for (w, dy) in [(li.wq, &dq), (li.wk, &dk), (li.wv, &dv)] {
                matmul_at_acc(&a.h1, t, d, dy, d, &mut g[w..w + d * d]);
                matmul_bt_acc(dy, t, d, self.p(w, d * d), d, &mut dh1);
            }
            let mut dx_in = dx_mid;
            rms_norm_backward(&a.x, self.p(li.attn_norm, d), &a.inv1, &dh1, &mut dx_in, &mut g[li.attn_norm..li.attn_norm + d]);
            dx = dx_in;
        }

        for (r, &tok) in tokens.iter().enumerate() {
            let off = idx.tok_emb + tok as usize * d;
            for (gv, &dv) in g[off..off + d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *gv += dv;
            }
        }
    }

    fn attention_backward(
        &self,
        q: &[f32],
        k: &[f32],
        v: &[f32],
        t: usize,
        mask: &VisibilityMask,
        datt: &[f32],
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut dq = vec![0f32; t * d];
        let mut dk = vec![0f32; t * d];
        let mut dv = vec![0f32; t * d];
        let mut probs = vec![0f32; t * t];
        let mut ds = vec![0f32; t * t];
        for h in 0..self.config.num_heads {
            self.attention_probs(q, k, t, h, mask, &mut probs);
            let p = MatRef::new(&probs, t, t);
            let d_out = MatRef::block(datt, t, d, h * dh, dh);
            ops::gemm(1.0, p.t(), d_out, 0.0, &mut dv[h * dh..], d);
            ops::gemm(1.0, d_out, MatRef::block(v, t, d, h * dh, dh).t(), 0.0, &mut ds, t);
            for (prow, drow) in probs.chunks_exact(t).zip(ds.chunks_exact_mut(t)) {
                let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            let s = MatRef::new(&ds, t, t);
            ops::gemm(scale, s, MatRef::block(k, t, d, h * dh, dh), 0.0, &mut dq[h * dh..], d);
            ops::gemm(scale, s.t(), MatRef::block(q, t, d, h * dh, dh), 0.0, &mut dk[h * dh..], d);
        }
        (dq, dk, dv)
    }

    /// Tensors that receive decoupled weight decay: matrices, not gains.
    fn decay_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.params.len()];
        for t in self.tensors() {
            if t.shape.len() > 1 {
                flags[t.offset..t.offset + t.len()].fill(true);
            }
        }
        flags
    }
}

struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    fn new(model: &Model) -> Self {
        let n = model.params().len();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay: model.decay_flags(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            if self.decay[i] {
                params[i] -= lr * cfg.weight_decay * params[i];
            }
            params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

fn check_dataset(shard: &DatasetShard, vocab: &Vocabulary, model: &ModelConfig) -> Result<FrameLayout> {
    if shard.fingerprint != vocab.fingerprint() {
        return Err(Error::IncompatibleVocabulary {
            expected: vocab.fingerprint(),
            found: shard.fingerprint,
        });
    }
    if model.vocab_size != vocab.total_size() as usize {
        return Err(Error::config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model.vocab_size,
            vocab.total_size()
        )));
    }
    if shard.clips.is_empty() {
        return Err(Error::InsufficientData("dataset shard holds no clips".into()));
    }
    if shard.tokens_per_clip > model.max_positions {
        return Err(Error::ContextExceeded {
            needed: shard.tokens_per_clip,
            max: model.max_positions,
        });
    }
    FrameLayout::new(shard.grid_h, shard.grid_w)
}

fn run_training(
    mut model: Model,
    shard: &DatasetShard,
    frame: FrameLayout,
    regime: MaskRegime,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<(Model, Vec<StepMetrics>)> {
    cfg.validate()?;
    let stream_len = shard.tokens_per_clip;
    let (layout, _) = train_sequence(frame, &shard.clips[0].ids, regime);
    let mask = layout.mask(regime);
    let mut opt = AdamW::new(&model);
    let mut grads = vec![0f32; model.params().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696E);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::new();
    let started = Instant::now();
    for step in 0..cfg.total_steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                if order.is_empty() {
                    order = (0..shard.clips.len()).collect();
                    order.shuffle(&mut rng);
                }
                order.pop().expect("refilled above")
            })
            .collect();
        let seqs: Vec<TrainSequence> = batch
            .iter()
            .map(|&i| {
                debug_assert_eq!(shard.clips[i].ids.len(), stream_len);
                TrainSequence {
                    tokens: layout.tokens(&shard.clips[i].ids),
                    positions: layout.positions(),
                    targets: layout.targets(&shard.clips[i].ids),
                }
            })
            .collect();
        let targets: usize = seqs.iter().map(|s| s.targets.iter().flatten().count()).sum();
        let scale = 1.0 / targets.max(1) as f32;
        grads.fill(0.0);
        let mut loss_sum = 0f64;
        for s in &seqs {
            loss_sum += model.loss_and_grad(s, &mask, Some((&mut grads, scale)))?.0;
        }
        let loss = (loss_sum / targets.max(1) as f64) as f32;
        let lr = lr_at(cfg, step);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss, lr });
        }
        let grad_norm = grads.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt() as f32;
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step, loss, lr });
        }
        if let Some(clip) = cfg.grad_clip {
            if grad_norm > clip {
                let k = clip / grad_norm;
                grads.iter_mut().for_each(|g| *g *= k);
            }
        }
        opt.step(model.params_mut(), &grads, lr, cfg);
        let m = StepMetrics {
            step,
            loss,
            lr,
            grad_norm,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        on_step(&m);
        metrics.push(m);
        if cfg.target_loss.is_some_and(|t| loss < t) || cfg.time_budget_s.is_some_and(|b| started.elapsed().as_secs_f64() >= b) {
            break;
        }
    }
    Ok((model, metrics))
}

/// Trains a freshly initialized model (seeded by `cfg.seed`) with the causal mask.
pub fn train(
    shard: &DatasetShard,
    vocab: &Vocabulary,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    let frame = check_dataset(shard, vocab, &model_cfg)?;
    let model = Model::init(model_cfg, cfg.seed)?;
    let (model, metrics) = run_training(model, shard, frame, MaskRegime::Causal, cfg, on_step)?;
    let steps = metrics.len();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta::new(*model.config(), vocab, frame, MaskRegime::Causal, steps),
            model,
        },
        metrics,
    })
}

/// Continues a causal checkpoint under the wavefront mask with the
/// row-start auxiliary loss.
pub fn finetune_parallel(
    checkpoint: &Checkpoint,
    shard: &DatasetShard,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    if checkpoint.meta.regime != MaskRegime::Causal {
        return Err(Error::config("parallel fine-tuning expects a causal checkpoint"));
    }
    checkpoint.meta.check_vocabulary(vocab)?;
    let frame = check_dataset(shard, vocab, checkpoint.model.config())?;
    let (model, metrics) = run_training(checkpoint.model.clone(), shard, frame, MaskRegime::Wavefront, cfg, on_step)?;
    let steps = checkpoint.meta.step + metrics.len();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta::new(*model.config(), vocab, frame, MaskRegime::Wavefront, steps),
            model,
        },
        metrics,
    })
}

/// Mean next-token cross-entropy over every target of every clip, under the
/// given regime's rows and mask.
pub fn evaluate_loss(model: &Model, shard: &DatasetShard, regime: MaskRegime) -> Result<f64> {
    let frame = FrameLayout::new(shard.grid_h, shard.grid_w)?;
    if shard.clips.is_empty() {
        return Err(Error::InsufficientData("dataset shard holds no clips".into()));
    }
    let (layout, _) = train_sequence(frame, &shard.clips[0].ids, regime);
    let mask = layout.mask(regime);
    let mut total = 0f64;
    let mut count = 0usize;
    for clip in &shard.clips {
        let seq = TrainSequence {
            tokens: layout.tokens(&clip.ids),
            positions: layout.positions(),
            targets: layout.targets(&clip.ids),
        };
        let (s, n) = model.loss_and_grad(&seq, &mask, None)?;
        total += s;
        count += n;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_seq(model: &Model, n: usize, seed: u64) -> (TrainSequence, VisibilityMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = model.config().vocab_size as u32;
        let stream: Vec<u32> = (0..n + 1).map(|_| rng.gen_range(0..v)).collect();
        let seq = TrainSequence {
            tokens: stream[..n].to_vec(),
            positions: (0..n as u32).collect(),
            targets: stream[1..].iter().map(|&t| Some(t)).collect(),
        };
        (seq, VisibilityMask::causal(n))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ModelConfig::tiny(50, 64);
        let model = Model::init(cfg, 11).unwrap();
        let (seq, mask) = tiny_seq(&model, 10, 1);
        let mut grads = vec![0f32; model.params().len()];
        let (_, n) = model.loss_and_grad(&seq, &mask, Some((&mut grads, 1.0))).unwrap();
        assert_eq!(n, 10);

        // Central differences on the f64 reference forward; f32 rounding
        // would swamp the quotient.
        let base: Vec<f64> = model.params().iter().map(|&p| p as f64).collect();
        let loss_at = |p: &[f64]| super::super::reference::loss_f64(&model, p, &seq.tokens, &seq.positions, &seq.targets, &mask);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        let mut worst = 0f64;
        while checked < 32 {
            let i = rng.gen_range(0..grads.len());
            let g = grads[i] as f64;
            if g.abs() < 1e-4 {
                continue;
            }
            let h = 1e-5;
            let mut p = base.clone();
            p[i] += h;
            let up = loss_at(&p);
            p[i] -= 2.0 * h;
            let down = loss_at(&p);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs());
            worst = worst.max(rel);
            checked += 1;
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn schedule_warmup_then_cosine() {
        let cfg = TrainConfig {
            total_steps: 1000,
            warmup_steps: 100,
            ..TrainConfig::default()
        };
        assert!((lr_at(&cfg, 0) - 3e-6).abs() < 1e-9);
        assert!((lr_at(&cfg, 99) - 3e-4).abs() < 1e-9);
        assert!((lr_at(&cfg, 100) - 3e-4).abs() < 1e-9);
        assert!((lr_at(&cfg, 1000) - 3e-5).abs() < 1e-9);
        let mid = lr_at(&cfg, 550);
        assert!((mid - (3e-5 + 0.5 * 2.7e-4)).abs() < 1e-8);
        for s in 100..999 {
            assert!(lr_at(&cfg, s + 1) <= lr_at(&cfg, s));
        }
    }

    #[test]
    fn bad_train_config_rejected() {
        let mut c = TrainConfig::default();
        c.warmup_steps = c.total_steps;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn adamw_reduces_tiny_loss() {
        let cfg = ModelConfig::tiny(50, 64);
        let mut model = Model::init(cfg, 2).unwrap();
        let (seq, mask) = tiny_seq(&model, 12, 3);
        let tcfg = TrainConfig {
            learning_rate: 1e-2,
            warmup_steps: 5,
            total_steps: 60,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&model);
        let first = model.loss_and_grad(&seq, &mask, None).unwrap().0 / 12.0;
        for step in 0..tcfg.total_steps {
            let mut g = vec![0f32; model.params().len()];
            model.loss_and_grad(&seq, &mask, Some((&mut g, 1.0 / 12.0))).unwrap();
            opt.step(model.params_mut(), &g, lr_at(&tcfg, step), &tcfg);
        }
        let last = model.loss_and_grad(&seq, &mask, None).unwrap().0 / 12.0;
        assert!(last < first * 0.2, "{first} -> {last}");
    }
}
