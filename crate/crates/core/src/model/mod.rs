//! Decoder-only transformer: pre-norm RMSNorm blocks, rotary attention and a
//! gated (SwiGLU) MLP, with a hand-written backward pass.
//!
//! All parameters live in one flat `f32` buffer; [`TensorInfo`] names the
//! slices. Linear weights are stored `[in][out]` so `y = x · W`.

mod cache;
mod checkpoint;
pub mod ops;
pub mod reference;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use ops::{matmul, rms_norm, rope_apply, rope_freqs, silu, softmax_in_place, MatRef};

pub use cache::KvCache;
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use train::{
    evaluate_loss, finetune_parallel, lr_at, train, train_sequence, StepMetrics, TrainConfig, TrainOutcome,
    TrainSequence,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            mlp_dim: 1024,
            num_heads: 8,
            num_layers: 8,
            vocab_size: 553,
            max_positions: 1712,
        }
    }
}

impl ModelConfig {
    /// Two layers, hidden 32: small enough for finite-difference checks.
    pub fn tiny(vocab_size: usize, max_positions: usize) -> Self {
        Self {
            hidden_dim: 32,
            mlp_dim: 64,
            num_heads: 4,
            num_layers: 2,
            vocab_size,
            max_positions,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.hidden_dim == 0 || c.mlp_dim == 0 || c.num_heads == 0 || c.num_layers == 0 || c.vocab_size == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if c.hidden_dim % c.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                c.hidden_dim, c.num_heads
            )));
        }
        if c.head_dim() % 2 != 0 {
            return Err(Error::config("rotary embeddings need an even head dimension"));
        }
        if c.max_positions == 0 {
            return Err(Error::config("max_positions must be positive"));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        ParamIndex::new(self).total
    }
}

/// Attention regime a checkpoint was trained under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRegime {
    Causal,
    Wavefront,
}

/// Dense query × key visibility; `get(q, k)` means row `q` attends to row `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    n: usize,
    bits: Vec<bool>,
}

impl VisibilityMask {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn causal(n: usize) -> Self {
        let mut m = Self::empty(n);
        for q in 0..n {
            m.bits[q * n..=q * n + q].fill(true);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n + k]
    }

    pub fn set(&mut self, q: usize, k: usize, visible: bool) {
        self.bits[q * self.n + k] = visible;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.n..(q + 1) * self.n]
    }
}

/// Name, shape and offset of one tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct LayerIndex {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    mlp_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

#[derive(Clone, Debug)]
struct ParamIndex {
    tok_emb: usize,
    layers: Vec<LayerIndex>,
    final_norm: usize,
    lm_head: usize,
    total: usize,
    tensors: Vec<TensorInfo>,
}

impl ParamIndex {
    fn new(c: &ModelConfig) -> Self {
        let (d, f, v) = (c.hidden_dim, c.mlp_dim, c.vocab_size);
        let mut tensors = Vec::new();
        let mut off = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let start = off;
            off += shape.iter().product::<usize>();
            tensors.push(TensorInfo {
                name,
                shape,
                offset: start,
            });
            start
        };
        let tok_emb = add("tok_embeddings".into(), vec![v, d]);
        let layers = (0..c.num_layers)
            .map(|l| LayerIndex {
                attn_norm: add(format!("layers.{l}.attn_norm"), vec![d]),
                wq: add(format!("layers.{l}.wq"), vec![d, d]),
                wk: add(format!("layers.{l}.wk"), vec![d, d]),
                wv: add(format!("layers.{l}.wv"), vec![d, d]),
                wo: add(format!("layers.{l}.wo"), vec![d, d]),
                mlp_norm: add(format!("layers.{l}.mlp_norm"), vec![d]),
                w_gate: add(format!("layers.{l}.w_gate"), vec![d, f]),
                w_up: add(format!("layers.{l}.w_up"), vec![d, f]),
                w_down: add(format!("layers.{l}.w_down"), vec![f, d]),
            })
            .collect();
        let final_norm = add("norm".into(), vec![d]);
        let lm_head = add("output".into(), vec![d, v]);
        Self {
            tok_emb,
            layers,
            final_norm,
            lm_head,
            total: off,
            tensors,
        }
    }
}

pub struct Model {
    config: ModelConfig,
    params: Vec<f32>,
    index: ParamIndex,
    freqs: Vec<f32>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.len())
            .finish()
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            index: self.index.clone(),
            freqs: self.freqs.clone(),
        }
    }
}

/// Per-layer activations kept for the backward pass. Attention
/// probabilities are recomputed rather than stored.
struct LayerActs {
    x: Vec<f32>,
    inv1: Vec<f32>,
    h1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    att: Vec<f32>,
    x_mid: Vec<f32>,
    inv2: Vec<f32>,
    h2: Vec<f32>,
    gate: Vec<f32>,
    up: Vec<f32>,
    act: Vec<f32>,
}

struct Activations {
    layers: Vec<LayerActs>,
    x_final: Vec<f32>,
    inv_final: Vec<f32>,
    h_final: Vec<f32>,
}

impl Model {
    /// Normal(0, 0.02) weights, residual output projections scaled by
    /// `1/sqrt(2·layers)`, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(&config);
        let mut params = vec![0f32; index.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0f32, 0.02).expect("valid std");
        let resid = Normal::new(0.0f32, 0.02 / (2.0 * config.num_layers as f32).sqrt()).expect("valid std");
        for t in &index.tensors {
            let slice = &mut params[t.offset..t.offset + t.len()];
            if t.shape.len() == 1 {
                slice.fill(1.0);
            } else if t.name.ends_with(".wo") || t.name.ends_with(".w_down") {
                slice.iter_mut().for_each(|p| *p = resid.sample(&mut rng));
            } else {
                slice.iter_mut().for_each(|p| *p = base.sample(&mut rng));
            }
        }
        Ok(Self::from_params(config, params).expect("layout matches config"))
    }

    pub fn from_params(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::new(&config);
        if params.len() != index.total {
            return Err(Error::invalid(format!(
                "{} parameters supplied, config needs {}",
                params.len(),
                index.total
            )));
        }
        let freqs = rope_freqs(config.head_dim());
        Ok(Self {
            config,
            params,
            index,
            freqs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.index.tensors
    }

    fn p(&self, offset: usize, len: usize) -> &[f32] {
        &self.params[offset..offset + len]
    }

    fn check_inputs(&self, tokens: &[u32], positions: &[u32]) -> Result<()> {
        if tokens.len() != positions.len() {
            return Err(Error::invalid(format!(
                "{} tokens but {} positions",
                tokens.len(),
                positions.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        if let Some(&p) = positions.iter().max() {
            if p as usize >= self.config.max_positions {
                return Err(Error::ContextExceeded {
                    needed: p as usize + 1,
                    max: self.config.max_positions,
                });
            }
        }
        Ok(())
    }

    /// Logits (`tokens.len() × vocab_size`, row-major) under `mask`.
    pub fn forward(&self, tokens: &[u32], positions: &[u32], mask: &VisibilityMask) -> Result<Vec<f32>> {
        self.check_inputs(tokens, positions)?;
        if mask.len() != tokens.len() {
            return Err(Error::invalid(format!(
                "mask covers {} rows, sequence has {}",
                mask.len(),
                tokens.len()
            )));
        }
        Ok(self.run(tokens, positions, mask, false).0)
    }

    fn embed(&self, tokens: &[u32]) -> Vec<f32> {
        let d = self.config.hidden_dim;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            x.extend_from_slice(self.p(self.index.tok_emb + t as usize * d, d));
        }
        x
    }

    fn run(&self, tokens: &[u32], positions: &[u32], mask: &VisibilityMask, store: bool) -> (Vec<f32>, Option<Activations>) {
        let c = &self.config;
        let (t, d, f) = (tokens.len(), c.hidden_dim, c.mlp_dim);
        let mut x = self.embed(tokens);
        let mut layers = Vec::new();
        for li in &self.index.layers {
            let mut h1 = vec![0f32; t * d];
            let inv1 = rms_norm(&x, self.p(li.attn_norm, d), &mut h1);
            let mut q = vec![0f32; t * d];
            let mut k = vec![0f32; t * d];
            let mut v = vec![0f32; t * d];
            matmul(&h1, t, d, self.p(li.wq, d * d), d, &mut q);
            matmul(&h1, t, d, self.p(li.wk, d * d), d, &mut k);
            matmul(&h1, t, d, self.p(li.wv, d * d), d, &mut v);
            rope_apply(&mut q, d, c.head_dim(), positions, &self.freqs, 1.0);
            rope_apply(&mut k, d, c.head_dim(), positions, &self.freqs, 1.0);
            let mut att = vec![0f32; t * d];
            self.attention(&q, &k, &v, t, mask, &mut att);
            let mut x_mid = vec![0f32; t * d];
            matmul(&att, t, d, self.p(li.wo, d * d), d, &mut x_mid);
            for (o, &r) in x_mid.iter_mut().zip(&x) {
                *o += r;
            }
            let mut h2 = vec![0f32; t * d];
            let inv2 = rms_norm(&x_mid, self.p(li.mlp_norm, d), &mut h2);
            let mut gate = vec![0f32; t * f];
            let mut up = vec![0f32; t * f];
            matmul(&h2, t, d, self.p(li.w_gate, d * f), f, &mut gate);
            matmul(&h2, t, d, self.p(li.w_up, d * f), f, &mut up);
            let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let mut x_out = vec![0f32; t * d];
            matmul(&act, t, f, self.p(li.w_down, f * d), d, &mut x_out);
            for (o, &r) in x_out.iter_mut().zip(&x_mid) {
                *o += r;
            }
            let x_in = std::mem::replace(&mut x, x_out);
            if store {
                layers.push(LayerActs {
                    x: x_in,
                    inv1,
                    h1,
                    q,
                    k,
                    v,
                    att,
                    x_mid,
                    inv2,
                    h2,
                    gate,
                    up,
                    act,
                });
            }
        }
        let mut h_final = vec![0f32; t * d];
        let inv_final = rms_norm(&x, self.p(self.index.final_norm, d), &mut h_final);
        let mut logits = vec![0f32; t * c.vocab_size];
        matmul(&h_final, t, d, self.p(self.index.lm_head, d * c.vocab_size), c.vocab_size, &mut logits);
        let acts = store.then(|| Activations {
            layers,
            x_final: x,
            inv_final,
            h_final,
        });
        (logits, acts)
    }

    /// Masked multi-head attention over full sequences; writes the
    /// concatenated head outputs into `out` (`t × d`).
    fn attention(&self, q: &[f32], k: &[f32], v: &[f32], t: usize, mask: &VisibilityMask, out: &mut [f32]) {
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let mut probs = vec![0f32; t * t];
        for h in 0..self.config.num_heads {
            self.attention_probs(q, k, t, h, mask, &mut probs);
            ops::gemm(1.0, MatRef::new(&probs, t, t), MatRef::block(v, t, d, h * dh, dh), 0.0, &mut out[h * dh..], d);
        }
    }

    fn attention_probs(&self, q: &[f32], k: &[f32], t: usize, h: usize, mask: &VisibilityMask, probs: &mut [f32]) {
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let qh = MatRef::block(q, t, d, h * dh, dh);
        let kh = MatRef::block(k, t, d, h * dh, dh);
        ops::gemm(scale, qh, kh.t(), 0.0, probs, t);
        for (r, row) in probs.chunks_exact_mut(t).enumerate() {
            for (s, &vis) in row.iter_mut().zip(mask.row(r)) {
                if !vis {
                    *s = f32::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::init(ModelConfig::tiny(40, 64), 7).unwrap()
    }

    #[test]
    fn default_config_size() {
        let n = ModelConfig::default().parameter_count();
        assert!((6_000_000..=9_000_000).contains(&n), "{n}");
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.num_heads = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn logits_shape_and_input_checks() {
        let m = tiny();
        let toks = [1u32, 2, 3, 4, 5];
        let pos = [0u32, 1, 2, 3, 4];
        let l = m.forward(&toks, &pos, &VisibilityMask::causal(5)).unwrap();
        assert_eq!(l.len(), 5 * 40);
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(matches!(m.forward(&[40], &[0], &VisibilityMask::causal(1)), Err(Error::InvalidInput(_))));
        assert!(matches!(m.forward(&[1], &[64], &VisibilityMask::causal(1)), Err(Error::ContextExceeded { .. })));
        assert!(matches!(m.forward(&[1, 2], &[0, 1], &VisibilityMask::causal(3)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let m = tiny();
        let pos: Vec<u32> = (0..12).collect();
        let a: Vec<u32> = (0..12).map(|i| (i * 7 % 40) as u32).collect();
        let mask = VisibilityMask::causal(12);
        let base = m.forward(&a, &pos, &mask).unwrap();
        for p in 0..11 {
            let mut b = a.clone();
            for t in b.iter_mut().skip(p + 1) {
                *t = (*t + 13) % 40;
            }
            let out = m.forward(&b, &pos, &mask).unwrap();
            assert_eq!(&out[..(p + 1) * 40], &base[..(p + 1) * 40], "prefix {p}");
            assert_ne!(&out[(p + 1) * 40..], &base[(p + 1) * 40..]);
        }
    }

    #[test]
    fn arbitrary_mask_respected() {
        let m = tiny();
        let n = 6;
        let mut mask = VisibilityMask::empty(n);
        for q in 0..n {
            mask.set(q, q, true);
            if q >= 2 {
                mask.set(q, q - 2, true);
            }
        }
        let pos: Vec<u32> = (0..n as u32).collect();
        let a = vec![3u32, 4, 5, 6, 7, 8];
        let base = m.forward(&a, &pos, &mask).unwrap();
        let mut b = a.clone();
        b[3] = 30; // invisible to row 4, visible to row 5
        let out = m.forward(&b, &pos, &mask).unwrap();
        assert_eq!(&out[4 * 40..5 * 40], &base[4 * 40..5 * 40]);
        assert_ne!(&out[5 * 40..], &base[5 * 40..]);
    }

    #[test]
    fn rotary_scores_depend_on_offset_only() {
        let m = tiny();
        let c = m.config;
        let d = c.hidden_dim;
        let li = &m.index.layers[0];
        let probe = |p0: u32, p1: u32| -> Vec<f32> {
            let x = m.embed(&[5, 9]);
            let mut h = vec![0f32; 2 * d];
            rms_norm(&x, m.p(li.attn_norm, d), &mut h);
            let mut q = vec![0f32; 2 * d];
            let mut k = vec![0f32; 2 * d];
            matmul(&h, 2, d, m.p(li.wq, d * d), d, &mut q);
            matmul(&h, 2, d, m.p(li.wk, d * d), d, &mut k);
            rope_apply(&mut q, d, c.head_dim(), &[p0, p1], &m.freqs, 1.0);
            rope_apply(&mut k, d, c.head_dim(), &[p0, p1], &m.freqs, 1.0);
            let dh = c.head_dim();
            (0..c.num_heads)
                .map(|hd| (0..dh).map(|i| q[d + hd * dh + i] * k[hd * dh + i]).sum())
                .collect()
        };
        let base = probe(3, 10);
        for shift in [1u32, 17, 250, 1000] {
            let s = probe(3 + shift, 10 + shift);
            for (a, b) in s.iter().zip(&base) {
                assert!((a - b).abs() < 1e-5, "shift {shift}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(ModelConfig::tiny(40, 64), 3).unwrap();
        let b = Model::init(ModelConfig::tiny(40, 64), 3).unwrap();
        let c = Model::init(ModelConfig::tiny(40, 64), 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }
}
