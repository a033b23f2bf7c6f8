//! Incremental inference over a per-episode key/value cache.

use super::ops::{self, matmul, rms_norm, rope_apply, silu, softmax_in_place, MatRef};
use super::{Model, VisibilityMask};
use crate::error::{Error, Result};

/// Rotated keys and values of every committed row, per layer. Rows are
/// append-only and may arrive in any position order.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    positions: Vec<u32>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }
}

struct Pass {
    logits: Vec<f32>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl Model {
    pub fn new_cache(&self) -> KvCache {
        let cap = self.config.max_positions * self.config.hidden_dim;
        let layers = self.config.num_layers;
        KvCache {
            keys: (0..layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..layers).map(|_| Vec::with_capacity(cap)).collect(),
            positions: Vec::with_capacity(self.config.max_positions),
        }
    }

    /// Runs new rows against the cache. Each row sees every cached row and
    /// the new rows allowed by `intra`; the first `commit` rows are then
    /// appended. Returns logits for all new rows.
    pub fn extend(
        &self,
        cache: &mut KvCache,
        tokens: &[u32],
        positions: &[u32],
        intra: &VisibilityMask,
        commit: usize,
    ) -> Result<Vec<f32>> {
        if commit > tokens.len() {
            return Err(Error::invalid(format!("cannot commit {commit} of {} rows", tokens.len())));
        }
        if tokens.is_empty() {
            self.check_inputs(tokens, positions)?;
            return Ok(Vec::new());
        }
        let pass = self.cached_pass(cache, tokens, positions, intra)?;
        let d = self.config.hidden_dim;
        for l in 0..self.config.num_layers {
            cache.keys[l].extend_from_slice(&pass.keys[l][..commit * d]);
            cache.values[l].extend_from_slice(&pass.values[l][..commit * d]);
        }
        cache.positions.extend_from_slice(&positions[..commit]);
        Ok(pass.logits)
    }

    /// Causal extension committing every row.
    pub fn append(&self, cache: &mut KvCache, tokens: &[u32], positions: &[u32]) -> Result<Vec<f32>> {
        self.extend(cache, tokens, positions, &VisibilityMask::causal(tokens.len()), tokens.len())
    }

    /// Rows that each see the cache and themselves; the cache is untouched.
    pub fn query(&self, cache: &KvCache, tokens: &[u32], positions: &[u32]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            self.check_inputs(tokens, positions)?;
            return Ok(Vec::new());
        }
        let mut own = VisibilityMask::empty(tokens.len());
        for r in 0..tokens.len() {
            own.set(r, r, true);
        }
        Ok(self.cached_pass(cache, tokens, positions, &own)?.logits)
    }

    fn cached_pass(&self, cache: &KvCache, tokens: &[u32], positions: &[u32], intra: &VisibilityMask) -> Result<Pass> {
        self.check_inputs(tokens, positions)?;
        if intra.len() != tokens.len() {
            return Err(Error::invalid(format!(
                "intra mask covers {} rows, pass has {}",
                intra.len(),
                tokens.len()
            )));
        }
        let c = &self.config;
        let (m, d, f, dh) = (tokens.len(), c.hidden_dim, c.mlp_dim, c.head_dim());
        let n = cache.len();
        let total = n + m;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut x = self.embed(tokens);
        let mut keys = Vec::with_capacity(c.num_layers);
        let mut values = Vec::with_capacity(c.num_layers);
        let mut h = vec![0f32; m * d];
        let mut scores = vec![0f32; m * total];
        for (l, li) in self.index.layers.iter().enumerate() {
            rms_norm(&x, self.p(li.attn_norm, d), &mut h);
            let mut q = vec![0f32; m * d];
            let mut k = vec![0f32; m * d];
            let mut v = vec![0f32; m * d];
            matmul(&h, m, d, self.p(li.wq, d * d), d, &mut q);
            matmul(&h, m, d, self.p(li.wk, d * d), d, &mut k);
            matmul(&h, m, d, self.p(li.wv, d * d), d, &mut v);
            rope_apply(&mut q, d, dh, positions, &self.freqs, 1.0);
            rope_apply(&mut k, d, dh, positions, &self.freqs, 1.0);
            let (ck, cv) = (&cache.keys[l], &cache.values[l]);
            let mut att = vec![0f32; m * d];
            for hd in 0..c.num_heads {
                let qh = MatRef::block(&q, m, d, hd * dh, dh);
                if n > 0 {
                    ops::gemm(scale, qh, MatRef::block(ck, n, d, hd * dh, dh).t(), 0.0, &mut scores, total);
                }
                ops::gemm(scale, qh, MatRef::block(&k, m, d, hd * dh, dh).t(), 0.0, &mut scores[n..], total);
                for (r, row) in scores.chunks_exact_mut(total).enumerate() {
                    for (s, &vis) in row[n..].iter_mut().zip(intra.row(r)) {
                        if !vis {
                            *s = f32::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row);
                }
                let out = &mut att[hd * dh..];
                if n > 0 {
                    let p = MatRef {
                        data: &scores,
                        rows: m,
                        cols: n,
                        rs: total as isize,
                        cs: 1,
                    };
                    ops::gemm(1.0, p, MatRef::block(cv, n, d, hd * dh, dh), 0.0, out, d);
                }
                let p = MatRef::block(&scores, m, total, n, m);
                ops::gemm(1.0, p, MatRef::block(&v, m, d, hd * dh, dh), if n > 0 { 1.0 } else { 0.0 }, out, d);
            }
            let mut x_mid = vec![0f32; m * d];
            matmul(&att, m, d, self.p(li.wo, d * d), d, &mut x_mid);
            for (o, &r) in x_mid.iter_mut().zip(&x) {
                *o += r;
            }
            rms_norm(&x_mid, self.p(li.mlp_norm, d), &mut h);
            let mut gate = vec![0f32; m * f];
            let mut up = vec![0f32; m * f];
            matmul(&h, m, d, self.p(li.w_gate, d * f), f, &mut gate);
            matmul(&h, m, d, self.p(li.w_up, d * f), f, &mut up);
            for (g, &u) in gate.iter_mut().zip(&up) {
                *g = silu(*g) * u;
            }
            matmul(&gate, m, f, self.p(li.w_down, f * d), d, &mut x);
            for (o, &r) in x.iter_mut().zip(&x_mid) {
                *o += r;
            }
            keys.push(k);
            values.push(v);
        }
        let mut hf = vec![0f32; m * d];
        rms_norm(&x, self.p(self.index.final_norm, d), &mut hf);
        let mut logits = vec![0f32; m * c.vocab_size];
        matmul(&hf, m, d, self.p(self.index.lm_head, d * c.vocab_size), c.vocab_size, &mut logits);
        Ok(Pass { logits, keys, values })
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn incremental_matches_full_recompute() {
        let model = Model::init(ModelConfig::tiny(60, 128), 9).unwrap();
        let v = 60;
        let tokens: Vec<u32> = (0..40).map(|i| (i * 11 % 60) as u32).collect();
        let pos: Vec<u32> = (0..40).collect();
        let full = model.forward(&tokens, &pos, &VisibilityMask::causal(40)).unwrap();
        let mut cache = model.new_cache();
        // Uneven chunk sizes exercise both matmul paths.
        let mut start = 0;
        for len in [1usize, 5, 2, 9, 1, 3, 19] {
            let out = model.append(&mut cache, &tokens[start..start + len], &pos[start..start + len]).unwrap();
            assert!(max_diff(&out, &full[start * v..(start + len) * v]) <= 1e-4);
            start += len;
        }
        assert_eq!(cache.len(), 40);
    }

    #[test]
    fn query_leaves_cache_untouched() {
        let model = Model::init(ModelConfig::tiny(60, 128), 9).unwrap();
        let mut cache = model.new_cache();
        model.append(&mut cache, &[1, 2, 3], &[0, 1, 2]).unwrap();
        let before = cache.clone();
        let a = model.query(&cache, &[7, 8], &[3, 9]).unwrap();
        assert_eq!(cache.keys, before.keys);
        assert_eq!(cache.positions(), &[0, 1, 2]);
        // Each query row equals a lone causal extension of that row.
        let b = model.extend(&mut cache.clone(), &[8], &[9], &VisibilityMask::causal(1), 0).unwrap();
        assert!(max_diff(&a[60..], &b) <= 1e-5);
    }

    #[test]
    fn empty_extension_is_a_no_op() {
        let m = Model::init(ModelConfig::tiny(60, 128), 9).unwrap();
        let mut cache = m.new_cache();
        assert!(m.append(&mut cache, &[], &[]).unwrap().is_empty());
        assert!(cache.is_empty());
        assert!(m.query(&cache, &[], &[]).unwrap().is_empty());
    }

    #[test]
    fn partial_commit() {
        let model = Model::init(ModelConfig::tiny(60, 128), 9).unwrap();
        let mut cache = model.new_cache();
        let mut own = VisibilityMask::empty(3);
        (0..3).for_each(|r| own.set(r, r, true));
        model.extend(&mut cache, &[4, 5, 6], &[0, 1, 2], &own, 2).unwrap();
        assert_eq!(cache.positions(), &[0, 1]);
        assert!(model.extend(&mut cache, &[1], &[3], &VisibilityMask::causal(1), 2).is_err());
        assert!(matches!(
            model.append(&mut cache, &[1], &[128]),
            Err(Error::ContextExceeded { .. })
        ));
    }
}
