//! Naive f64 forward pass with scalar loops. Slow; used as a test oracle for
//! the f32 kernels and for finite-difference gradient checks.

use super::{Model, ModelConfig, VisibilityMask};

struct Params<'a> {
    model: &'a Model,
    values: &'a [f64],
}

impl Params<'_> {
    fn get(&self, name: &str) -> &[f64] {
        let t = self
            .model
            .tensors()
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor {name}"));
        &self.values[t.offset..t.offset + t.len()]
    }
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + super::ops::RMS_EPS as f64).sqrt();
    x.iter().zip(g).map(|(v, g)| v * r * g).collect()
}

fn linear(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..n {
            y[j] += xi * w[i * n + j];
        }
    }
    y
}

fn rope(x: &mut [f64], pos: u32, head_dim: usize) {
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let freq = (super::ops::ROPE_BASE as f64).powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = (pos as f64 * freq).sin_cos();
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Logits per row, computed in f64 from `values` laid out like `model`'s
/// parameter buffer.
pub fn forward_f64(model: &Model, values: &[f64], tokens: &[u32], positions: &[u32], mask: &VisibilityMask) -> Vec<Vec<f64>> {
    let c: ModelConfig = *model.config();
    let p = Params { model, values };
    let (d, f, dh) = (c.hidden_dim, c.mlp_dim, c.head_dim());
    let emb = p.get("tok_embeddings");
    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| emb[t as usize * d..(t as usize + 1) * d].to_vec()).collect();
    for l in 0..c.num_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let h: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, p.get(&name("attn_norm")))).collect();
        let proj = |w: &str, rot: bool| -> Vec<Vec<f64>> {
            h.iter()
                .zip(positions)
                .map(|(x, &pos)| {
                    let mut y = linear(x, p.get(&name(w)), d);
                    if rot {
                        rope(&mut y, pos, dh);
                    }
                    y
                })
                .collect()
        };
        let (q, k, v) = (proj("wq", true), proj("wk", true), proj("wv", false));
        let n = tokens.len();
        let mut att = vec![vec![0.0; d]; n];
        for r in 0..n {
            for hd in 0..c.num_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let scores: Vec<Option<f64>> = (0..n)
                    .map(|s| {
                        mask.get(r, s).then(|| {
                            q[r][cols.clone()].iter().zip(&k[s][cols.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                    })
                    .collect();
                let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    if let Some(sc) = sc {
                        let w = (sc - max).exp() / z;
                        for col in cols.clone() {
                            att[r][col] += w * v[s][col];
                        }
                    }
                }
            }
        }
        for r in 0..n {
            let o = linear(&att[r], p.get(&name("wo")), d);
            let mid: Vec<f64> = xs[r].iter().zip(&o).map(|(a, b)| a + b).collect();
            let h2 = rms(&mid, p.get(&name("mlp_norm")));
            let g = linear(&h2, p.get(&name("w_gate")), f);
            let u = linear(&h2, p.get(&name("w_up")), f);
            let a: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = linear(&a, p.get(&name("w_down")), d);
            xs[r] = mid.iter().zip(&down).map(|(a, b)| a + b).collect();
        }
    }
    xs.iter()
        .map(|x| linear(&rms(x, p.get("norm")), p.get("output"), c.vocab_size))
        .collect()
}

/// Summed next-token cross-entropy in f64.
pub fn loss_f64(
    model: &Model,
    values: &[f64],
    tokens: &[u32],
    positions: &[u32],
    targets: &[Option<u32>],
    mask: &VisibilityMask,
) -> f64 {
    forward_f64(model, values, tokens, positions, mask)
        .iter()
        .zip(targets)
        .filter_map(|(row, t)| {
            let t = (*t)? as usize;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Some(lse - row[t])
        })
        .sum()
}
