//! Dense f32 kernels shared by training and inference.
//!
//! Matrices are row-major slices. `gemm` wraps `matrixmultiply::sgemm` with
//! explicit strides so transposed operands need no copies.

pub const RMS_EPS: f32 = 1e-5;
pub const ROPE_BASE: f32 = 10_000.0;

/// A strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Column block `[col0, col0 + ncols)` of a row-major matrix with `ld` columns.
    pub fn block(data: &'a [f32], rows: usize, ld: usize, col0: usize, ncols: usize) -> Self {
        Self {
            data: &data[col0..],
            rows,
            cols: ncols,
            rs: ld as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize
    }
}

/// `c = alpha · a · b + beta · c`, where `c` is `a.rows × b.cols` with row stride `ldc`.
pub fn gemm(alpha: f32, a: MatRef, b: MatRef, beta: f32, c: &mut [f32], ldc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.max_index() < a.data.len() || k == 0);
    assert!(b.max_index() < b.data.len() || k == 0);
    assert!((m - 1) * ldc + n <= c.len());
    assert!(ldc >= n);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// `out (m×n) = x (m×k) · w (k×n)`. Row-at-a-time for short inputs, which are
/// bandwidth-bound, and packed sgemm otherwise.
pub fn matmul(x: &[f32], m: usize, k: usize, w: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m < 4 {
        for r in 0..m {
            let o = &mut out[r * n..(r + 1) * n];
            o.fill(0.0);
            for (i, &xi) in x[r * k..(r + 1) * k].iter().enumerate() {
                let row = &w[i * n..(i + 1) * n];
                for (acc, &wv) in o.iter_mut().zip(row) {
                    *acc += xi * wv;
                }
            }
        }
    } else {
        gemm(1.0, MatRef::new(x, m, k), MatRef::new(w, k, n), 0.0, out, n);
    }
}

/// `out (m×k) += dy (m×n) · wᵀ` where `w` is `k×n`.
pub fn matmul_bt_acc(dy: &[f32], m: usize, n: usize, w: &[f32], k: usize, out: &mut [f32]) {
    gemm(1.0, MatRef::new(dy, m, n), MatRef::new(w, k, n).t(), 1.0, out, k);
}

/// `dw (k×n) += xᵀ · dy` where `x` is `m×k` and `dy` is `m×n`.
pub fn matmul_at_acc(x: &[f32], m: usize, k: usize, dy: &[f32], n: usize, dw: &mut [f32]) {
    gemm(1.0, MatRef::new(x, m, k).t(), MatRef::new(dy, m, n), 1.0, dw, n);
}

/// RMS-normalizes each row of `x` into `out` and returns the per-row inverse RMS.
pub fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) -> Vec<f32> {
    let d = gain.len();
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        for ((o, &v), &g) in o.iter_mut().zip(row).zip(gain) {
            *o = v * r * g;
        }
        inv.push(r);
    }
    inv
}

/// Backward of [`rms_norm`]: accumulates into `dx` and `dgain`.
pub fn rms_norm_backward(x: &[f32], gain: &[f32], inv: &[f32], dy: &[f32], dx: &mut [f32], dgain: &mut [f32]) {
    let d = gain.len();
    for (((row, dyr), dxr), &r) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).zip(inv) {
        let mut dot = 0f32;
        for i in 0..d {
            let xhat = row[i] * r;
            let dxhat = dyr[i] * gain[i];
            dgain[i] += dyr[i] * xhat;
            dot += dxhat * xhat;
        }
        let mean = dot / d as f32;
        for i in 0..d {
            let xhat = row[i] * r;
            dxr[i] += r * (dyr[i] * gain[i] - xhat * mean);
        }
    }
}

/// Rotary tables for one head dimension: `freqs[i] = base^(-2i/dh)`.
pub fn rope_freqs(head_dim: usize) -> Vec<f32> {
    (0..head_dim / 2)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f32 / head_dim as f32))
        .collect()
}

/// Rotates consecutive pairs of every head of every row by `pos · freq`.
/// `sign = -1.0` applies the inverse rotation (used for gradients).
pub fn rope_apply(x: &mut [f32], d: usize, head_dim: usize, positions: &[u32], freqs: &[f32], sign: f32) {
    for (row, &pos) in x.chunks_exact_mut(d).zip(positions) {
        for (i, &f) in freqs.iter().enumerate() {
            let angle = pos as f32 * f;
            let (s, c) = angle.sin_cos();
            let s = s * sign;
            for head in row.chunks_exact_mut(head_dim) {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// In-place softmax over `row`, treating `NEG_INFINITY` entries as masked.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Numerically stable `-log softmax(logits)[target]`; also returns the softmax.
pub fn cross_entropy(logits: &[f32], target: usize) -> (f32, Vec<f32>) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = logits.iter().map(|v| (v - lse).exp()).collect();
    (lse - logits[target], probs)
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
