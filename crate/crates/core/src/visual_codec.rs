//! Patch vector quantizer: 32×48 RGB frames ↔ 8×12 grids of codebook ids.
//!
//! The codebook is trained with weighted k-means over the distinct 4×4 patches
//! of a frame corpus. Entries are snapped to integer pixel values at the end
//! of training, so decoding is lossless with respect to the codebook and
//! `encode(decode(g)) == g` for every valid grid.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FRAME_HEIGHT: usize = 32;
pub const FRAME_WIDTH: usize = 48;
pub const CHANNELS: usize = 3;
pub const PATCH: usize = 4;
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;

const CODEBOOK_MAGIC: &[u8; 4] = b"WFCB";
const CODEBOOK_VERSION: u32 = 1;

/// Row-major RGB image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame({}x{})", self.height, self.width)
    }
}

impl Default for Frame {
    fn default() -> Self {
        Self::black(FRAME_HEIGHT, FRAME_WIDTH)
    }
}

impl Frame {
    pub fn black(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width * CHANNELS],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::invalid(format!(
                "frame {height}x{width} needs {} bytes, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn patch(&self, pr: usize, pc: usize) -> [u8; PATCH_DIM] {
        let mut out = [0u8; PATCH_DIM];
        for r in 0..PATCH {
            let src = ((pr * PATCH + r) * self.width + pc * PATCH) * CHANNELS;
            out[r * PATCH * CHANNELS..(r + 1) * PATCH * CHANNELS]
                .copy_from_slice(&self.pixels[src..src + PATCH * CHANNELS]);
        }
        out
    }

    fn check_patchable(&self) -> Result<()> {
        if self.height % PATCH != 0 || self.width % PATCH != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "frame {}x{} is not divisible into {PATCH}x{PATCH} patches",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Grid of codebook ids in raster order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::invalid(format!("grid {h}x{w} needs {} ids, got {}", h * w, ids.len())));
        }
        Ok(Self { h, w, ids })
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.w + col]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainingStats {
    pub iterations: usize,
    pub inertia: f64,
    /// k-means objective after each assignment step.
    pub history: Vec<f64>,
    pub distinct_patches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Vec<f32>,
    k: usize,
}

impl Codebook {
    pub fn from_entries(entries: Vec<f32>) -> Result<Self> {
        if entries.len() % PATCH_DIM != 0 || entries.len() / PATCH_DIM < 2 {
            return Err(Error::invalid(format!(
                "codebook table of {} floats is not a whole number (>= 2) of {PATCH_DIM}-dim entries",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        let k = entries.len() / PATCH_DIM;
        Ok(Self { entries, k })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn entry(&self, id: usize) -> &[f32] {
        &self.entries[id * PATCH_DIM..(id + 1) * PATCH_DIM]
    }

    /// SHA-256 over the little-endian entry table.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.k as u32).to_le_bytes());
        for v in &self.entries {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Nearest entry by squared Euclidean distance; ties go to the lowest id.
    pub fn nearest(&self, patch: &[u8; PATCH_DIM]) -> (u32, f32) {
        let mut best = (0u32, f32::INFINITY);
        for id in 0..self.k {
            let e = self.entry(id);
            let mut d = 0f32;
            for (&p, &c) in patch.iter().zip(e) {
                let diff = p as f32 - c;
                d += diff * diff;
            }
            if d < best.1 {
                best = (id as u32, d);
            }
        }
        best
    }

    pub fn encode_frame(&self, frame: &Frame) -> Result<TokenGrid> {
        frame.check_patchable()?;
        let (h, w) = (frame.height / PATCH, frame.width / PATCH);
        let mut ids = Vec::with_capacity(h * w);
        for pr in 0..h {
            for pc in 0..w {
                ids.push(self.nearest(&frame.patch(pr, pc)).0);
            }
        }
        Ok(TokenGrid { h, w, ids })
    }

    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<Frame> {
        let mut frame = Frame::black(grid.h * PATCH, grid.w * PATCH);
        for pr in 0..grid.h {
            for pc in 0..grid.w {
                let id = grid.get(pr, pc);
                if id as usize >= self.k {
                    return Err(Error::InvalidToken {
                        row: pr,
                        col: pc,
                        id,
                        limit: self.k,
                    });
                }
                let e = self.entry(id as usize);
                for r in 0..PATCH {
                    let dst = ((pr * PATCH + r) * frame.width + pc * PATCH) * CHANNELS;
                    for (i, &v) in e[r * PATCH * CHANNELS..(r + 1) * PATCH * CHANNELS].iter().enumerate() {
                        frame.pixels[dst + i] = v.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
        Ok(frame)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(24 + self.entries.len() * 4);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(PATCH as u32).to_le_bytes());
        out.extend_from_slice(&(PATCH as u32).to_le_bytes());
        out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
        for v in &self.entries {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 24 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::corrupt_file(path, "not a codebook file (bad magic)"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != CODEBOOK_VERSION as usize {
            return Err(Error::corrupt_file(path, format!("unsupported codebook version {}", word(4))));
        }
        let (k, ph, pw, ch) = (word(8), word(12), word(16), word(20));
        if (ph, pw, ch) != (PATCH, PATCH, CHANNELS) {
            return Err(Error::corrupt_file(path, format!("unsupported patch shape {ph}x{pw}x{ch}")));
        }
        let body = &bytes[24..];
        if body.len() != k * PATCH_DIM * 4 {
            return Err(Error::corrupt_file(path, "truncated entry table"));
        }
        let entries = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_entries(entries)
    }
}

fn patch_counts(frames: &[Frame]) -> Result<HashMap<[u8; PATCH_DIM], u64>> {
    let mut counts: HashMap<[u8; PATCH_DIM], u64> = HashMap::new();
    for f in frames {
        f.check_patchable()?;
        for pr in 0..f.height / PATCH {
            for pc in 0..f.width / PATCH {
                *counts.entry(f.patch(pr, pc)).or_default() += 1;
            }
        }
    }
    Ok(counts)
}

/// Number of distinct 4×4 patches in `frames`.
pub fn distinct_patches(frames: &[Frame]) -> Result<usize> {
    Ok(patch_counts(frames)?.len())
}

/// Appends seeded random integer entries until the codebook holds `k`.
/// Fillers are distinct from each other and from the existing entries, so
/// `encode(decode(g)) == g` still holds; corpus patches keep their ids.
pub fn pad_codebook(codebook: &Codebook, k: usize, seed: u64) -> Result<Codebook> {
    if k < codebook.len() {
        return Err(Error::invalid(format!("cannot pad a {}-entry codebook down to {k}", codebook.len())));
    }
    let mut seen: std::collections::HashSet<[u32; PATCH_DIM]> = (0..codebook.len())
        .map(|i| std::array::from_fn(|d| codebook.entry(i)[d].to_bits()))
        .collect();
    let mut entries = codebook.entries.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5041_4444);
    while entries.len() < k * PATCH_DIM {
        let e: [f32; PATCH_DIM] = std::array::from_fn(|_| rng.gen_range(0..=255u8) as f32);
        if seen.insert(e.map(f32::to_bits)) {
            entries.extend_from_slice(&e);
        }
    }
    Codebook::from_entries(entries)
}

/// Weighted k-means over the distinct 4×4 patches of `frames`.
pub fn train_codebook(frames: &[Frame], k: usize, max_iters: usize, seed: u64) -> Result<(Codebook, TrainingStats)> {
    if k < 2 {
        return Err(Error::invalid("codebook needs at least 2 entries"));
    }
    let counts = patch_counts(frames)?;
    if counts.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} distinct patches in corpus, codebook size {k}",
            counts.len()
        )));
    }
    let mut distinct: Vec<([u8; PATCH_DIM], u64)> = counts.into_iter().collect();
    distinct.sort_unstable();
    let points: Vec<[f32; PATCH_DIM]> = distinct.iter().map(|(p, _)| p.map(|v| v as f32)).collect();
    let weights: Vec<f64> = distinct.iter().map(|(_, c)| *c as f64).collect();
    let total_weight: f64 = weights.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&points, &weights, k, &mut rng);
    let mut assign = vec![usize::MAX; points.len()];
    let mut dist = vec![0f32; points.len()];
    let mut stats = TrainingStats {
        distinct_patches: points.len(),
        ..Default::default()
    };

    for iter in 0..max_iters.max(1) {
        let mut changed = 0f64;
        let mut inertia = 0f64;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest_f32(&centroids, p);
            if c != assign[i] {
                changed += weights[i];
                assign[i] = c;
            }
            dist[i] = d;
            inertia += weights[i] * d as f64;
        }
        stats.history.push(inertia);
        stats.iterations = iter + 1;

        let mut sums = vec![[0f64; PATCH_DIM]; k];
        let mut mass = vec![0f64; k];
        for (i, p) in points.iter().enumerate() {
            let c = assign[i];
            mass[c] += weights[i];
            for (s, &v) in sums[c].iter_mut().zip(p) {
                *s += weights[i] * v as f64;
            }
        }
        for c in 0..k {
            if mass[c] > 0.0 {
                for d in 0..PATCH_DIM {
                    centroids[c][d] = (sums[c][d] / mass[c]) as f32;
                }
            }
        }
        // Empty clusters take the point currently farthest from its centroid.
        for c in 0..k {
            if mass[c] == 0.0 {
                let far = farthest(&dist);
                centroids[c] = points[far];
                dist[far] = 0.0;
                assign[far] = c;
            }
        }
        if iter > 0 && changed / total_weight < 1e-3 {
            break;
        }
    }

    snap_to_pixels(&mut centroids, &points);
    let entries: Vec<f32> = centroids.iter().flat_map(|c| c.iter().copied()).collect();
    let cb = Codebook::from_entries(entries)?;
    stats.inertia = points
        .iter()
        .zip(&weights)
        .map(|(p, &w)| w * nearest_f32(&centroids, p).1 as f64)
        .sum();
    Ok((cb, stats))
}

fn sq_dist(a: &[f32; PATCH_DIM], b: &[f32; PATCH_DIM]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_f32(centroids: &[[f32; PATCH_DIM]], p: &[f32; PATCH_DIM]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (c, e) in centroids.iter().enumerate() {
        let d = sq_dist(e, p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn farthest(dist: &[f32]) -> usize {
    let mut best = 0;
    for (i, &d) in dist.iter().enumerate() {
        if d > dist[best] {
            best = i;
        }
    }
    best
}

fn kmeans_pp_init(points: &[[f32; PATCH_DIM]], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f32; PATCH_DIM]> {
    let mut centroids = Vec::with_capacity(k);
    let total: f64 = weights.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut first = points.len() - 1;
    for (i, &w) in weights.iter().enumerate() {
        if pick < w {
            first = i;
            break;
        }
        pick -= w;
    }
    centroids.push(points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first]) as f64).collect();
    while centroids.len() < k {
        let mass: f64 = d2.iter().zip(weights).map(|(d, w)| d * w).sum();
        let chosen = if mass > 0.0 {
            let mut pick = rng.gen::<f64>() * mass;
            let mut chosen = None;
            for (i, (d, w)) in d2.iter().zip(weights).enumerate() {
                let m = d * w;
                if m > 0.0 {
                    if pick < m {
                        chosen = Some(i);
                        break;
                    }
                    pick -= m;
                }
            }
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // Only reachable when fewer distinct points than k, which the caller excludes.
            0
        };
        let c = points[chosen];
        centroids.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c) as f64);
        }
    }
    centroids
}

/// Rounds entries to integer pixel values and replaces any duplicates with
/// distinct corpus patches, so entries stay pairwise distinct.
fn snap_to_pixels(centroids: &mut [[f32; PATCH_DIM]], points: &[[f32; PATCH_DIM]]) {
    let key = |c: &[f32; PATCH_DIM]| c.map(|v| v as u8);
    let mut seen = std::collections::HashSet::new();
    let mut dupes = Vec::new();
    for (i, c) in centroids.iter_mut().enumerate() {
        for v in c.iter_mut() {
            *v = v.round().clamp(0.0, 255.0);
        }
        if !seen.insert(key(c)) {
            dupes.push(i);
        }
    }
    let mut candidates = points.iter();
    for i in dupes {
        for p in candidates.by_ref() {
            if seen.insert(key(p)) {
                centroids[i] = *p;
                break;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VideoQuality {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;

pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check_same_dims(a, b)?;
    let se: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over all 8×8 windows (stride 1) of every channel.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_same_dims(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::invalid("frame smaller than the SSIM window"));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (h, w) = (a.height, a.width);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..CHANNELS {
        // Summed-area tables of x, y, x², y², xy.
        let stride = w + 1;
        let mut tables = vec![[0f64; 5]; (h + 1) * stride];
        for r in 0..h {
            let mut row = [0f64; 5];
            for c in 0..w {
                let x = a.pixels[(r * w + c) * CHANNELS + ch] as f64;
                let y = b.pixels[(r * w + c) * CHANNELS + ch] as f64;
                let vals = [x, y, x * x, y * y, x * y];
                for i in 0..5 {
                    row[i] += vals[i];
                    tables[(r + 1) * stride + c + 1][i] = tables[r * stride + c + 1][i] + row[i];
                }
            }
        }
        for r in 0..=h - SSIM_WINDOW {
            for c in 0..=w - SSIM_WINDOW {
                let (r2, c2_) = (r + SSIM_WINDOW, c + SSIM_WINDOW);
                let mut s = [0f64; 5];
                for (i, v) in s.iter_mut().enumerate() {
                    *v = tables[r2 * stride + c2_][i] - tables[r * stride + c2_][i] - tables[r2 * stride + c][i]
                        + tables[r * stride + c][i];
                }
                let (mx, my) = (s[0] / n, s[1] / n);
                let vx = (s[2] / n - mx * mx).max(0.0);
                let vy = (s[3] / n - my * my).max(0.0);
                let cov = s[4] / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

pub fn video_quality(reference: &[Frame], generated: &[Frame]) -> Result<VideoQuality> {
    if reference.len() != generated.len() {
        return Err(Error::invalid(format!(
            "sequence lengths differ: {} reference vs {} generated frames",
            reference.len(),
            generated.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::invalid("no frames to compare"));
    }
    let mut psnrs = Vec::with_capacity(reference.len());
    let mut ssims = Vec::with_capacity(reference.len());
    for (a, b) in reference.iter().zip(generated) {
        psnrs.push(psnr(a, b)?);
        ssims.push(ssim(a, b)?);
    }
    let n = psnrs.len() as f64;
    Ok(VideoQuality {
        mean_psnr: psnrs.iter().sum::<f64>() / n,
        mean_ssim: ssims.iter().sum::<f64>() / n,
        psnr: psnrs,
        ssim: ssims,
    })
}

fn check_same_dims(a: &Frame, b: &Frame) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::invalid(format!(
            "frame dimensions differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
        let pixels = (0..FRAME_HEIGHT * FRAME_WIDTH * CHANNELS).map(|_| rng.gen()).collect();
        Frame::from_pixels(FRAME_HEIGHT, FRAME_WIDTH, pixels).unwrap()
    }

    /// Frames tiled from a fixed palette of `n` random patches.
    fn palette_corpus(n: usize, frames: usize, seed: u64) -> (Vec<[u8; PATCH_DIM]>, Vec<Frame>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let palette: Vec<[u8; PATCH_DIM]> = (0..n).map(|_| std::array::from_fn(|_| rng.gen())).collect();
        let mut out = Vec::new();
        for f in 0..frames {
            let mut frame = Frame::default();
            for pr in 0..FRAME_HEIGHT / PATCH {
                for pc in 0..FRAME_WIDTH / PATCH {
                    let p = &palette[(f * 96 + pr * 12 + pc) % n];
                    for r in 0..PATCH {
                        let dst = ((pr * PATCH + r) * FRAME_WIDTH + pc * PATCH) * CHANNELS;
                        frame.pixels[dst..dst + PATCH * CHANNELS]
                            .copy_from_slice(&p[r * PATCH * CHANNELS..(r + 1) * PATCH * CHANNELS]);
                    }
                }
            }
            out.push(frame);
        }
        (palette, out)
    }

    #[test]
    fn palette_corpus_reconstructs_exactly() {
        let (_, frames) = palette_corpus(64, 20, 1);
        let (cb, stats) = train_codebook(&frames, 64, 50, 7).unwrap();
        assert_eq!(stats.distinct_patches, 64);
        for f in &frames {
            let g = cb.encode_frame(f).unwrap();
            assert_eq!(&cb.decode_tokens(&g).unwrap(), f);
        }
    }

    #[test]
    fn objective_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Frame> = (0..6).map(|_| random_frame(&mut rng)).collect();
        let (_, stats) = train_codebook(&frames, 32, 30, 11).unwrap();
        assert!(stats.iterations >= 2);
        for w in stats.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Frame> = (0..4).map(|_| random_frame(&mut rng)).collect();
        let a = train_codebook(&frames, 16, 20, 9).unwrap().0;
        let b = train_codebook(&frames, 16, 20, 9).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_patches() {
        let (_, frames) = palette_corpus(10, 3, 2);
        assert!(matches!(train_codebook(&frames, 16, 10, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn grid_dims_and_self_recovery() {
        let (palette, _) = palette_corpus(40, 1, 4);
        let entries: Vec<f32> = palette.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
        let cb = Codebook::from_entries(entries).unwrap();
        let ids: Vec<u32> = (0..96).map(|i| (i * 7 % 40) as u32).collect();
        let grid = TokenGrid::new(8, 12, ids).unwrap();
        let frame = cb.decode_tokens(&grid).unwrap();
        let back = cb.encode_frame(&frame).unwrap();
        assert_eq!((back.h, back.w), (8, 12));
        assert_eq!(back, grid);
    }

    #[test]
    fn invalid_token_reports_position() {
        let (palette, _) = palette_corpus(8, 1, 4);
        let entries: Vec<f32> = palette.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
        let cb = Codebook::from_entries(entries).unwrap();
        let mut ids = vec![0u32; 96];
        ids[3 * 12 + 7] = 8;
        let err = cb.decode_tokens(&TokenGrid::new(8, 12, ids).unwrap()).unwrap_err();
        assert!(matches!(err, Error::InvalidToken { row: 3, col: 7, id: 8, .. }), "{err}");
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let mut entries = vec![0f32; PATCH_DIM * 3];
        entries[PATCH_DIM..2 * PATCH_DIM].fill(10.0);
        entries[2 * PATCH_DIM..].fill(20.0);
        let cb = Codebook::from_entries(entries).unwrap();
        assert_eq!(cb.nearest(&[5u8; PATCH_DIM]).0, 0);
        assert_eq!(cb.nearest(&[15u8; PATCH_DIM]).0, 1);
    }

    #[test]
    fn dimension_mismatch() {
        let cb = Codebook::from_entries(vec![0.0; PATCH_DIM * 2]).unwrap();
        let f = Frame::black(30, 48);
        assert!(matches!(cb.encode_frame(&f), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn codebook_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let entries: Vec<f32> = (0..PATCH_DIM * 5).map(|_| rng.gen_range(0..=255) as f32).collect();
        let cb = Codebook::from_entries(entries).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.bin");
        cb.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"WFCB");
        assert_eq!(bytes.len(), 24 + 5 * PATCH_DIM * 4);
        assert_eq!(Codebook::load(&path).unwrap(), cb);
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Codebook::load(&path), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn psnr_analytic_cases() {
        let black = Frame::default();
        let mut white = Frame::default();
        white.pixels.fill(255);
        assert_eq!(psnr(&black, &black).unwrap(), PSNR_CAP_DB);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        let q = video_quality(&[black.clone()], &[black.clone()]).unwrap();
        assert_eq!(q.mean_psnr, 100.0);
        assert!((q.mean_ssim - 1.0).abs() < 1e-12);
        assert!(video_quality(&[black.clone()], &[]).is_err());
        assert!(psnr(&black, &Frame::black(8, 8)).is_err());
    }

    /// Direct per-window loops, independent of the summed-area implementation.
    fn ssim_reference(a: &Frame, b: &Frame) -> f64 {
        let c1 = (0.01f64 * 255.0).powi(2);
        let c2 = (0.03f64 * 255.0).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..3 {
            for r in 0..=a.height - 8 {
                for c in 0..=a.width - 8 {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for dr in 0..8 {
                        for dc in 0..8 {
                            xs.push(a.get(r + dr, c + dc)[ch] as f64);
                            ys.push(b.get(r + dr, c + dc)[ch] as f64);
                        }
                    }
                    let mx = xs.iter().sum::<f64>() / 64.0;
                    let my = ys.iter().sum::<f64>() / 64.0;
                    let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / 64.0;
                    let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / 64.0;
                    let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / 64.0;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    fn psnr_reference(a: &Frame, b: &Frame) -> f64 {
        let mut se = 0.0;
        for i in 0..a.pixels.len() {
            se += (a.pixels[i] as f64 - b.pixels[i] as f64).powi(2);
        }
        10.0 * (255.0f64.powi(2) / (se / a.pixels.len() as f64)).log10()
    }

    #[test]
    fn quality_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            let a = random_frame(&mut rng);
            let mut b = a.clone();
            for v in b.pixels.iter_mut() {
                *v = v.saturating_add(rng.gen_range(0..40));
            }
            assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-9);
            assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            assert!((psnr(&a, &b).unwrap() - psnr_reference(&a, &b)).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn encode_decode_identity_on_grids(ids in proptest::collection::vec(0u32..50, 96)) {
                let (palette, _) = palette_corpus(50, 1, 77);
                let entries: Vec<f32> = palette.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
                let cb = Codebook::from_entries(entries).unwrap();
                let g = TokenGrid::new(8, 12, ids).unwrap();
                prop_assert_eq!(cb.encode_frame(&cb.decode_tokens(&g).unwrap()).unwrap(), g);
            }
        }
    }

    #[test]
    fn padding_keeps_ids_and_distinctness() {
        let base = Codebook::from_entries((0..4 * PATCH_DIM).map(|i| (i / PATCH_DIM * 60) as f32).collect()).unwrap();
        let padded = pad_codebook(&base, 40, 3).unwrap();
        assert_eq!(padded.len(), 40);
        for i in 0..4 {
            assert_eq!(padded.entry(i), base.entry(i));
        }
        let set: std::collections::HashSet<Vec<u32>> =
            (0..40).map(|i| padded.entry(i).iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(set.len(), 40);
        assert_eq!(pad_codebook(&base, 40, 3).unwrap(), padded);
        assert!(pad_codebook(&padded, 4, 3).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = TokenGrid::new(8, 12, (0..96).map(|_| rng.gen_range(0..40)).collect()).unwrap();
        assert_eq!(padded.encode_frame(&padded.decode_tokens(&g).unwrap()).unwrap(), g);
    }
}
