//! Wavefront schedules, sequence layouts and visibility masks.

use std::fmt;

use serde::Serialize;

use crate::action_codec::ACTION_BLOCK_LEN;
use crate::error::{Error, Result};
use crate::model::{MaskRegime, VisibilityMask};

/// Anti-diagonal grouping of a token grid: wavefront `k` holds every `(i, j)`
/// with `i + j = k`, ascending in `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WavefrontSchedule {
    pub h: usize,
    pub w: usize,
    pub wavefronts: Vec<Vec<(usize, usize)>>,
}

impl WavefrontSchedule {
    pub fn iterations(&self) -> usize {
        self.wavefronts.len()
    }
}

pub fn build_schedule(h: usize, w: usize) -> Result<WavefrontSchedule> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("grid must be at least 1x1, got {h}x{w}")));
    }
    let wavefronts = (0..h + w - 1)
        .map(|k| {
            let lo = k.saturating_sub(w - 1);
            let hi = k.min(h - 1);
            (lo..=hi).map(|i| (i, k - i)).collect()
        })
        .collect();
    Ok(WavefrontSchedule { h, w, wavefronts })
}

/// Exact non-negative rational in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Sequential steps over parallel steps for one frame: `h·w / (h+w−1)`.
pub fn speedup_ratio(h: usize, w: usize) -> Result<Ratio> {
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("grid must be at least 1x1, got {h}x{w}")));
    }
    Ok(Ratio::new((h * w) as u64, (h + w - 1) as u64))
}

/// What a row of an interleaved sequence holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowKind {
    Image { frame: usize, i: usize, j: usize },
    Action { frame: usize, slot: usize },
    /// Row-start query: token `(i−1, 0)` placed at the raster index of
    /// `(i−1, w−1)`, predicting `(i, 0)`.
    RowStart { frame: usize, i: usize },
}

/// Frame geometry of an interleaved episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FrameLayout {
    pub h: usize,
    pub w: usize,
}

impl FrameLayout {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("grid must be at least 1x1, got {h}x{w}")));
        }
        Ok(Self { h, w })
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.h * self.w
    }

    pub fn pair_len(&self) -> usize {
        self.tokens_per_frame() + ACTION_BLOCK_LEN
    }

    /// Raster (position) index of a row.
    pub fn position(&self, row: RowKind) -> usize {
        match row {
            RowKind::Image { frame, i, j } => frame * self.pair_len() + i * self.w + j,
            RowKind::Action { frame, slot } => frame * self.pair_len() + self.tokens_per_frame() + slot,
            RowKind::RowStart { frame, i } => frame * self.pair_len() + (i - 1) * self.w + self.w - 1,
        }
    }

    /// Inverse of [`position`](Self::position) for regular rows.
    pub fn row_at(&self, position: usize) -> RowKind {
        let frame = position / self.pair_len();
        let r = position % self.pair_len();
        if r < self.tokens_per_frame() {
            RowKind::Image {
                frame,
                i: r / self.w,
                j: r % self.w,
            }
        } else {
            RowKind::Action {
                frame,
                slot: r - self.tokens_per_frame(),
            }
        }
    }

    fn check(&self, row: RowKind) -> Result<()> {
        let ok = match row {
            RowKind::Image { i, j, .. } => i < self.h && j < self.w,
            RowKind::Action { slot, .. } => slot < ACTION_BLOCK_LEN,
            RowKind::RowStart { i, .. } => i >= 1 && i < self.h,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{row:?} lies outside a {}x{} frame layout", self.h, self.w)))
        }
    }

    /// Whether the query row `q` may attend to `k` under `regime`. Row-start
    /// queries are never visible to other rows.
    pub fn sees(&self, regime: MaskRegime, q: RowKind, k: RowKind) -> bool {
        if q == k {
            return true;
        }
        if matches!(k, RowKind::RowStart { .. }) {
            return false;
        }
        let (qp, kp) = (self.position(q), self.position(k));
        match (regime, q) {
            (MaskRegime::Causal, RowKind::RowStart { .. }) | (MaskRegime::Wavefront, RowKind::RowStart { .. }) => {
                self.sees_before_wavefront(q, k, |d| d + 1)
            }
            (MaskRegime::Causal, _) => kp < qp,
            (MaskRegime::Wavefront, RowKind::Image { .. }) => self.sees_before_wavefront(q, k, |d| d),
            (MaskRegime::Wavefront, RowKind::Action { .. }) => kp < qp,
        }
    }

    /// History plus current-frame cells whose wavefront is below `limit(d)`,
    /// where `d` is the query's own wavefront (row starts use the column-0
    /// cell above).
    fn sees_before_wavefront(&self, q: RowKind, k: RowKind, limit: impl Fn(usize) -> usize) -> bool {
        let (frame, d) = match q {
            RowKind::Image { frame, i, j } => (frame, i + j),
            RowKind::RowStart { frame, i } => (frame, i - 1),
            RowKind::Action { .. } => unreachable!("action rows are causal"),
        };
        let base = frame * self.pair_len();
        let kp = self.position(k);
        if kp < base {
            return true;
        }
        match k {
            RowKind::Image { frame: f, i, j } if f == frame => i + j < limit(d),
            _ => false,
        }
    }
}

/// Positions an image target may condition on under the wavefront regime:
/// all earlier frames and action blocks plus same-frame cells on earlier
/// wavefronts. Action targets see the entire preceding sequence.
pub fn wavefront_visibility(layout: &FrameLayout, target: RowKind) -> Result<Vec<usize>> {
    layout.check(target)?;
    let tp = layout.position(target);
    Ok((0..tp)
        .filter(|&p| match target {
            RowKind::Image { frame, i, j } => {
                let base = frame * layout.pair_len();
                p < base
                    || match layout.row_at(p) {
                        RowKind::Image { i: a, j: b, .. } => a + b < i + j,
                        _ => false,
                    }
            }
            _ => true,
        })
        .collect())
}

/// Rows of a training or teacher-forcing pass over `frames` interleaved
/// pairs, optionally truncated after `len` regular rows, followed by the
/// row-start queries when `row_starts` is set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub frame: FrameLayout,
    pub rows: Vec<RowKind>,
}

impl SequenceLayout {
    pub fn new(frame: FrameLayout, regular_rows: usize, row_starts: bool) -> Self {
        let mut rows: Vec<RowKind> = (0..regular_rows).map(|p| frame.row_at(p)).collect();
        if row_starts {
            let frames = regular_rows.div_ceil(frame.pair_len());
            for f in 0..frames {
                for i in 1..frame.h {
                    // Only when the target row start itself is part of the sequence.
                    if frame.position(RowKind::Image { frame: f, i, j: 0 }) < regular_rows {
                        rows.push(RowKind::RowStart { frame: f, i });
                    }
                }
            }
        }
        Self { frame, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn positions(&self) -> Vec<u32> {
        self.rows.iter().map(|&r| self.frame.position(r) as u32).collect()
    }

    /// Input tokens for each row given the regular token stream.
    pub fn tokens(&self, stream: &[u32]) -> Vec<u32> {
        self.rows
            .iter()
            .map(|&r| match r {
                RowKind::RowStart { frame, i } => {
                    stream[self.frame.position(RowKind::Image { frame, i: i - 1, j: 0 })]
                }
                _ => stream[self.frame.position(r)],
            })
            .collect()
    }

    /// Next-token targets: regular rows predict the following stream token,
    /// row starts predict `(i, 0)`.
    pub fn targets(&self, stream: &[u32]) -> Vec<Option<u32>> {
        self.rows
            .iter()
            .map(|&r| match r {
                RowKind::RowStart { frame, i } => Some(stream[self.frame.position(RowKind::Image { frame, i, j: 0 })]),
                _ => stream.get(self.frame.position(r) + 1).copied(),
            })
            .collect()
    }

    pub fn mask(&self, regime: MaskRegime) -> VisibilityMask {
        let n = self.rows.len();
        let mut m = VisibilityMask::empty(n);
        for (q, &rq) in self.rows.iter().enumerate() {
            for (k, &rk) in self.rows.iter().enumerate() {
                if self.frame.sees(regime, rq, rk) {
                    m.set(q, k, true);
                }
            }
        }
        m
    }
}
