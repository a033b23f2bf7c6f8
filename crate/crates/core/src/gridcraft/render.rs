//! Frame layout:
//!
//! | rows  | content |
//! |-------|---------|
//! | 0     | yaw fine marker at col `yaw % 20` (cols 0–19), coarse marker at col `20 + yaw / 20` (cols 20–37); event flags attacked/used/jumped/dropped at cols 44–47 |
//! | 1     | pitch fine marker at col `(pitch + 60) % 20` (cols 0–19), coarse marker at col `20 + (pitch + 60) / 20` (cols 20–26); sneaked flag at col 44 |
//! | 2–31  | 15×24-tile crop centered on the agent, 2×2 px per tile, agent drawn as a red 2×2 block at crop tile (7, 12) |
//!
//! Markers are yellow (yaw) and cyan (pitch), flags white, everything else in
//! the header black. Tiles outside the map render as wall.

use super::world::{EventFlags, Tile, WorldState, PITCH_LIMIT};
use crate::visual_codec::{Frame, FRAME_HEIGHT, FRAME_WIDTH};

pub const HEADER_ROWS: usize = 2;
pub const TILE_PX: usize = 2;
pub const CROP_ROWS: usize = 15;
pub const CROP_COLS: usize = 24;
pub const AGENT_CROP_ROW: usize = 7;
pub const AGENT_CROP_COL: usize = 12;

pub const FINE_COLS: usize = 20;
pub const YAW_COARSE_COL: usize = 20;
pub const PITCH_COARSE_COL: usize = 20;
pub const FLAG_COL: usize = 44;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PaletteColor {
    Black,
    Floor,
    Wall,
    Tree,
    Ore,
    Agent,
    Yellow,
    Cyan,
    White,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 9] = [
        PaletteColor::Black,
        PaletteColor::Floor,
        PaletteColor::Wall,
        PaletteColor::Tree,
        PaletteColor::Ore,
        PaletteColor::Agent,
        PaletteColor::Yellow,
        PaletteColor::Cyan,
        PaletteColor::White,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            PaletteColor::Black => [0, 0, 0],
            PaletteColor::Floor => [160, 130, 90],
            PaletteColor::Wall => [70, 70, 80],
            PaletteColor::Tree => [30, 140, 50],
            PaletteColor::Ore => [70, 110, 220],
            PaletteColor::Agent => [230, 30, 30],
            PaletteColor::Yellow => [250, 220, 40],
            PaletteColor::Cyan => [40, 220, 230],
            PaletteColor::White => [255, 255, 255],
        }
    }

    pub fn of_tile(t: Tile) -> Self {
        match t {
            Tile::Floor => PaletteColor::Floor,
            Tile::Wall => PaletteColor::Wall,
            Tile::Tree => PaletteColor::Tree,
            Tile::Ore => PaletteColor::Ore,
        }
    }

    /// Nearest palette color by squared RGB distance (ties to the earlier entry).
    pub fn classify(rgb: [u8; 3]) -> (Self, u32) {
        let mut best = (PaletteColor::Black, u32::MAX);
        for c in Self::ALL {
            let p = c.rgb();
            let d: u32 = (0..3).map(|i| (rgb[i] as i32 - p[i] as i32).pow(2) as u32).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }
}

pub fn yaw_marker_cols(yaw: i32) -> (usize, usize) {
    let y = yaw.rem_euclid(360) as usize;
    (y % FINE_COLS, YAW_COARSE_COL + y / FINE_COLS)
}

pub fn pitch_marker_cols(pitch: i32) -> (usize, usize) {
    let p = (pitch.clamp(-PITCH_LIMIT, PITCH_LIMIT) + PITCH_LIMIT) as usize;
    (p % FINE_COLS, PITCH_COARSE_COL + p / FINE_COLS)
}

pub fn render(s: &WorldState, flags: &EventFlags) -> Frame {
    let mut f = Frame::black(FRAME_HEIGHT, FRAME_WIDTH);
    let yellow = PaletteColor::Yellow.rgb();
    let cyan = PaletteColor::Cyan.rgb();
    let white = PaletteColor::White.rgb();

    let (fine, coarse) = yaw_marker_cols(s.yaw);
    f.set(0, fine, yellow);
    f.set(0, coarse, yellow);
    for (i, on) in [flags.attacked, flags.used, flags.jumped, flags.dropped].into_iter().enumerate() {
        if on {
            f.set(0, FLAG_COL + i, white);
        }
    }
    let (fine, coarse) = pitch_marker_cols(s.pitch);
    f.set(1, fine, cyan);
    f.set(1, coarse, cyan);
    if flags.sneaked {
        f.set(1, FLAG_COL, white);
    }

    for r in 0..CROP_ROWS {
        for c in 0..CROP_COLS {
            let wx = s.agent_x - AGENT_CROP_COL as i32 + c as i32;
            let wy = s.agent_y - AGENT_CROP_ROW as i32 + r as i32;
            let color = if (r, c) == (AGENT_CROP_ROW, AGENT_CROP_COL) {
                PaletteColor::Agent
            } else {
                PaletteColor::of_tile(s.tile(wx, wy).unwrap_or(Tile::Wall))
            };
            let rgb = color.rgb();
            for dr in 0..TILE_PX {
                for dc in 0..TILE_PX {
                    f.set(HEADER_ROWS + r * TILE_PX + dr, c * TILE_PX + dc, rgb);
                }
            }
        }
    }
    f
}
