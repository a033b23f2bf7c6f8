//! Exact inverse dynamics for rendered GridCraft frames.

use super::render::{
    PaletteColor, AGENT_CROP_COL, AGENT_CROP_ROW, CROP_COLS, CROP_ROWS, FINE_COLS, FLAG_COL, HEADER_ROWS,
    PITCH_COARSE_COL, TILE_PX, YAW_COARSE_COL,
};
use super::world::{displacement, octant, wrap_degrees, Tile, OCTANT_DIRS, PITCH_LIMIT};
use crate::action_codec::{CameraBinning, Modifier, Move, Strafe};
use crate::error::{Error, Result};
use crate::eval::{InverseDynamics, RawActionPrediction};
use crate::visual_codec::{Frame, FRAME_HEIGHT, FRAME_WIDTH};

/// Largest per-axis agent displacement in one step.
pub const MAX_SHIFT: i32 = 2;

#[derive(Clone, Debug, Default)]
pub struct OracleIdm {
    pub camera: CameraBinning,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedFrame {
    pub yaw: i32,
    pub pitch: i32,
    pub jumped: bool,
    pub dropped: bool,
    pub sneaked: bool,
    /// Tile kind per crop cell; the agent cell reads as floor.
    pub tiles: Vec<Tile>,
}

fn single_marker(frame: &Frame, row: usize, cols: std::ops::Range<usize>, color: PaletteColor) -> Result<usize> {
    let hits: Vec<usize> = cols
        .clone()
        .filter(|&c| PaletteColor::classify(frame.get(row, c)).0 == color)
        .collect();
    match hits.as_slice() {
        [c] => Ok(*c - cols.start),
        [] => Err(Error::UnparseableFrame(format!("no {color:?} marker in row {row} cols {cols:?}"))),
        _ => Err(Error::UnparseableFrame(format!(
            "{} {color:?} markers in row {row} cols {cols:?}",
            hits.len()
        ))),
    }
}

pub fn parse_frame(frame: &Frame) -> Result<ParsedFrame> {
    if (frame.height, frame.width) != (FRAME_HEIGHT, FRAME_WIDTH) {
        return Err(Error::invalid(format!("frame must be {FRAME_HEIGHT}x{FRAME_WIDTH}")));
    }
    let yaw_fine = single_marker(frame, 0, 0..FINE_COLS, PaletteColor::Yellow)?;
    let yaw_coarse = single_marker(frame, 0, YAW_COARSE_COL..YAW_COARSE_COL + 18, PaletteColor::Yellow)?;
    let pitch_fine = single_marker(frame, 1, 0..FINE_COLS, PaletteColor::Cyan)?;
    let pitch_coarse = single_marker(frame, 1, PITCH_COARSE_COL..PITCH_COARSE_COL + 7, PaletteColor::Cyan)?;
    let yaw = (yaw_coarse * FINE_COLS + yaw_fine) as i32;
    let pitch = (pitch_coarse * FINE_COLS + pitch_fine) as i32 - PITCH_LIMIT;
    if yaw >= 360 || pitch > PITCH_LIMIT {
        return Err(Error::UnparseableFrame(format!("pose markers decode to yaw {yaw}, pitch {pitch}")));
    }
    let lit = |r: usize, c: usize| PaletteColor::classify(frame.get(r, c)).0 == PaletteColor::White;

    let mut tiles = Vec::with_capacity(CROP_ROWS * CROP_COLS);
    for r in 0..CROP_ROWS {
        for c in 0..CROP_COLS {
            let mut sum = [0u32; 3];
            for dr in 0..TILE_PX {
                for dc in 0..TILE_PX {
                    let p = frame.get(HEADER_ROWS + r * TILE_PX + dr, c * TILE_PX + dc);
                    for i in 0..3 {
                        sum[i] += p[i] as u32;
                    }
                }
            }
            let n = (TILE_PX * TILE_PX) as u32;
            let mean = sum.map(|v| ((v + n / 2) / n) as u8);
            let tile = match PaletteColor::classify(mean).0 {
                PaletteColor::Wall => Tile::Wall,
                PaletteColor::Tree => Tile::Tree,
                PaletteColor::Ore => Tile::Ore,
                _ => Tile::Floor,
            };
            tiles.push(tile);
        }
    }
    Ok(ParsedFrame {
        yaw,
        pitch,
        jumped: lit(0, FLAG_COL + 2),
        dropped: lit(0, FLAG_COL + 3),
        sneaked: lit(1, FLAG_COL),
        tiles,
    })
}

/// Agent displacement minimizing crop disagreement, or `None` if the minimum
/// is not unique.
pub fn find_shift(prev: &ParsedFrame, next: &ParsedFrame) -> Option<(i32, i32)> {
    let mut best = usize::MAX;
    let mut arg = None;
    let mut unique = false;
    for dy in -MAX_SHIFT..=MAX_SHIFT {
        for dx in -MAX_SHIFT..=MAX_SHIFT {
            let mut miss = 0;
            for r in 0..CROP_ROWS as i32 {
                let pr = r + dy;
                if !(0..CROP_ROWS as i32).contains(&pr) {
                    continue;
                }
                for c in 0..CROP_COLS as i32 {
                    let pc = c + dx;
                    if !(0..CROP_COLS as i32).contains(&pc) {
                        continue;
                    }
                    let a = prev.tiles[(pr as usize) * CROP_COLS + pc as usize];
                    let b = next.tiles[(r as usize) * CROP_COLS + c as usize];
                    miss += (a != b) as usize;
                }
            }
            if miss < best {
                best = miss;
                arg = Some((dx, dy));
                unique = true;
            } else if miss == best {
                unique = false;
            }
        }
    }
    if unique {
        arg
    } else {
        None
    }
}

impl OracleIdm {
    pub fn new(camera: CameraBinning) -> Self {
        Self { camera }
    }

    pub fn infer_parsed(&self, prev: &ParsedFrame, next: &ParsedFrame) -> Result<RawActionPrediction> {
        let mut out = RawActionPrediction {
            jump: next.jumped,
            drop: next.dropped,
            sneak: next.sneaked,
            camera_dx: wrap_degrees(next.yaw - prev.yaw) as f64,
            camera_dy: (next.pitch - prev.pitch) as f64,
            ..Default::default()
        };

        let oct = octant(next.yaw);
        let shift = find_shift(prev, next);
        if let Some((dx, dy)) = shift {
            if (dx, dy) != (0, 0) {
                'search: for m in Move::ALL {
                    for s in Strafe::ALL {
                        for sprint in [false, true] {
                            if displacement(oct, m, s, sprint) == (dx, dy) {
                                out.forward = m == Move::Forward;
                                out.backward = m == Move::Backward;
                                out.left = s == Strafe::Left;
                                out.right = s == Strafe::Right;
                                out.sprint = sprint && m == Move::Forward && s == Strafe::None;
                                break 'search;
                            }
                        }
                    }
                }
            }
        }

        // Front tile before and after, in each frame's own crop coordinates.
        if let Some((dx, dy)) = shift {
            let d = OCTANT_DIRS[oct];
            let (nr, nc) = (AGENT_CROP_ROW as i32 + d.1, AGENT_CROP_COL as i32 + d.0);
            let (pr, pc) = (nr + dy, nc + dx);
            if (0..CROP_ROWS as i32).contains(&pr) && (0..CROP_COLS as i32).contains(&pc) {
                let before = prev.tiles[pr as usize * CROP_COLS + pc as usize];
                let after = next.tiles[nr as usize * CROP_COLS + nc as usize];
                out.attack = before != Tile::Floor && after == Tile::Floor;
                out.use_item = before == Tile::Floor && after == Tile::Wall;
            }
        }
        Ok(out)
    }
}

impl InverseDynamics for OracleIdm {
    fn infer_raw(&self, prev: &Frame, next: &Frame) -> Result<RawActionPrediction> {
        let p = parse_frame(prev)?;
        let n = parse_frame(next)?;
        self.infer_parsed(&p, &n)
    }

    fn camera(&self) -> &CameraBinning {
        &self.camera
    }
}

/// Modifier implied by a raw prediction, for callers that bypass conflict resolution.
pub fn modifier_of(raw: &RawActionPrediction) -> Modifier {
    match (raw.sprint, raw.sneak) {
        (true, false) => Modifier::Sprint,
        (false, true) => Modifier::Sneak,
        _ => Modifier::None,
    }
}

#[cfg(test)]
mod tests {
    use super::super::render::render;
    use super::super::world::{generate_world, transition, EventFlags, WorldState, MAP_SIZE};
    use super::*;
    use crate::action_codec::ActionRecord;

    /// A state in the middle of a busy map, facing north, level pitch.
    fn busy_state() -> WorldState {
        let mut s = generate_world(17);
        s.agent_x = 15;
        s.agent_y = 15;
        for (x, y) in [(15, 15), (15, 14), (15, 13), (16, 14), (14, 14), (16, 16), (14, 16), (15, 16), (15, 17), (16, 15), (14, 15), (13, 15), (17, 15), (16, 13), (14, 13), (17, 17), (13, 17), (17, 13), (13, 13)] {
            s.tiles[y * MAP_SIZE + x] = Tile::Floor;
        }
        s
    }

    #[test]
    fn identical_frames_give_noop() {
        let s = busy_state();
        let f = render(&s, &EventFlags::default());
        let idm = OracleIdm::default();
        let a = idm.infer(&f, &f).unwrap();
        assert!(a.same_discrete(&ActionRecord::noop()));
        assert_eq!(idm.camera.quantize(a.camera_dx).unwrap(), 5);
        assert_eq!(idm.camera.quantize(a.camera_dy).unwrap(), 5);
    }

    #[test]
    fn recovers_single_step() {
        let s = busy_state();
        let idm = OracleIdm::default();
        let a = ActionRecord {
            movement: Move::Forward,
            modifier: Modifier::Sprint,
            jump: true,
            camera_dx: 6.0,
            ..Default::default()
        };
        let t = transition(&s, &a, &idm.camera);
        let got = idm
            .infer(&render(&s, &EventFlags::default()), &render(&t.state, &t.flags))
            .unwrap();
        assert!(got.same_discrete(&t.executed), "{got:?} vs {:?}", t.executed);
        assert_eq!(idm.camera.quantize(got.camera_dx).unwrap(), idm.camera.quantize(6.0).unwrap());
    }

    #[test]
    fn blank_header_is_unparseable() {
        let s = busy_state();
        let mut f = render(&s, &EventFlags::default());
        for c in 0..48 {
            f.set(0, c, [0, 0, 0]);
        }
        let idm = OracleIdm::default();
        assert!(matches!(idm.infer(&f, &f), Err(Error::UnparseableFrame(_))));
    }
}
