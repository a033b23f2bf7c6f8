use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action_codec::{ActionRecord, CameraBinning, Modifier, Move, Strafe};

pub const MAP_SIZE: usize = 32;
pub const PITCH_LIMIT: i32 = 60;

/// SplitMix64 (Steele, Lea & Flood). Constants are the reference ones.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
    pub const MIX1: u64 = 0xBF58_476D_1CE4_E5B9;
    pub const MIX2: u64 = 0x94D0_49BB_1331_11EB;

    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(Self::GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(Self::MIX1);
        z = (z ^ (z >> 27)).wrapping_mul(Self::MIX2);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tile {
    Floor,
    Wall,
    Tree,
    Ore,
}

impl Tile {
    pub const ALL: [Tile; 4] = [Tile::Floor, Tile::Wall, Tile::Tree, Tile::Ore];

    fn breakable(self) -> bool {
        matches!(self, Tile::Wall | Tile::Tree | Tile::Ore)
    }
}

/// Effects of one transition that actually happened.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventFlags {
    pub attacked: bool,
    pub used: bool,
    pub jumped: bool,
    pub dropped: bool,
    pub sneaked: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    pub tiles: Vec<Tile>,
    pub agent_x: i32,
    pub agent_y: i32,
    /// Degrees, clockwise from north, in [0, 360).
    pub yaw: i32,
    /// Degrees in [-60, 60].
    pub pitch: i32,
    pub seed: u64,
}

/// Unit steps for the 8 compass octants; octant 0 faces −y, clockwise.
pub const OCTANT_DIRS: [(i32, i32); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

/// Octant nearest to `yaw` (22.5° sectors centered on multiples of 45°).
pub fn octant(yaw: i32) -> usize {
    ((yaw.rem_euclid(360) * 2 + 45) / 90) as usize % 8
}

/// Agent displacement for a movement request in a given octant, before blocking.
///
/// Sprint doubles the step only for a pure forward move, so every
/// (movement, strafe, sprint) combination maps to a distinct displacement
/// within ±2 tiles on both axes.
pub fn displacement(octant: usize, movement: Move, strafe: Strafe, sprint: bool) -> (i32, i32) {
    let d = OCTANT_DIRS[octant % 8];
    let left = OCTANT_DIRS[(octant + 6) % 8];
    let m = match movement {
        Move::Forward => 1,
        Move::Backward => -1,
        Move::None => 0,
    };
    let s = match strafe {
        Strafe::Left => 1,
        Strafe::Right => -1,
        Strafe::None => 0,
    };
    let len = if sprint && movement == Move::Forward && strafe == Strafe::None {
        2
    } else {
        1
    };
    (m * len * d.0 + s * left.0, m * len * d.1 + s * left.1)
}

pub fn wrap_degrees(delta: i32) -> i32 {
    (delta + 180).rem_euclid(360) - 180
}

impl WorldState {
    pub fn tile(&self, x: i32, y: i32) -> Option<Tile> {
        if (0..MAP_SIZE as i32).contains(&x) && (0..MAP_SIZE as i32).contains(&y) {
            Some(self.tiles[y as usize * MAP_SIZE + x as usize])
        } else {
            None
        }
    }

    fn set_tile(&mut self, x: i32, y: i32, t: Tile) {
        self.tiles[y as usize * MAP_SIZE + x as usize] = t;
    }

    fn is_floor(&self, x: i32, y: i32) -> bool {
        self.tile(x, y) == Some(Tile::Floor)
    }

    fn is_border(x: i32, y: i32) -> bool {
        let last = MAP_SIZE as i32 - 1;
        x <= 0 || y <= 0 || x >= last || y >= last
    }

    pub fn tile_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for t in &self.tiles {
            c[*t as usize] += 1;
        }
        c
    }

    /// SHA-256 of the tile map, truncated to 64 bits.
    pub fn map_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tiles {
            h.update([*t as u8]);
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    pub fn validate(&self) -> bool {
        let last = MAP_SIZE as i32 - 1;
        let border_ok = (0..MAP_SIZE as i32).all(|i| {
            [(i, 0), (i, last), (0, i), (last, i)]
                .iter()
                .all(|&(x, y)| self.tile(x, y) == Some(Tile::Wall))
        });
        border_ok
            && self.is_floor(self.agent_x, self.agent_y)
            && (0..360).contains(&self.yaw)
            && (-PITCH_LIMIT..=PITCH_LIMIT).contains(&self.pitch)
    }
}

pub const WALL_P: f64 = 0.15;
pub const TREE_P: f64 = 0.05;
pub const ORE_P: f64 = 0.03;

pub fn generate_world(seed: u64) -> WorldState {
    let mut rng = SplitMix64::new(seed);
    let mut tiles = vec![Tile::Wall; MAP_SIZE * MAP_SIZE];
    for y in 1..MAP_SIZE - 1 {
        for x in 1..MAP_SIZE - 1 {
            let u = rng.next_f64();
            tiles[y * MAP_SIZE + x] = if u < WALL_P {
                Tile::Wall
            } else if u < WALL_P + TREE_P {
                Tile::Tree
            } else if u < WALL_P + TREE_P + ORE_P {
                Tile::Ore
            } else {
                Tile::Floor
            };
        }
    }
    // An all-blocked interior is astronomically unlikely; fall back to the center.
    let first = tiles.iter().position(|&t| t == Tile::Floor).unwrap_or_else(|| {
        let c = MAP_SIZE / 2 * MAP_SIZE + MAP_SIZE / 2;
        tiles[c] = Tile::Floor;
        c
    });
    WorldState {
        tiles,
        agent_x: (first % MAP_SIZE) as i32,
        agent_y: (first / MAP_SIZE) as i32,
        yaw: 0,
        pitch: 0,
        seed,
    }
}

/// Result of one transition: the new state, the event flags, and the action
/// as executed (blocked moves, no-op attacks and clamped pitch are reflected).
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: WorldState,
    pub flags: EventFlags,
    pub executed: ActionRecord,
}

pub fn step(s: &WorldState, a: &ActionRecord) -> (WorldState, EventFlags) {
    let t = transition(s, a, &CameraBinning::default());
    (t.state, t.flags)
}

pub fn transition(s: &WorldState, a: &ActionRecord, camera: &CameraBinning) -> Transition {
    let mut next = s.clone();
    let mut flags = EventFlags::default();
    let mut executed = ActionRecord {
        jump: a.jump,
        drop: a.drop,
        ..Default::default()
    };

    // Camera: deltas snap to bin centers; non-finite input counts as no movement.
    let snap = |d: f64| -> i32 {
        camera
            .quantize(d)
            .and_then(|b| camera.dequantize(b))
            .map(|v| v.round() as i32)
            .unwrap_or(0)
    };
    next.yaw = (s.yaw + snap(a.camera_dx)).rem_euclid(360);
    next.pitch = (s.pitch + snap(a.camera_dy)).clamp(-PITCH_LIMIT, PITCH_LIMIT);
    executed.camera_dx = wrap_degrees(next.yaw - s.yaw) as f64;
    executed.camera_dy = (next.pitch - s.pitch) as f64;

    // Movement along the new heading.
    let oct = octant(next.yaw);
    let sprint = a.modifier == Modifier::Sprint;
    if a.movement != Move::None || a.strafe != Strafe::None {
        let (dx, dy) = displacement(oct, a.movement, a.strafe, sprint);
        let (tx, ty) = (s.agent_x + dx, s.agent_y + dy);
        let long = (dx.abs().max(dy.abs())) == 2 && sprint && a.strafe == Strafe::None;
        if long {
            let (hx, hy) = (s.agent_x + dx / 2, s.agent_y + dy / 2);
            if next.is_floor(hx, hy) && next.is_floor(tx, ty) {
                next.agent_x = tx;
                next.agent_y = ty;
                executed.movement = a.movement;
                executed.modifier = Modifier::Sprint;
            } else if next.is_floor(hx, hy) {
                next.agent_x = hx;
                next.agent_y = hy;
                executed.movement = a.movement;
            }
        } else if next.is_floor(tx, ty) {
            next.agent_x = tx;
            next.agent_y = ty;
            executed.movement = a.movement;
            executed.strafe = a.strafe;
        }
    }
    if a.modifier == Modifier::Sneak {
        flags.sneaked = true;
        executed.modifier = Modifier::Sneak;
    }

    // Attack, then use, on the tile in front. Use only builds on a tile that
    // was floor before the attack phase, so the two never combine in one step.
    let d = OCTANT_DIRS[oct];
    let (fx, fy) = (next.agent_x + d.0, next.agent_y + d.1);
    let front = next.tile(fx, fy);
    if a.attack && !WorldState::is_border(fx, fy) && front.is_some_and(Tile::breakable) {
        next.set_tile(fx, fy, Tile::Floor);
        flags.attacked = true;
        executed.attack = true;
    } else if a.use_item && front == Some(Tile::Floor) {
        next.set_tile(fx, fy, Tile::Wall);
        flags.used = true;
        executed.use_item = true;
    }

    flags.jumped = a.jump;
    flags.dropped = a.drop;
    Transition {
        state: next,
        flags,
        executed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Open 32×32 arena with a single wall ring, agent in the middle.
    pub(crate) fn open_state() -> WorldState {
        let mut s = generate_world(1);
        for y in 1..MAP_SIZE - 1 {
            for x in 1..MAP_SIZE - 1 {
                s.tiles[y * MAP_SIZE + x] = Tile::Floor;
            }
        }
        s.agent_x = 16;
        s.agent_y = 16;
        s
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 0.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn generation_is_deterministic_with_wall_border() {
        for seed in [0u64, 1, 42, 9_999, u64::MAX] {
            let a = generate_world(seed);
            assert_eq!(a, generate_world(seed));
            assert!(a.validate(), "seed {seed}");
            assert_eq!((a.yaw, a.pitch), (0, 0));
            let first = a.tiles.iter().position(|&t| t == Tile::Floor).unwrap();
            assert_eq!((a.agent_x as usize, a.agent_y as usize), (first % MAP_SIZE, first / MAP_SIZE));
        }
    }

    #[test]
    fn seed_42_golden_map() {
        let s = generate_world(42);
        assert_eq!(s.map_hash(), 0x0fa1_6f08_d765_8525, "hash {:016x}", s.map_hash());
    }

    #[test]
    fn tile_frequencies_follow_configuration() {
        let mut counts = [0usize; 4];
        for seed in 0..200 {
            let s = generate_world(seed);
            for y in 1..MAP_SIZE - 1 {
                for x in 1..MAP_SIZE - 1 {
                    counts[s.tiles[y * MAP_SIZE + x] as usize] += 1;
                }
            }
        }
        let n: usize = counts.iter().sum();
        let frac = |t: Tile| counts[t as usize] as f64 / n as f64;
        assert!((frac(Tile::Wall) - 0.15).abs() < 0.01);
        assert!((frac(Tile::Tree) - 0.05).abs() < 0.01);
        assert!((frac(Tile::Ore) - 0.03).abs() < 0.01);
    }

    #[test]
    fn octants() {
        assert_eq!(octant(0), 0);
        assert_eq!(octant(22), 0);
        assert_eq!(octant(23), 1);
        assert_eq!(octant(90), 2);
        assert_eq!(octant(337), 7);
        assert_eq!(octant(338), 0);
        assert_eq!(octant(359), 0);
    }

    #[test]
    fn displacements_are_distinct_and_bounded() {
        for oct in 0..8 {
            let mut seen = std::collections::HashMap::new();
            for m in Move::ALL {
                for s in Strafe::ALL {
                    for sprint in [false, true] {
                        let d = displacement(oct, m, s, sprint);
                        assert!(d.0.abs() <= 2 && d.1.abs() <= 2);
                        let effective_sprint = sprint && m == Move::Forward && s == Strafe::None;
                        if let Some(prev) = seen.insert(d, (m, s, effective_sprint)) {
                            assert_eq!(prev, (m, s, effective_sprint), "octant {oct} collision at {d:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn noop_leaves_state_unchanged() {
        let s = generate_world(7);
        let (n, f) = step(&s, &ActionRecord::noop());
        assert_eq!(n, s);
        assert_eq!(f, EventFlags::default());
    }

    #[test]
    fn forward_at_yaw_zero_moves_north() {
        let s = open_state();
        let a = ActionRecord {
            movement: Move::Forward,
            ..Default::default()
        };
        let (n, _) = step(&s, &a);
        assert_eq!((n.agent_x, n.agent_y), (16, 15));
        let sprint = ActionRecord {
            modifier: Modifier::Sprint,
            ..a
        };
        let (n, _) = step(&s, &sprint);
        assert_eq!((n.agent_x, n.agent_y), (16, 14));
    }

    #[test]
    fn blocked_move_keeps_position() {
        let mut s = open_state();
        s.tiles[15 * MAP_SIZE + 16] = Tile::Wall;
        let a = ActionRecord {
            movement: Move::Forward,
            ..Default::default()
        };
        let t = transition(&s, &a, &CameraBinning::default());
        assert_eq!((t.state.agent_x, t.state.agent_y), (16, 16));
        assert_eq!(t.executed.movement, Move::None);
    }

    #[test]
    fn attack_then_use_semantics() {
        let mut s = open_state();
        s.tiles[15 * MAP_SIZE + 16] = Tile::Tree;
        let attack = ActionRecord {
            attack: true,
            use_item: true,
            ..Default::default()
        };
        let t = transition(&s, &attack, &CameraBinning::default());
        assert_eq!(t.state.tile(16, 15), Some(Tile::Floor));
        assert!(t.flags.attacked && !t.flags.used);
        assert!(t.executed.attack && !t.executed.use_item);
        let t2 = transition(&t.state, &attack, &CameraBinning::default());
        assert_eq!(t2.state.tile(16, 15), Some(Tile::Wall));
        assert!(!t2.flags.attacked && t2.flags.used);
    }

    #[test]
    fn border_is_indestructible() {
        let mut s = open_state();
        s.agent_y = 1;
        let a = ActionRecord {
            attack: true,
            ..Default::default()
        };
        let t = transition(&s, &a, &CameraBinning::default());
        assert_eq!(t.state.tile(16, 0), Some(Tile::Wall));
        assert!(!t.executed.attack);
    }

    #[test]
    fn camera_snaps_and_pitch_clamps() {
        let mut s = open_state();
        let a = ActionRecord {
            camera_dx: 2.5,
            camera_dy: 20.0,
            ..Default::default()
        };
        let t = transition(&s, &a, &CameraBinning::default());
        assert_eq!(t.state.yaw, 3);
        assert_eq!(t.state.pitch, 20);
        s.pitch = 55;
        let t = transition(&s, &a, &CameraBinning::default());
        assert_eq!(t.state.pitch, 60);
        assert_eq!(t.executed.camera_dy, 5.0);
        let back = ActionRecord {
            camera_dx: -20.0,
            ..Default::default()
        };
        let t = transition(&open_state(), &back, &CameraBinning::default());
        assert_eq!(t.state.yaw, 340);
        assert_eq!(t.executed.camera_dx, -20.0);
    }

    #[test]
    fn tile_changes_only_through_attack_or_use() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = generate_world(5);
        for _ in 0..2_000 {
            let a = ActionRecord {
                movement: Move::ALL[rng.gen_range(0..3)],
                strafe: Strafe::ALL[rng.gen_range(0..3)],
                modifier: Modifier::ALL[rng.gen_range(0..3)],
                attack: rng.gen_bool(0.3),
                use_item: rng.gen_bool(0.3),
                camera_dx: rng.gen_range(-25.0..25.0),
                camera_dy: rng.gen_range(-25.0..25.0),
                ..Default::default()
            };
            let t = transition(&s, &a, &CameraBinning::default());
            let changed = s.tiles.iter().zip(&t.state.tiles).filter(|(x, y)| x != y).count();
            let events = t.flags.attacked as usize + t.flags.used as usize;
            assert_eq!(changed, events);
            assert!(t.state.validate());
            s = t.state;
        }
    }
}
