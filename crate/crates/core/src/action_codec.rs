//! Structured player actions and their fixed-length token blocks.
//!
//! An action is seven exclusive discrete classes plus a two-axis camera
//! delta. It is encoded as an 11-token block
//! `[aBOS, slot1..slot7, camera_x, camera_y, aEOS]`, where each position
//! draws from its own contiguous id range. Per-slot null ids are distinct, so
//! any single id tells which slot it belongs to.

use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Number of tokens in one encoded action.
pub const ACTION_BLOCK_LEN: usize = 11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Move {
    Forward,
    Backward,
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strafe {
    Left,
    Right,
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modifier {
    Sprint,
    Sneak,
    #[default]
    None,
}

impl Move {
    pub const ALL: [Move; 3] = [Move::Forward, Move::Backward, Move::None];
}
impl Strafe {
    pub const ALL: [Strafe; 3] = [Strafe::Left, Strafe::Right, Strafe::None];
}
impl Modifier {
    pub const ALL: [Modifier; 3] = [Modifier::Sprint, Modifier::Sneak, Modifier::None];
}

/// One player action. Camera deltas are in degrees per frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    #[serde(rename = "move", default)]
    pub movement: Move,
    #[serde(default)]
    pub strafe: Strafe,
    #[serde(default)]
    pub modifier: Modifier,
    #[serde(rename = "use", default)]
    pub use_item: bool,
    #[serde(default)]
    pub attack: bool,
    #[serde(default)]
    pub jump: bool,
    #[serde(default)]
    pub drop: bool,
    #[serde(default)]
    pub camera_dx: f64,
    #[serde(default)]
    pub camera_dy: f64,
}

impl ActionRecord {
    pub fn noop() -> Self {
        Self::default()
    }

    /// Discrete part of the action as slot value indices (slot1..slot7).
    pub fn discrete_indices(&self) -> [u8; 7] {
        [
            self.movement as u8,
            self.strafe as u8,
            self.modifier as u8,
            flag_index(self.use_item),
            flag_index(self.attack),
            flag_index(self.jump),
            flag_index(self.drop),
        ]
    }

    /// True when every discrete field matches; camera deltas are ignored.
    pub fn same_discrete(&self, other: &ActionRecord) -> bool {
        self.discrete_indices() == other.discrete_indices()
    }

    /// Enumerates every combination of the discrete fields (432 records, zero camera).
    pub fn discrete_space() -> impl Iterator<Item = ActionRecord> {
        let bools = [true, false];
        Move::ALL.into_iter().flat_map(move |movement| {
            Strafe::ALL.into_iter().flat_map(move |strafe| {
                Modifier::ALL.into_iter().flat_map(move |modifier| {
                    bools.into_iter().flat_map(move |use_item| {
                        bools.into_iter().flat_map(move |attack| {
                            bools.into_iter().flat_map(move |jump| {
                                bools.into_iter().map(move |drop| ActionRecord {
                                    movement,
                                    strafe,
                                    modifier,
                                    use_item,
                                    attack,
                                    jump,
                                    drop,
                                    camera_dx: 0.0,
                                    camera_dy: 0.0,
                                })
                            })
                        })
                    })
                })
            })
        })
    }
}

fn flag_index(set: bool) -> u8 {
    if set {
        0
    } else {
        1
    }
}

/// μ-law camera quantizer. Bin `(bin_count - 1) / 2` is "no movement".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraBinning {
    pub bin_count: u32,
    /// Clip bound in degrees; larger deltas saturate.
    pub dmax: f64,
    /// Companding constant.
    pub mu: f64,
}

impl Default for CameraBinning {
    fn default() -> Self {
        Self {
            bin_count: 11,
            dmax: 20.0,
            mu: 10.0,
        }
    }
}

impl CameraBinning {
    pub fn validate(&self) -> Result<()> {
        if self.bin_count < 3 || self.bin_count % 2 == 0 {
            return Err(Error::config(format!(
                "camera bin count must be odd and >= 3, got {}",
                self.bin_count
            )));
        }
        if !(self.dmax.is_finite() && self.dmax > 0.0) {
            return Err(Error::config(format!("camera dmax must be positive, got {}", self.dmax)));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::config(format!("camera mu must be positive, got {}", self.mu)));
        }
        Ok(())
    }

    pub fn center(&self) -> u32 {
        (self.bin_count - 1) / 2
    }

    pub fn quantize(&self, delta: f64) -> Result<u32> {
        if !delta.is_finite() {
            return Err(Error::invalid(format!("camera delta must be finite, got {delta}")));
        }
        let half = self.center();
        let v = delta.clamp(-self.dmax, self.dmax) / self.dmax;
        let u = (self.mu * v.abs()).ln_1p() / self.mu.ln_1p();
        // Rounding the magnitude keeps quantize(-d) + quantize(d) == bin_count - 1
        // exactly, including at half-bin ties.
        let mag = ((u * half as f64).round() as u32).min(half);
        Ok(if v < 0.0 { half - mag } else { half + mag })
    }

    /// Bin-center delta in degrees.
    pub fn dequantize(&self, bin: u32) -> Result<f64> {
        if bin >= self.bin_count {
            return Err(Error::invalid(format!(
                "camera bin {bin} out of range 0..{}",
                self.bin_count
            )));
        }
        let half = self.center() as f64;
        let u = (bin as f64 - half) / half;
        let mag = (((self.mu.ln_1p() * u.abs()).exp_m1()) / self.mu * self.dmax).min(self.dmax);
        Ok(if u < 0.0 { -mag } else { mag })
    }
}

/// Names of the block positions, index-aligned with [`ActionTokenBlock::ids`].
pub const SLOT_NAMES: [&str; ACTION_BLOCK_LEN] = [
    "abos", "move", "strafe", "modifier", "use", "attack", "jump", "drop", "camera_x", "camera_y",
    "aeos",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotRange {
    pub first: TokenId,
    pub count: u32,
}

impl SlotRange {
    pub fn contains(&self, id: TokenId) -> bool {
        id >= self.first && id < self.first + self.count
    }

    pub fn end(&self) -> TokenId {
        self.first + self.count
    }
}

/// Id ranges for every block position. Ranges are allocated above the image
/// vocabulary in the order slot1..slot7, camera_x, camera_y, aBOS, aEOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionVocabLayout {
    /// Indexed like [`SLOT_NAMES`] (block position order).
    ranges: [SlotRange; ACTION_BLOCK_LEN],
}

impl ActionVocabLayout {
    /// Discrete slot sizes, slot1..slot7.
    const DISCRETE_COUNTS: [u32; 7] = [3, 3, 3, 2, 2, 2, 2];

    pub fn new(image_vocab_size: u32, camera: &CameraBinning) -> Self {
        let mut next = image_vocab_size;
        let mut take = |count: u32| {
            let r = SlotRange { first: next, count };
            next += count;
            r
        };
        let mut slots = [SlotRange { first: 0, count: 0 }; ACTION_BLOCK_LEN];
        for (i, &count) in Self::DISCRETE_COUNTS.iter().enumerate() {
            slots[i + 1] = take(count);
        }
        slots[8] = take(camera.bin_count);
        slots[9] = take(camera.bin_count);
        slots[0] = take(1);
        slots[10] = take(1);
        Self { ranges: slots }
    }

    pub fn range(&self, position: usize) -> SlotRange {
        self.ranges[position]
    }

    pub fn base(&self) -> TokenId {
        self.ranges[1].first
    }

    pub fn total(&self) -> u32 {
        self.ranges.iter().map(|r| r.count).sum()
    }

    /// One past the largest action id.
    pub fn end(&self) -> TokenId {
        self.base() + self.total()
    }

    pub fn abos(&self) -> TokenId {
        self.ranges[0].first
    }

    pub fn aeos(&self) -> TokenId {
        self.ranges[10].first
    }

    pub fn camera_bins(&self) -> u32 {
        self.ranges[8].count
    }

    /// Block position owning `id`, if it is an action id.
    pub fn position_of(&self, id: TokenId) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(id))
    }

    /// Checks contiguity and disjointness of the ranges (in allocation order).
    pub fn validate(&self) -> Result<()> {
        let mut ordered: Vec<SlotRange> = self.ranges.to_vec();
        ordered.sort_by_key(|r| r.first);
        for pair in ordered.windows(2) {
            if pair[0].end() != pair[1].first {
                return Err(Error::config("action vocabulary ranges are not contiguous"));
            }
        }
        if self.ranges.iter().any(|r| r.count == 0) {
            return Err(Error::config("action vocabulary has an empty slot"));
        }
        if self.ranges[0].count != 1 || self.ranges[10].count != 1 {
            return Err(Error::config("aBOS/aEOS must be single ids"));
        }
        for (i, &count) in Self::DISCRETE_COUNTS.iter().enumerate() {
            if self.ranges[i + 1].count != count {
                return Err(Error::config(format!(
                    "slot {} must have {count} ids",
                    SLOT_NAMES[i + 1]
                )));
            }
        }
        if self.ranges[8].count != self.ranges[9].count {
            return Err(Error::config("camera axes must have the same bin count"));
        }
        Ok(())
    }

    /// Canonical byte encoding of the table, used for vocabulary fingerprints.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, r) in SLOT_NAMES.iter().zip(&self.ranges) {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.extend_from_slice(&r.first.to_le_bytes());
            out.extend_from_slice(&r.count.to_le_bytes());
        }
        out
    }
}

impl Serialize for ActionVocabLayout {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut order: Vec<usize> = (0..ACTION_BLOCK_LEN).collect();
        order.sort_by_key(|&i| self.ranges[i].first);
        let mut map = serializer.serialize_map(Some(ACTION_BLOCK_LEN))?;
        for i in order {
            map.serialize_entry(SLOT_NAMES[i], &[self.ranges[i].first, self.ranges[i].count])?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ActionVocabLayout {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct LayoutVisitor;

        impl<'de> Visitor<'de> for LayoutVisitor {
            type Value = ActionVocabLayout;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of slot name to [first_id, count]")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Self::Value, A::Error> {
                let mut ranges: [Option<SlotRange>; ACTION_BLOCK_LEN] = [None; ACTION_BLOCK_LEN];
                while let Some((name, [first, count])) = access.next_entry::<String, [u32; 2]>()? {
                    let idx = SLOT_NAMES
                        .iter()
                        .position(|n| *n == name)
                        .ok_or_else(|| de::Error::unknown_field(&name, &SLOT_NAMES))?;
                    ranges[idx] = Some(SlotRange { first, count });
                }
                let mut out = [SlotRange { first: 0, count: 0 }; ACTION_BLOCK_LEN];
                for (i, r) in ranges.iter().enumerate() {
                    out[i] = r.ok_or_else(|| de::Error::missing_field(SLOT_NAMES[i]))?;
                }
                let layout = ActionVocabLayout { ranges: out };
                layout.validate().map_err(de::Error::custom)?;
                Ok(layout)
            }
        }

        deserializer.deserialize_map(LayoutVisitor)
    }
}

/// Exactly 11 action ids, `[aBOS, slot1..slot7, camera_x, camera_y, aEOS]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ActionTokenBlock {
    pub ids: [TokenId; ACTION_BLOCK_LEN],
}

impl ActionTokenBlock {
    pub fn from_slice(ids: &[TokenId]) -> Result<Self> {
        let ids: [TokenId; ACTION_BLOCK_LEN] = ids.try_into().map_err(|_| Error::MalformedBlock {
            slot: ids.len().min(ACTION_BLOCK_LEN),
            name: "length",
            reason: format!("expected {ACTION_BLOCK_LEN} ids, got {}", ids.len()),
        })?;
        Ok(Self { ids })
    }

    /// Checks every id lies in its own position's range.
    pub fn validate(&self, layout: &ActionVocabLayout) -> Result<()> {
        for (slot, &id) in self.ids.iter().enumerate() {
            let r = layout.range(slot);
            if !r.contains(id) {
                let reason = match layout.position_of(id) {
                    Some(owner) => format!("id {id} belongs to slot {} ({})", owner, SLOT_NAMES[owner]),
                    None => format!("id {id} is not an action id"),
                };
                return Err(Error::MalformedBlock {
                    slot,
                    name: SLOT_NAMES[slot],
                    reason,
                });
            }
        }
        Ok(())
    }

    /// Camera bin pair carried by the block (not validated).
    pub fn camera_bins(&self, layout: &ActionVocabLayout) -> (u32, u32) {
        (
            self.ids[8].wrapping_sub(layout.range(8).first),
            self.ids[9].wrapping_sub(layout.range(9).first),
        )
    }
}

/// Action tokenizer: a vocabulary layout plus the camera quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionCodec {
    pub layout: ActionVocabLayout,
    pub camera: CameraBinning,
}

impl ActionCodec {
    pub fn new(image_vocab_size: u32, camera: CameraBinning) -> Result<Self> {
        camera.validate()?;
        let layout = ActionVocabLayout::new(image_vocab_size, &camera);
        layout.validate()?;
        Ok(Self { layout, camera })
    }

    pub fn encode(&self, a: &ActionRecord) -> Result<ActionTokenBlock> {
        let bx = self.camera.quantize(a.camera_dx)?;
        let by = self.camera.quantize(a.camera_dy)?;
        Ok(self.encode_with_bins(a, bx, by))
    }

    /// Encodes the discrete fields of `a` with explicit camera bins.
    pub fn encode_with_bins(&self, a: &ActionRecord, bin_x: u32, bin_y: u32) -> ActionTokenBlock {
        let l = &self.layout;
        let mut ids = [0; ACTION_BLOCK_LEN];
        ids[0] = l.abos();
        for (i, v) in a.discrete_indices().into_iter().enumerate() {
            ids[i + 1] = l.range(i + 1).first + v as u32;
        }
        ids[8] = l.range(8).first + bin_x;
        ids[9] = l.range(9).first + bin_y;
        ids[10] = l.aeos();
        ActionTokenBlock { ids }
    }

    pub fn decode(&self, block: &ActionTokenBlock) -> Result<ActionRecord> {
        let l = &self.layout;
        block.validate(l)?;
        let v = |slot: usize| block.ids[slot] - l.range(slot).first;
        let (bx, by) = block.camera_bins(l);
        Ok(ActionRecord {
            movement: Move::ALL[v(1) as usize],
            strafe: Strafe::ALL[v(2) as usize],
            modifier: Modifier::ALL[v(3) as usize],
            use_item: v(4) == 0,
            attack: v(5) == 0,
            jump: v(6) == 0,
            drop: v(7) == 0,
            camera_dx: self.camera.dequantize(bx)?,
            camera_dy: self.camera.dequantize(by)?,
        })
    }

    /// Camera bins of an action under this codec.
    pub fn bins(&self, a: &ActionRecord) -> Result<(u32, u32)> {
        Ok((self.camera.quantize(a.camera_dx)?, self.camera.quantize(a.camera_dy)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> ActionCodec {
        ActionCodec::new(512, CameraBinning::default()).unwrap()
    }

    #[test]
    fn quantize_center_and_saturation() {
        let c = CameraBinning::default();
        assert_eq!(c.quantize(0.0).unwrap(), 5);
        assert_eq!(c.quantize(20.0).unwrap(), 10);
        assert_eq!(c.quantize(-20.0).unwrap(), 0);
        assert_eq!(c.quantize(1e9).unwrap(), 10);
        assert_eq!(c.quantize(-1e9).unwrap(), 0);
        assert!(matches!(c.quantize(f64::NAN), Err(Error::InvalidInput(_))));
        assert!(matches!(c.quantize(f64::INFINITY), Err(Error::InvalidInput(_))));
    }

    /// Bin boundaries via the inverse companding curve at half-bin magnitudes.
    fn boundary_oracle(c: &CameraBinning, delta: f64) -> u32 {
        let half = c.center();
        let mut mag = 0;
        for m in 0..half {
            let u = (m as f64 + 0.5) / half as f64;
            let edge = ((1.0 + c.mu).powf(u) - 1.0) / c.mu * c.dmax;
            if delta.abs() > edge {
                mag = m + 1;
            }
        }
        if delta < 0.0 {
            half - mag
        } else {
            half + mag
        }
    }

    #[test]
    fn quantize_2_5_degrees() {
        let c = CameraBinning::default();
        // Frozen from the boundary oracle: edges at 2.10° and 4.63° bracket 2.5°.
        assert_eq!(boundary_oracle(&c, 2.5), 7);
        assert_eq!(c.quantize(2.5).unwrap(), 7);
        assert_eq!(c.quantize(-2.5).unwrap(), 3);
    }

    #[test]
    fn quantize_matches_boundary_oracle_on_sweep() {
        let c = CameraBinning::default();
        for i in -4000..=4000 {
            let d = i as f64 * 0.01 + 0.00123;
            assert_eq!(c.quantize(d).unwrap(), boundary_oracle(&c, d), "delta {d}");
        }
    }

    #[test]
    fn dequantize_center_sign_and_round_trip() {
        let c = CameraBinning::default();
        assert_eq!(c.dequantize(5).unwrap(), 0.0);
        let top = c.dequantize(10).unwrap();
        assert!(top > 0.0 && top <= c.dmax);
        for b in 0..11u32 {
            let d = c.dequantize(b).unwrap();
            assert_eq!(d.partial_cmp(&0.0), (b as i64 - 5).cmp(&0).into(), "sign of bin {b}");
            assert_eq!(c.quantize(d).unwrap(), b);
        }
        assert!(matches!(c.dequantize(11), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn layout_is_contiguous_above_image_ids() {
        let c = codec();
        let l = &c.layout;
        assert_eq!(l.total(), 41);
        assert_eq!(l.base(), 512);
        assert_eq!(l.end(), 553);
        let mut seen = std::collections::HashSet::new();
        for p in 0..ACTION_BLOCK_LEN {
            let r = l.range(p);
            for id in r.first..r.end() {
                assert!(id >= 512);
                assert!(seen.insert(id));
                assert_eq!(l.position_of(id), Some(p));
            }
        }
        assert_eq!(seen.len(), 41);
        assert_eq!(*seen.iter().min().unwrap(), 512);
        assert_eq!(*seen.iter().max().unwrap(), 552);
    }

    #[test]
    fn layout_json_round_trip() {
        let l = codec().layout;
        let json = serde_json::to_string(&l).unwrap();
        assert!(json.starts_with("{\"move\":[512,3]"), "{json}");
        let back: ActionVocabLayout = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn noop_block() {
        let c = codec();
        let b = c.encode(&ActionRecord::noop()).unwrap();
        let l = &c.layout;
        let expected = [
            l.abos(),
            l.range(1).first + 2,
            l.range(2).first + 2,
            l.range(3).first + 2,
            l.range(4).first + 1,
            l.range(5).first + 1,
            l.range(6).first + 1,
            l.range(7).first + 1,
            l.range(8).first + 5,
            l.range(9).first + 5,
            l.aeos(),
        ];
        assert_eq!(b.ids, expected);
        let a = c.decode(&b).unwrap();
        assert_eq!(a, ActionRecord::noop());
    }

    #[test]
    fn exhaustive_round_trip() {
        let c = codec();
        let mut cases = 0;
        for a in ActionRecord::discrete_space() {
            for bx in 0..11 {
                for by in 0..11 {
                    let block = c.encode_with_bins(&a, bx, by);
                    assert_eq!(block.ids.len(), ACTION_BLOCK_LEN);
                    let back = c.decode(&block).unwrap();
                    assert!(back.same_discrete(&a));
                    assert_eq!(c.bins(&back).unwrap(), (bx, by));
                    assert_eq!(c.encode(&back).unwrap(), block);
                    cases += 1;
                }
            }
        }
        assert_eq!(cases, 432 * 121);
    }

    #[test]
    fn cross_slot_id_is_rejected_with_slot_name() {
        let c = codec();
        let mut b = c.encode(&ActionRecord::noop()).unwrap();
        b.ids[4] = c.layout.range(5).first;
        match c.decode(&b) {
            Err(Error::MalformedBlock { slot, name, .. }) => {
                assert_eq!(slot, 4);
                assert_eq!(name, "use");
            }
            other => panic!("expected malformed block, got {other:?}"),
        }
    }

    #[test]
    fn missing_delimiters_and_bad_length() {
        let c = codec();
        let mut b = c.encode(&ActionRecord::noop()).unwrap();
        b.ids[0] = 3;
        assert!(matches!(c.decode(&b), Err(Error::MalformedBlock { slot: 0, .. })));
        let mut b = c.encode(&ActionRecord::noop()).unwrap();
        b.ids[10] = c.layout.abos();
        assert!(matches!(c.decode(&b), Err(Error::MalformedBlock { slot: 10, .. })));
        assert!(matches!(
            ActionTokenBlock::from_slice(&[1, 2, 3]),
            Err(Error::MalformedBlock { .. })
        ));
    }

    #[test]
    fn action_json_uses_protocol_names() {
        let a = ActionRecord {
            movement: Move::Forward,
            use_item: true,
            camera_dx: 1.5,
            ..Default::default()
        };
        let v = serde_json::to_value(a).unwrap();
        assert_eq!(v["move"], "forward");
        assert_eq!(v["use"], true);
        assert_eq!(v["strafe"], "none");
        let back: ActionRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantizer_antisymmetric(d in -60.0f64..60.0) {
                let c = CameraBinning::default();
                prop_assert_eq!(c.quantize(d).unwrap() + c.quantize(-d).unwrap(), 10);
            }

            #[test]
            fn quantizer_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
                let c = CameraBinning::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(c.quantize(lo).unwrap() <= c.quantize(hi).unwrap());
            }
        }
    }

    #[test]
    fn quantizer_monotone_dense_sweep() {
        let c = CameraBinning::default();
        let mut prev = 0;
        let n = 200_000;
        for i in 0..=n {
            let d = -40.0 + 80.0 * i as f64 / n as f64;
            let b = c.quantize(d).unwrap();
            assert!(b >= prev);
            prev = b;
        }
        assert_eq!(prev, 10);
    }
}
