use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action_codec::{ActionRecord, CameraBinning, Modifier, Move, Strafe};
use crate::error::{Error, Result};

/// Random-play action distribution. Label imbalance is deliberate: most
/// frames have no jump, drop or use, mirroring real gameplay logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// forward, backward, none
    pub movement: [f64; 3],
    /// left, right, none
    pub strafe: [f64; 3],
    /// sprint, sneak, none
    pub modifier: [f64; 3],
    pub attack: f64,
    pub use_item: f64,
    pub jump: f64,
    pub drop: f64,
    /// Probability per camera bin, yaw axis.
    pub camera_x: Vec<f64>,
    /// Probability per camera bin, pitch axis.
    pub camera_y: Vec<f64>,
}

const DEFAULT_CAMERA: [f64; 11] = [0.02, 0.03, 0.04, 0.06, 0.10, 0.50, 0.10, 0.06, 0.04, 0.03, 0.02];

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            movement: [0.45, 0.05, 0.5],
            strafe: [0.1, 0.1, 0.8],
            modifier: [0.1, 0.05, 0.85],
            attack: 0.15,
            use_item: 0.05,
            jump: 0.1,
            drop: 0.02,
            camera_x: DEFAULT_CAMERA.to_vec(),
            camera_y: DEFAULT_CAMERA.to_vec(),
        }
    }
}

impl PolicyConfig {
    /// Camera distributions concentrated on the center bin.
    pub fn with_still_camera(mut self) -> Self {
        let mut still = vec![0.0; self.camera_x.len()];
        still[self.camera_x.len() / 2] = 1.0;
        self.camera_x = still.clone();
        self.camera_y = still;
        self
    }

    pub fn validate(&self, camera: &CameraBinning) -> Result<()> {
        let check = |name: &str, probs: &[f64]| -> Result<()> {
            if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::config(format!("{name}: probabilities must be finite and non-negative")));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("{name}: probabilities sum to {total}, expected 1")));
            }
            Ok(())
        };
        check("movement", &self.movement)?;
        check("strafe", &self.strafe)?;
        check("modifier", &self.modifier)?;
        for (name, p) in [("attack", self.attack), ("use", self.use_item), ("jump", self.jump), ("drop", self.drop)] {
            check(name, &[p, 1.0 - p])?;
        }
        for (name, bins) in [("camera_x", &self.camera_x), ("camera_y", &self.camera_y)] {
            if bins.len() != camera.bin_count as usize {
                return Err(Error::config(format!(
                    "{name}: {} bins configured, camera uses {}",
                    bins.len(),
                    camera.bin_count
                )));
            }
            check(name, bins)?;
        }
        Ok(())
    }
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding slack: last bin with non-zero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn sample_action<R: Rng + ?Sized>(rng: &mut R, cfg: &PolicyConfig, camera: &CameraBinning) -> Result<ActionRecord> {
    cfg.validate(camera)?;
    Ok(sample_unchecked(rng, cfg, camera))
}

pub(crate) fn sample_unchecked<R: Rng + ?Sized>(rng: &mut R, cfg: &PolicyConfig, camera: &CameraBinning) -> ActionRecord {
    let movement = Move::ALL[categorical(rng, &cfg.movement)];
    let strafe = Strafe::ALL[categorical(rng, &cfg.strafe)];
    let modifier = Modifier::ALL[categorical(rng, &cfg.modifier)];
    let attack = rng.gen::<f64>() < cfg.attack;
    let use_item = rng.gen::<f64>() < cfg.use_item;
    let jump = rng.gen::<f64>() < cfg.jump;
    let drop = rng.gen::<f64>() < cfg.drop;
    let bx = categorical(rng, &cfg.camera_x) as u32;
    let by = categorical(rng, &cfg.camera_y) as u32;
    ActionRecord {
        movement,
        strafe,
        modifier,
        use_item,
        attack,
        jump,
        drop,
        camera_dx: camera.dequantize(bx).expect("bin within configured range"),
        camera_dy: camera.dequantize(by).expect("bin within configured range"),
    }
}
