//! GridCraft: a small deterministic tile world standing in for game footage.
//!
//! Every frame is a pure function of the world state and the flags of the
//! transition that produced it, and the renderer is injective, so the exact
//! action behind any pair of consecutive frames can be read back.

pub mod idm;
pub mod policy;
pub mod render;
pub mod world;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::action_codec::{ActionRecord, CameraBinning};
use crate::error::{Error, Result};
use crate::visual_codec::Frame;

pub use idm::OracleIdm;
pub use policy::{sample_action, PolicyConfig};
pub use render::render;
pub use world::{generate_world, step, transition, EventFlags, Tile, Transition, WorldState};

/// Frames per training clip.
pub const CLIP_LEN: usize = 16;

/// Aligned (frame, action) pairs: `actions[i]` is applied to `states[i]`,
/// whose rendering is `frames[i]`. Actions are recorded as executed.
#[derive(Clone, Debug)]
pub struct Clip {
    pub seed: u64,
    pub frames: Vec<Frame>,
    pub actions: Vec<ActionRecord>,
    pub states: Vec<WorldState>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn action_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_C3C3_3C3C)
}

pub fn rollout(seed: u64, length: usize, policy: &PolicyConfig, camera: &CameraBinning) -> Result<Clip> {
    if length == 0 {
        return Err(Error::invalid("rollout length must be at least 1"));
    }
    policy.validate(camera)?;
    let mut rng = action_rng(seed);
    let requested = (0..length).map(|_| policy::sample_unchecked(&mut rng, policy, camera));
    Ok(play(seed, requested, camera))
}

/// Runs the given actions from the world generated by `seed`.
pub fn replay(seed: u64, actions: &[ActionRecord], camera: &CameraBinning) -> Clip {
    play(seed, actions.iter().copied(), camera)
}

fn play(seed: u64, actions: impl Iterator<Item = ActionRecord>, camera: &CameraBinning) -> Clip {
    let mut state = generate_world(seed);
    let mut flags = EventFlags::default();
    let mut clip = Clip {
        seed,
        frames: Vec::new(),
        actions: Vec::new(),
        states: Vec::new(),
    };
    for a in actions {
        clip.frames.push(render(&state, &flags));
        let t = transition(&state, &a, camera);
        clip.states.push(std::mem::replace(&mut state, t.state));
        clip.actions.push(t.executed);
        flags = t.flags;
    }
    clip
}

/// Writes `frame_NN.ppm` files plus `actions.json` into `dir`.
pub fn export_clip(clip: &Clip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in clip.frames.iter().enumerate() {
        fs::write(dir.join(format!("frame_{i:02}.ppm")), f.to_ppm())?;
    }
    let doc = serde_json::json!({ "seed": clip.seed, "actions": clip.actions });
    fs::write(dir.join("actions.json"), serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::InverseDynamics;

    #[test]
    fn clip_has_sixteen_pairs() {
        let c = rollout(3, CLIP_LEN, &PolicyConfig::default(), &CameraBinning::default()).unwrap();
        assert_eq!(c.frames.len(), 16);
        assert_eq!(c.actions.len(), 16);
        assert_eq!(c.states.len(), 16);
        assert!(rollout(3, 0, &PolicyConfig::default(), &CameraBinning::default()).is_err());
    }

    #[test]
    fn replay_reproduces_frames() {
        let cam = CameraBinning::default();
        let c = rollout(8, CLIP_LEN, &PolicyConfig::default(), &cam).unwrap();
        let r = replay(8, &c.actions, &cam);
        assert_eq!(r.frames, c.frames);
        assert_eq!(r.actions, c.actions);
    }

    #[test]
    fn oracle_recovers_rollout_actions() {
        let cam = CameraBinning::default();
        let idm = OracleIdm::new(cam);
        for seed in 0..20 {
            let c = rollout(seed, CLIP_LEN, &PolicyConfig::default(), &cam).unwrap();
            for i in 0..c.len() - 1 {
                let got = idm.infer(&c.frames[i], &c.frames[i + 1]).unwrap();
                assert!(got.same_discrete(&c.actions[i]), "seed {seed} step {i}: {got:?} vs {:?}", c.actions[i]);
                assert_eq!(cam.quantize(got.camera_dx).unwrap(), cam.quantize(c.actions[i].camera_dx).unwrap());
                assert_eq!(cam.quantize(got.camera_dy).unwrap(), cam.quantize(c.actions[i].camera_dy).unwrap());
            }
        }
    }

    #[test]
    fn export_writes_ppm_and_json() {
        let c = rollout(1, 3, &PolicyConfig::default(), &CameraBinning::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_clip(&c, dir.path()).unwrap();
        let ppm = fs::read(dir.path().join("frame_00.ppm")).unwrap();
        assert!(ppm.starts_with(b"P6\n48 32\n255\n"));
        assert_eq!(ppm.len(), 13 + 32 * 48 * 3);
        let doc: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("actions.json")).unwrap()).unwrap();
        assert_eq!(doc["actions"].as_array().unwrap().len(), 3);
    }
}
