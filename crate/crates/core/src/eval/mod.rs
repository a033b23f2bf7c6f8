//! Controllability metrics.
//!
//! Ground truth is the action a frame was conditioned on; the prediction is
//! what an inverse dynamics model reads off the generated frames. Discrete
//! actions are scored as three 3-way and four 2-way classification tasks with
//! macro precision/recall/F1; camera accuracy is the mean absolute bin error.

mod pipeline;

use std::fmt::Write as _;

use serde::Serialize;

use crate::action_codec::{ActionRecord, CameraBinning, Modifier, Move, Strafe};
use crate::error::{Error, Result};
use crate::visual_codec::Frame;

pub use pipeline::{controllability_pipeline, evaluate_ground_truth, ClipEvaluation, EvalConfig, EvaluationReport};

/// Independent per-action assertions from an inverse dynamics model, before
/// exclusivity is enforced.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RawActionPrediction {
    pub forward: bool,
    pub backward: bool,
    pub left: bool,
    pub right: bool,
    pub sprint: bool,
    pub sneak: bool,
    pub use_item: bool,
    pub attack: bool,
    pub jump: bool,
    pub drop: bool,
    pub camera_dx: f64,
    pub camera_dy: f64,
}

/// Collapses mutually exclusive assertions: any group with two or more
/// asserted options resolves to its null label.
pub fn resolve_conflicts(raw: &RawActionPrediction) -> ActionRecord {
    let movement = match (raw.forward, raw.backward) {
        (true, false) => Move::Forward,
        (false, true) => Move::Backward,
        _ => Move::None,
    };
    let strafe = match (raw.left, raw.right) {
        (true, false) => Strafe::Left,
        (false, true) => Strafe::Right,
        _ => Strafe::None,
    };
    let modifier = match (raw.sprint, raw.sneak) {
        (true, false) => Modifier::Sprint,
        (false, true) => Modifier::Sneak,
        _ => Modifier::None,
    };
    ActionRecord {
        movement,
        strafe,
        modifier,
        use_item: raw.use_item,
        attack: raw.attack,
        jump: raw.jump,
        drop: raw.drop,
        camera_dx: raw.camera_dx,
        camera_dy: raw.camera_dy,
    }
}

/// Anything that can label the action between two frames.
pub trait InverseDynamics: Send + Sync {
    fn infer_raw(&self, prev: &Frame, next: &Frame) -> Result<RawActionPrediction>;

    fn camera(&self) -> &CameraBinning;

    fn infer(&self, prev: &Frame, next: &Frame) -> Result<ActionRecord> {
        Ok(resolve_conflicts(&self.infer_raw(prev, next)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    Move,
    Strafe,
    Modifier,
    Use,
    Attack,
    Jump,
    Drop,
}

impl Subtask {
    pub const ALL: [Subtask; 7] = [
        Subtask::Move,
        Subtask::Strafe,
        Subtask::Modifier,
        Subtask::Use,
        Subtask::Attack,
        Subtask::Jump,
        Subtask::Drop,
    ];

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Subtask::Move => &["forward", "backward", "null"],
            Subtask::Strafe => &["left", "right", "null"],
            Subtask::Modifier => &["sprint", "sneak", "null"],
            Subtask::Use => &["use", "null"],
            Subtask::Attack => &["attack", "null"],
            Subtask::Jump => &["jump", "null"],
            Subtask::Drop => &["drop", "null"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Move => "forward/backward",
            Subtask::Strafe => "left/right",
            Subtask::Modifier => "sprint/sneak",
            Subtask::Use => "use",
            Subtask::Attack => "attack",
            Subtask::Jump => "jump",
            Subtask::Drop => "drop",
        }
    }

    /// Label index of `a` in this task.
    pub fn class_of(self, a: &ActionRecord) -> usize {
        let idx = a.discrete_indices();
        idx[self as usize] as usize
    }
}

/// The classification tasks scored in a report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubtaskSpec {
    pub tasks: Vec<Subtask>,
}

impl Default for SubtaskSpec {
    fn default() -> Self {
        Self {
            tasks: Subtask::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionLabel {
    pub truth: ActionRecord,
    pub predicted: ActionRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub label: &'static str,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth occurrences.
    pub support: usize,
    pub predicted: usize,
    /// False when the class is absent from both truth and predictions.
    pub averaged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: Subtask,
    pub name: &'static str,
    pub classes: Vec<ClassScore>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControllabilityReport {
    pub tasks: Vec<TaskScore>,
    /// Macro over classes within a task, then over tasks (headline).
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Macro over all averaged classes of all tasks pooled together.
    pub pooled_precision: f64,
    pub pooled_recall: f64,
    pub pooled_f1: f64,
    /// Mean |predicted bin − true bin| over transitions and both axes.
    pub camera_l1: f64,
    pub camera_l1_x: f64,
    pub camera_l1_y: f64,
    pub samples: usize,
    pub convention: &'static str,
}

pub const SCORE_CONVENTION: &str = "precision is 0 for a class never predicted, recall is 0 for a class never \
observed, F1 is 0 when precision + recall = 0; classes absent from both truth and predictions are excluded \
from their task's macro average";

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn score_task(task: Subtask, labels: &[TransitionLabel]) -> TaskScore {
    let n = task.labels().len();
    let mut tp = vec![0usize; n];
    let mut support = vec![0usize; n];
    let mut predicted = vec![0usize; n];
    for l in labels {
        let t = task.class_of(&l.truth);
        let p = task.class_of(&l.predicted);
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let classes: Vec<ClassScore> = (0..n)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore {
                label: task.labels()[c],
                precision,
                recall,
                f1,
                support: support[c],
                predicted: predicted[c],
                averaged: support[c] + predicted[c] > 0,
            }
        })
        .collect();
    let used: Vec<&ClassScore> = classes.iter().filter(|c| c.averaged).collect();
    let k = used.len().max(1) as f64;
    TaskScore {
        task,
        name: task.name(),
        precision: used.iter().map(|c| c.precision).sum::<f64>() / k,
        recall: used.iter().map(|c| c.recall).sum::<f64>() / k,
        f1: used.iter().map(|c| c.f1).sum::<f64>() / k,
        classes,
    }
}

pub fn classify(labels: &[TransitionLabel], spec: &SubtaskSpec, camera: &CameraBinning) -> Result<ControllabilityReport> {
    if labels.is_empty() {
        return Err(Error::invalid("no transitions to score"));
    }
    if spec.tasks.is_empty() {
        return Err(Error::invalid("no classification tasks configured"));
    }
    let tasks: Vec<TaskScore> = spec.tasks.iter().map(|&t| score_task(t, labels)).collect();
    let nt = tasks.len() as f64;
    let pooled: Vec<&ClassScore> = tasks.iter().flat_map(|t| t.classes.iter()).filter(|c| c.averaged).collect();
    let np = pooled.len().max(1) as f64;

    let mut lx = 0.0;
    let mut ly = 0.0;
    for l in labels {
        let (tx, ty) = (camera.quantize(l.truth.camera_dx)?, camera.quantize(l.truth.camera_dy)?);
        let (px, py) = (camera.quantize(l.predicted.camera_dx)?, camera.quantize(l.predicted.camera_dy)?);
        lx += (px as f64 - tx as f64).abs();
        ly += (py as f64 - ty as f64).abs();
    }
    let n = labels.len() as f64;
    Ok(ControllabilityReport {
        precision: tasks.iter().map(|t| t.precision).sum::<f64>() / nt,
        recall: tasks.iter().map(|t| t.recall).sum::<f64>() / nt,
        f1: tasks.iter().map(|t| t.f1).sum::<f64>() / nt,
        pooled_precision: pooled.iter().map(|c| c.precision).sum::<f64>() / np,
        pooled_recall: pooled.iter().map(|c| c.recall).sum::<f64>() / np,
        pooled_f1: pooled.iter().map(|c| c.f1).sum::<f64>() / np,
        camera_l1: (lx + ly) / (2.0 * n),
        camera_l1_x: lx / n,
        camera_l1_y: ly / n,
        samples: labels.len(),
        convention: SCORE_CONVENTION,
        tasks,
    })
}

impl ControllabilityReport {
    /// Human-readable table: one row per task, then the macro row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>7} {:>7} {:>7}", "task", "P", "R", "F1");
        for t in &self.tasks {
            let _ = writeln!(s, "{:<18} {:>7.3} {:>7.3} {:>7.3}", t.name, t.precision, t.recall, t.f1);
        }
        let _ = writeln!(s, "{:<18} {:>7.3} {:>7.3} {:>7.3}", "macro", self.precision, self.recall, self.f1);
        let _ = writeln!(
            s,
            "{:<18} {:>7.3} {:>7.3} {:>7.3}",
            "pooled", self.pooled_precision, self.pooled_recall, self.pooled_f1
        );
        let _ = writeln!(
            s,
            "camera L1 {:.3} (x {:.3}, y {:.3}) over {} transitions",
            self.camera_l1, self.camera_l1_x, self.camera_l1_y, self.samples
        );
        s
    }
}
