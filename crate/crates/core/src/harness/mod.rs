//! Command-line pipelines, run configuration and the session service.
//!
//! Every subcommand reads one section of an optional TOML file (named after
//! the subcommand), applies command-line overrides on top, and writes the
//! resolved section next to its outputs as `<section>.resolved.toml`. That
//! file can be passed back with `--config` to repeat the run.

mod serve;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::action_codec::{ActionRecord, ActionTokenBlock, CameraBinning};
use crate::decoding::{self, BenchConfig, BenchReport, DecodeConfig, Decoding, GenerationResult, Mode, Prompt, Sampler};
use crate::error::Error;
use crate::eval::{self, EvalConfig, EvaluationReport};
use crate::gridcraft::{self, Clip, OracleIdm, PolicyConfig, CLIP_LEN};
use crate::model::{self, Checkpoint, ModelConfig, StepMetrics, TrainConfig};
use crate::sequence::{self, DatasetShard, Vocabulary};
use crate::visual_codec::{self, Codebook, Frame};

pub use serve::{router, serve, ClientMessage, ServeSettings, ServerMessage, SessionService};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const TRAIN_SHARD: &str = "train.shard";
pub const TEST_SHARD: &str = "test.shard";
pub const CHECKPOINT_FILE: &str = "model.wfck";
pub const METRICS_FILE: &str = "metrics.csv";

/// A library error with a description of what the harness was doing.
#[derive(Debug, thiserror::Error)]
#[error("{context}: {source}")]
pub struct Failure {
    pub context: String,
    #[source]
    pub source: Error,
}

impl Failure {
    pub fn new(context: impl Into<String>, source: Error) -> Self {
        Self {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        exit_code(&self.source)
    }
}

pub type RunResult<T> = std::result::Result<T, Failure>;

/// Process exit status for an error: 2 config, 3 data, 4 runtime.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => EXIT_CONFIG,
        Error::CorruptClip { .. }
        | Error::CorruptFile { .. }
        | Error::IncompatibleVocabulary { .. }
        | Error::InsufficientData(_)
        | Error::InvalidToken { .. }
        | Error::MalformedBlock { .. }
        | Error::Io(_)
        | Error::Json(_) => EXIT_DATA,
        Error::ContextExceeded { .. } | Error::Diverged { .. } | Error::UnparseableFrame(_) => EXIT_RUNTIME,
        Error::InClip { source, .. } => exit_code(source),
    }
}

trait Context<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> RunResult<T>;
}

impl<T, E: Into<Error>> Context<T> for std::result::Result<T, E> {
    fn ctx(self, context: impl FnOnce() -> String) -> RunResult<T> {
        self.map_err(|e| Failure::new(context(), e.into()))
    }
}

fn config_failure(context: impl Into<String>, msg: impl Into<String>) -> Failure {
    Failure::new(context, Error::config(msg))
}

/// Loads `section` from an optional TOML file and applies `key=value`
/// overrides (dotted keys reach nested tables; values parse as TOML and fall
/// back to plain strings), then deserializes the result.
pub fn resolve<T: DeserializeOwned + Serialize + Default>(
    file: Option<&Path>,
    section: &str,
    overrides: &[String],
) -> RunResult<T> {
    // Partial nested tables must fall back to this section's defaults, not the nested type's.
    let mut table = toml::Table::try_from(T::default())
        .map_err(|e| config_failure(format!("[{section}] defaults"), e.to_string()))?;
    let from_file = match file {
        Some(path) => {
            let text = fs::read_to_string(path).ctx(|| format!("reading config {}", path.display()))?;
            let mut doc: toml::Table =
                toml::from_str(&text).map_err(|e| config_failure(format!("parsing config {}", path.display()), e.to_string()))?;
            match doc.remove(section) {
                Some(toml::Value::Table(t)) => t,
                Some(_) => {
                    return Err(config_failure(
                        format!("config {}", path.display()),
                        format!("[{section}] must be a table"),
                    ))
                }
                None => toml::Table::new(),
            }
        }
        None => toml::Table::new(),
    };
    merge(&mut table, from_file);
    for o in overrides {
        apply_override(&mut table, o).map_err(|m| config_failure(format!("override `{o}`"), m))?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_failure(format!("[{section}] settings"), e.to_string()))
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, o: &str) -> Result<(), String> {
    let (key, raw) = o.split_once('=').ok_or("expected key=value")?;
    let key = key.trim();
    if key.is_empty() {
        return Err("empty key".into());
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| format!("`{p}` is not a table"))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Writes `<section>.resolved.toml` into `dir`.
pub fn write_resolved<T: Serialize>(dir: &Path, section: &str, settings: &T) -> RunResult<PathBuf> {
    let value = toml::Value::try_from(settings).map_err(|e| config_failure("serializing resolved config", e.to_string()))?;
    let mut doc = toml::Table::new();
    doc.insert(section.to_string(), value);
    let text = toml::to_string_pretty(&doc).map_err(|e| config_failure("serializing resolved config", e.to_string()))?;
    fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{section}.resolved.toml"));
    fs::write(&path, text).ctx(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> RunResult<Arc<Checkpoint>> {
    Checkpoint::load(path).map(Arc::new).ctx(|| format!("loading checkpoint {}", path.display()))
}

pub fn load_codebook(path: &Path) -> RunResult<Codebook> {
    Codebook::load(path).ctx(|| format!("loading codebook {}", path.display()))
}

fn matching_codebook(checkpoint: &Checkpoint, path: &Path) -> RunResult<Codebook> {
    let codebook = load_codebook(path)?;
    let vocab = checkpoint.meta.vocabulary().ctx(|| "checkpoint vocabulary".into())?;
    if vocab.codebook_digest != codebook.digest() {
        return Err(Failure::new(
            format!("codebook {}", path.display()),
            Error::IncompatibleVocabulary {
                expected: vocab.fingerprint(),
                found: Vocabulary::new(&codebook, vocab.actions.camera).map(|v| v.fingerprint()).unwrap_or(0),
            },
        ));
    }
    Ok(codebook)
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub out: PathBuf,
    pub seed_start: u64,
    /// Training clips; seeds `seed_start..seed_start + clips`.
    pub clips: usize,
    /// Test clips; seeds follow the training seeds.
    pub held_out: usize,
    pub codebook_size: usize,
    /// Training frames sampled (evenly strided) for k-means.
    pub codebook_frames: usize,
    pub kmeans_iters: usize,
    pub codebook_seed: u64,
    pub camera: CameraBinning,
    pub policy: PolicyConfig,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        Self {
            out: "data".into(),
            seed_start: 0,
            clips: 100,
            held_out: 0,
            codebook_size: 512,
            codebook_frames: 2048,
            kmeans_iters: 25,
            codebook_seed: 0,
            camera: CameraBinning::default(),
            policy: PolicyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GenDataSummary {
    pub train_clips: usize,
    pub test_clips: usize,
    pub tokens_per_clip: usize,
    pub codebook_size: usize,
    pub codebook_frames: usize,
    pub distinct_patches: usize,
    /// Entries fitted by k-means; the remainder are filler.
    pub fitted_entries: usize,
    pub kmeans_inertia: f64,
    pub fingerprint: String,
}

fn rollouts(s: &GenDataSettings, seeds: std::ops::Range<u64>) -> impl Iterator<Item = crate::Result<Clip>> + '_ {
    seeds.map(move |seed| gridcraft::rollout(seed, CLIP_LEN, &s.policy, &s.camera))
}

pub fn gen_data(s: &GenDataSettings) -> RunResult<GenDataSummary> {
    let ctx = "gen-data";
    if s.clips == 0 {
        return Err(config_failure(ctx, "clips must be at least 1"));
    }
    if s.codebook_frames == 0 {
        return Err(config_failure(ctx, "codebook_frames must be at least 1"));
    }
    s.camera.validate().ctx(|| ctx.into())?;
    s.policy.validate(&s.camera).ctx(|| ctx.into())?;
    let train_seeds = s.seed_start..s.seed_start + s.clips as u64;
    let test_seeds = train_seeds.end..train_seeds.end + s.held_out as u64;

    let total_frames = s.clips * CLIP_LEN;
    let stride = (total_frames / s.codebook_frames).max(1);
    let mut sample = Vec::new();
    for (c, clip) in rollouts(s, train_seeds.clone()).enumerate() {
        let clip = clip.ctx(|| format!("rolling out clip {}", s.seed_start + c as u64))?;
        for (i, f) in clip.frames.into_iter().enumerate() {
            if (c * CLIP_LEN + i) % stride == 0 && sample.len() < s.codebook_frames {
                sample.push(f);
            }
        }
    }
    let distinct = visual_codec::distinct_patches(&sample).ctx(|| "sampling codebook frames".into())?;
    // GridCraft's palette yields a few hundred distinct patches; k-means runs
    // on at most that many clusters and the rest of the table is filler.
    let fitted = s.codebook_size.min(distinct);
    tracing::info!(frames = sample.len(), distinct, k = s.codebook_size, "training codebook");
    let (trained, stats) =
        visual_codec::train_codebook(&sample, fitted, s.kmeans_iters, s.codebook_seed).ctx(|| "training codebook".into())?;
    let codebook = visual_codec::pad_codebook(&trained, s.codebook_size, s.codebook_seed).ctx(|| "padding codebook".into())?;
    let vocab = Vocabulary::new(&codebook, s.camera).ctx(|| "building vocabulary".into())?;

    let tokenize = |seeds: std::ops::Range<u64>| -> RunResult<Option<DatasetShard>> {
        if seeds.is_empty() {
            return Ok(None);
        }
        let mut clips = Vec::with_capacity((seeds.end - seeds.start) as usize);
        let mut seed_list = Vec::with_capacity((seeds.end - seeds.start) as usize);
        for (seed, clip) in seeds.clone().zip(rollouts(s, seeds)) {
            let clip = clip.ctx(|| format!("rolling out clip {seed}"))?;
            clips.push(sequence::tokenize_clip(&clip, &codebook, &vocab).ctx(|| format!("tokenizing clip {seed}"))?);
            seed_list.push(seed);
        }
        DatasetShard::new(&vocab, clips, seed_list).map(Some).ctx(|| "assembling shard".into())
    };
    let train = tokenize(train_seeds)?.expect("at least one clip");
    let test = tokenize(test_seeds)?;

    fs::create_dir_all(&s.out).ctx(|| format!("creating {}", s.out.display()))?;
    codebook.save(&s.out.join(CODEBOOK_FILE)).ctx(|| "writing codebook".into())?;
    train.write(&s.out.join(TRAIN_SHARD)).ctx(|| "writing training shard".into())?;
    if let Some(t) = &test {
        t.write(&s.out.join(TEST_SHARD)).ctx(|| "writing test shard".into())?;
    }
    write_resolved(&s.out, "gen-data", s)?;
    Ok(GenDataSummary {
        train_clips: train.clips.len(),
        test_clips: test.as_ref().map_or(0, |t| t.clips.len()),
        tokens_per_clip: train.tokens_per_clip,
        codebook_size: codebook.len(),
        codebook_frames: sample.len(),
        distinct_patches: stats.distinct_patches,
        fitted_entries: fitted,
        kmeans_inertia: stats.inertia,
        fingerprint: format!("{:016x}", vocab.fingerprint()),
    })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Directory written by gen-data.
    pub data: PathBuf,
    pub out: PathBuf,
    /// Use only the first `max_clips` training clips.
    pub max_clips: Option<usize>,
    pub camera: CameraBinning,
    /// `vocab_size` and `max_positions` are taken from the data.
    pub model: ModelConfig,
    pub optim: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "runs/train".into(),
            max_clips: None,
            camera: CameraBinning::default(),
            model: ModelConfig::default(),
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub max_clips: Option<usize>,
    pub camera: CameraBinning,
    pub optim: TrainConfig,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("runs/train").join(CHECKPOINT_FILE),
            data: "data".into(),
            out: "runs/finetune".into(),
            max_clips: None,
            camera: CameraBinning::default(),
            optim: TrainConfig {
                total_steps: 500,
                warmup_steps: 50,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f32,
    pub final_loss: f32,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn read_training_data(data: &Path, camera: CameraBinning, max_clips: Option<usize>) -> RunResult<(Vocabulary, DatasetShard)> {
    let codebook = load_codebook(&data.join(CODEBOOK_FILE))?;
    let vocab = Vocabulary::new(&codebook, camera).ctx(|| "building vocabulary".into())?;
    let path = data.join(TRAIN_SHARD);
    let mut shard = DatasetShard::read(&path, &vocab).ctx(|| format!("reading {}", path.display()))?;
    if let Some(n) = max_clips {
        if n == 0 {
            return Err(config_failure("max_clips", "must be at least 1"));
        }
        shard.clips.truncate(n);
        shard.seeds.truncate(n);
    }
    Ok((vocab, shard))
}

struct MetricsLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
    error: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: PathBuf) -> RunResult<Self> {
        let file = fs::File::create(&path).ctx(|| format!("creating {}", path.display()))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "step,loss,lr,grad_norm,elapsed_s").ctx(|| format!("writing {}", path.display()))?;
        Ok(Self { out, path, error: None })
    }

    fn record(&mut self, m: &StepMetrics) {
        if self.error.is_some() {
            return;
        }
        let r = writeln!(self.out, "{},{:.6},{:.6e},{:.4},{:.3}", m.step, m.loss, m.lr, m.grad_norm, m.elapsed_s).and_then(|_| self.out.flush());
        self.error = r.err();
    }

    fn finish(mut self) -> RunResult<PathBuf> {
        let path = self.path.clone();
        match self.error.take() {
            Some(e) => Err(Failure::new(format!("writing {}", path.display()), e.into())),
            None => self.out.flush().map(|_| path.clone()).ctx(|| format!("writing {}", path.display())),
        }
    }
}

fn log_step(m: &StepMetrics, log: &mut MetricsLog, every: usize) {
    log.record(m);
    if m.step % every.max(1) == 0 {
        tracing::info!(step = m.step, loss = m.loss, lr = m.lr, grad_norm = m.grad_norm, "train");
    }
}

fn finish_training(
    out: &Path,
    outcome: model::TrainOutcome,
    log: MetricsLog,
) -> RunResult<TrainSummary> {
    let metrics = log.finish()?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&checkpoint).ctx(|| format!("writing {}", checkpoint.display()))?;
    Ok(TrainSummary {
        steps: outcome.metrics.len(),
        first_loss: outcome.metrics.first().map_or(f32::NAN, |m| m.loss),
        final_loss: outcome.metrics.last().map_or(f32::NAN, |m| m.loss),
        checkpoint,
        metrics,
    })
}

/// Resolves the data-dependent model fields. Returns the settings as run.
pub fn train_run(s: &TrainSettings) -> RunResult<TrainSummary> {
    let (vocab, shard) = read_training_data(&s.data, s.camera, s.max_clips)?;
    let mut resolved = s.clone();
    resolved.model.vocab_size = vocab.total_size() as usize;
    resolved.model.max_positions = shard.tokens_per_clip;
    write_resolved(&s.out, "train", &resolved)?;
    let mut log = MetricsLog::create(s.out.join(METRICS_FILE))?;
    let every = (resolved.optim.total_steps / 50).max(1);
    tracing::info!(
        parameters = resolved.model.parameter_count(),
        clips = shard.clips.len(),
        steps = resolved.optim.total_steps,
        "training"
    );
    let outcome = model::train(&shard, &vocab, resolved.model, &resolved.optim, &mut |m| log_step(m, &mut log, every))
        .ctx(|| "training".into())?;
    finish_training(&s.out, outcome, log)
}

pub fn finetune_run(s: &FinetuneSettings) -> RunResult<TrainSummary> {
    let checkpoint = Checkpoint::load(&s.checkpoint).ctx(|| format!("loading checkpoint {}", s.checkpoint.display()))?;
    let (vocab, shard) = read_training_data(&s.data, s.camera, s.max_clips)?;
    write_resolved(&s.out, "finetune-parallel", s)?;
    let mut log = MetricsLog::create(s.out.join(METRICS_FILE))?;
    let every = (s.optim.total_steps / 50).max(1);
    let outcome = model::finetune_parallel(&checkpoint, &shard, &vocab, &s.optim, &mut |m| log_step(m, &mut log, every))
        .ctx(|| "wavefront fine-tuning".into())?;
    finish_training(&s.out, outcome, log)
}

// ---------------------------------------------------------------- generate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    pub checkpoint: PathBuf,
    pub codebook: PathBuf,
    pub out: PathBuf,
    /// World seed for the prompt frame and the scripted actions.
    pub seed: u64,
    pub frames: usize,
    pub decoding: Decoding,
    pub mode: Mode,
    pub sampler: Sampler,
    pub camera: CameraBinning,
    /// Distribution the scripted actions are drawn from (world-model mode).
    pub policy: PolicyConfig,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("runs/train").join(CHECKPOINT_FILE),
            codebook: PathBuf::from("data").join(CODEBOOK_FILE),
            out: "runs/generate".into(),
            seed: 1_000_000,
            frames: 8,
            decoding: Decoding::Diagonal,
            mode: Mode::WorldModel,
            sampler: Sampler::Greedy,
            camera: CameraBinning::default(),
            policy: PolicyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GenerateSummary {
    pub frames: usize,
    pub iterations: Vec<usize>,
    pub frame_ms: Vec<f64>,
    pub tokens: usize,
    pub actions: Vec<ActionRecord>,
    /// Per-frame PSNR against the environment's own rendering (world-model mode).
    pub psnr: Vec<f64>,
}

/// Frames side by side, one row per sequence.
pub fn strip(rows: &[&[Frame]]) -> Frame {
    let (fh, fw) = rows
        .iter()
        .flat_map(|r| r.first())
        .map(|f| (f.height, f.width))
        .next()
        .unwrap_or((visual_codec::FRAME_HEIGHT, visual_codec::FRAME_WIDTH));
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out = Frame::black(fh * rows.len(), fw * cols);
    for (r, frames) in rows.iter().enumerate() {
        for (c, f) in frames.iter().enumerate() {
            for y in 0..fh.min(f.height) {
                for x in 0..fw.min(f.width) {
                    out.set(r * fh + y, c * fw + x, f.get(y, x));
                }
            }
        }
    }
    out
}

pub fn generate_run(s: &GenerateSettings) -> RunResult<GenerateSummary> {
    if s.frames == 0 {
        return Err(config_failure("generate", "frames must be at least 1"));
    }
    let checkpoint = load_checkpoint(&s.checkpoint)?;
    let codebook = matching_codebook(&checkpoint, &s.codebook)?;
    let vocab = checkpoint.meta.vocabulary().ctx(|| "checkpoint vocabulary".into())?;
    let script = gridcraft::rollout(s.seed, s.frames + 1, &s.policy, &vocab.actions.camera).ctx(|| "scripting actions".into())?;
    let prompt_grid = codebook.encode_frame(&script.frames[0]).ctx(|| "encoding prompt".into())?;
    let cfg = DecodeConfig {
        mode: s.mode,
        sampler: s.sampler,
        decoding: s.decoding,
        frames_to_generate: s.frames,
    };
    let blocks: Vec<ActionTokenBlock> = match s.mode {
        Mode::WorldModel => script.actions[..s.frames]
            .iter()
            .map(|a| vocab.actions.encode(a))
            .collect::<crate::Result<_>>()
            .ctx(|| "encoding actions".into())?,
        Mode::Agent => Vec::new(),
    };
    let forced = (s.mode == Mode::WorldModel).then_some(blocks.as_slice());
    let prompt = Prompt::single(prompt_grid.clone());
    let result: GenerationResult = match s.decoding {
        Decoding::Autoregressive => decoding::decode_ar(&checkpoint, &prompt, forced, &cfg),
        Decoding::Diagonal => decoding::decode_diagonal(&checkpoint, &prompt, forced, &cfg),
    }
    .ctx(|| "generating".into())?;

    let mut frames = vec![codebook.decode_tokens(&prompt_grid).ctx(|| "decoding prompt".into())?];
    frames.extend(result.decode_frames(&codebook).ctx(|| "decoding frames".into())?);
    let actions: Vec<ActionRecord> = result
        .actions
        .iter()
        .map(|b| vocab.actions.decode(b))
        .collect::<crate::Result<_>>()
        .ctx(|| "decoding actions".into())?;

    fs::create_dir_all(&s.out).ctx(|| format!("creating {}", s.out.display()))?;
    write_resolved(&s.out, "generate", s)?;
    for (i, f) in frames.iter().enumerate() {
        let p = s.out.join(format!("frame_{i:02}.ppm"));
        fs::write(&p, f.to_ppm()).ctx(|| format!("writing {}", p.display()))?;
    }
    let (image, psnr) = match s.mode {
        Mode::WorldModel => {
            let truth = &script.frames[..=s.frames];
            let psnr = frames[1..]
                .iter()
                .zip(&truth[1..])
                .map(|(g, t)| visual_codec::psnr(t, g))
                .collect::<crate::Result<Vec<_>>>()
                .ctx(|| "scoring frames".into())?;
            (strip(&[&frames, truth]), psnr)
        }
        Mode::Agent => (strip(&[&frames]), Vec::new()),
    };
    let p = s.out.join("strip.ppm");
    fs::write(&p, image.to_ppm()).ctx(|| format!("writing {}", p.display()))?;
    let summary = GenerateSummary {
        frames: result.grids.len(),
        iterations: result.iterations,
        frame_ms: result.frame_ms,
        tokens: result.tokens,
        actions,
        psnr,
    };
    write_json(&s.out.join("generation.json"), &summary)?;
    Ok(summary)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> RunResult<()> {
    let bytes = serde_json::to_vec_pretty(value).ctx(|| format!("serializing {}", path.display()))?;
    fs::write(path, bytes).ctx(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Without a checkpoint the clips' own frames are scored.
    pub checkpoint: Option<PathBuf>,
    pub data: PathBuf,
    pub shard: String,
    pub max_clips: usize,
    pub out: PathBuf,
    pub camera: CameraBinning,
    pub eval: EvalConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: "data".into(),
            shard: TEST_SHARD.into(),
            max_clips: 200,
            out: "runs/eval".into(),
            camera: CameraBinning::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Rebuilds environment clips from a shard: seeds and action tokens are
/// replayed, and the first frame is checked against the stored tokens.
pub fn clips_from_shard(shard: &DatasetShard, vocab: &Vocabulary, codebook: &Codebook, max_clips: usize) -> crate::Result<Vec<Clip>> {
    let camera = vocab.actions.camera;
    shard
        .clips
        .iter()
        .zip(&shard.seeds)
        .take(max_clips)
        .map(|(tokens, &seed)| {
            let pairs = sequence::split(tokens, vocab)?;
            let actions = pairs
                .iter()
                .map(|(_, b)| vocab.actions.decode(b))
                .collect::<crate::Result<Vec<_>>>()?;
            let clip = gridcraft::replay(seed, &actions, &camera);
            if codebook.encode_frame(&clip.frames[0])? != pairs[0].0 {
                return Err(Error::CorruptClip {
                    pair: 0,
                    reason: format!("seed {seed} does not reproduce the stored first frame"),
                });
            }
            Ok(clip)
        })
        .collect()
}

pub fn eval_run(s: &EvalSettings) -> RunResult<EvaluationReport> {
    let codebook_path = s.data.join(CODEBOOK_FILE);
    let checkpoint = s.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let (vocab, codebook) = match &checkpoint {
        Some(ck) => (
            ck.meta.vocabulary().ctx(|| "checkpoint vocabulary".into())?,
            matching_codebook(ck, &codebook_path)?,
        ),
        None => {
            let codebook = load_codebook(&codebook_path)?;
            (Vocabulary::new(&codebook, s.camera).ctx(|| "building vocabulary".into())?, codebook)
        }
    };
    let shard_path = s.data.join(&s.shard);
    let shard = DatasetShard::read(&shard_path, &vocab).ctx(|| format!("reading {}", shard_path.display()))?;
    let clips = clips_from_shard(&shard, &vocab, &codebook, s.max_clips).ctx(|| format!("rebuilding clips from {}", shard_path.display()))?;
    let idm = OracleIdm::new(vocab.actions.camera);
    let report = match &checkpoint {
        Some(ck) => eval::controllability_pipeline(ck, &codebook, &clips, &s.eval, &idm),
        None => eval::evaluate_ground_truth(&clips, &idm),
    }
    .ctx(|| "evaluating".into())?;
    write_resolved(&s.out, "eval", s)?;
    write_json(&s.out.join("report.json"), &report)?;
    let p = s.out.join("report.txt");
    fs::write(&p, report.table()).ctx(|| format!("writing {}", p.display()))?;
    Ok(report)
}

// ---------------------------------------------------------------- bench

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub checkpoint: PathBuf,
    pub codebook: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub bench: BenchConfig,
    pub policy: PolicyConfig,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("runs/train").join(CHECKPOINT_FILE),
            codebook: PathBuf::from("data").join(CODEBOOK_FILE),
            out: "runs/bench".into(),
            seed: 2_000_000,
            bench: BenchConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

pub fn bench_run(s: &BenchSettings) -> RunResult<BenchReport> {
    let checkpoint = load_checkpoint(&s.checkpoint)?;
    let codebook = matching_codebook(&checkpoint, &s.codebook)?;
    let report = bench_checkpoint(&checkpoint, &codebook, s.seed, &s.policy, &s.bench)?;
    write_resolved(&s.out, "bench", s)?;
    write_json(&s.out.join("bench.json"), &report)?;
    let p = s.out.join("bench.csv");
    fs::write(&p, report.to_csv()).ctx(|| format!("writing {}", p.display()))?;
    Ok(report)
}

/// Benchmarks on a prompt and action script rolled out from `seed`.
pub fn bench_checkpoint(
    checkpoint: &Arc<Checkpoint>,
    codebook: &Codebook,
    seed: u64,
    policy: &PolicyConfig,
    cfg: &BenchConfig,
) -> RunResult<BenchReport> {
    let vocab = checkpoint.meta.vocabulary().ctx(|| "checkpoint vocabulary".into())?;
    let script = gridcraft::rollout(seed, cfg.frames_per_episode + 1, policy, &vocab.actions.camera).ctx(|| "scripting actions".into())?;
    let prompt = Prompt::single(codebook.encode_frame(&script.frames[0]).ctx(|| "encoding prompt".into())?);
    let actions = script.actions[..cfg.frames_per_episode]
        .iter()
        .map(|a| vocab.actions.encode(a))
        .collect::<crate::Result<Vec<_>>>()
        .ctx(|| "encoding actions".into())?;
    decoding::benchmark(checkpoint, &prompt, &actions, cfg).ctx(|| "benchmarking".into())
}

// ---------------------------------------------------------------- dump-shard

pub fn dump_shard(path: &Path, max_clips: usize) -> RunResult<String> {
    let shard = DatasetShard::read_unchecked(path).ctx(|| format!("reading {}", path.display()))?;
    Ok(shard.dump(max_clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_tables() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, "[train]\nout = \"a\"\n[train.optim]\ntotal_steps = 7\n").unwrap();
        let s: TrainSettings = resolve(
            Some(&file),
            "train",
            &["model.hidden_dim=64".into(), "out=b/c".into(), "optim.target_loss=0.5".into()],
        )
        .unwrap();
        assert_eq!(s.out, PathBuf::from("b/c"));
        assert_eq!(s.optim.total_steps, 7);
        assert_eq!(s.optim.target_loss, Some(0.5));
        assert_eq!(s.model.hidden_dim, 64);
        assert_eq!(s.model.num_layers, ModelConfig::default().num_layers);
    }

    #[test]
    fn partial_tables_keep_section_defaults() {
        let s: FinetuneSettings = resolve(None, "finetune-parallel", &["optim.total_steps=80".into()]).unwrap();
        assert_eq!(s.optim.total_steps, 80);
        assert_eq!(s.optim.warmup_steps, FinetuneSettings::default().optim.warmup_steps);
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = GenerateSettings {
            seed: 9,
            sampler: Sampler::TopK {
                k: 4,
                temperature: 0.5,
                seed: 3,
            },
            ..GenerateSettings::default()
        };
        let path = write_resolved(dir.path(), "generate", &s).unwrap();
        let back: GenerateSettings = resolve(Some(&path), "generate", &[]).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bad_settings_are_config_errors() {
        let e = resolve::<TrainSettings>(None, "train", &["optim.nonsense=1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        let e = resolve::<TrainSettings>(None, "train", &["novalue".into()]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        let e = resolve::<TrainSettings>(Some(Path::new("/nonexistent/run.toml")), "train", &[]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_DATA);
    }

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(exit_code(&Error::config("x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::InsufficientData("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::ContextExceeded { needed: 2, max: 1 }), EXIT_RUNTIME);
        let nested = Error::InClip {
            seed: 1,
            source: Box::new(Error::CorruptClip {
                pair: 0,
                reason: "x".into(),
            }),
        };
        assert_eq!(exit_code(&nested), EXIT_DATA);
    }

    #[test]
    fn strip_lays_out_rows() {
        let mut a = Frame::black(2, 3);
        a.set(1, 2, [9, 9, 9]);
        let s = strip(&[&[a.clone(), a.clone()], &[a.clone()]]);
        assert_eq!((s.height, s.width), (4, 6));
        assert_eq!(s.get(1, 5), [9, 9, 9]);
        assert_eq!(s.get(3, 2), [9, 9, 9]);
        assert_eq!(s.get(3, 5), [0, 0, 0]);
    }
}
