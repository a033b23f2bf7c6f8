//! C interface to wfworld: load a checkpoint and codebook, open decoding
//! sessions and step them one frame at a time.
//!
//! Every function returns a [`WfStatus`]; on failure the message is
//! available from [`wf_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use wfworld::action_codec::{ActionRecord, Modifier, Move, Strafe};
use wfworld::decoding::{speedup_ratio, Decoding, Episode, Prompt, Sampler};
use wfworld::gridcraft::{generate_world, render, EventFlags};
use wfworld::model::{Checkpoint, MaskRegime};
use wfworld::visual_codec::{Codebook, TokenGrid};
use wfworld::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    ContextExceeded = 5,
    Runtime = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

pub const WF_MOVE_NONE: u8 = 0;
pub const WF_MOVE_FORWARD: u8 = 1;
pub const WF_MOVE_BACKWARD: u8 = 2;
pub const WF_STRAFE_NONE: u8 = 0;
pub const WF_STRAFE_LEFT: u8 = 1;
pub const WF_STRAFE_RIGHT: u8 = 2;
pub const WF_MODIFIER_NONE: u8 = 0;
pub const WF_MODIFIER_SPRINT: u8 = 1;
pub const WF_MODIFIER_SNEAK: u8 = 2;
pub const WF_DECODING_AUTOREGRESSIVE: u8 = 0;
pub const WF_DECODING_DIAGONAL: u8 = 1;

/// One player action. Flags are 0 or 1; camera deltas are degrees.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WfAction {
    pub movement: u8,
    pub strafe: u8,
    pub modifier: u8,
    pub use_item: u8,
    pub attack: u8,
    pub jump: u8,
    pub drop: u8,
    pub camera_dx: f64,
    pub camera_dy: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WfModelInfo {
    pub frame_width: usize,
    pub frame_height: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub vocab_size: usize,
    pub image_vocab_size: usize,
    pub max_positions: usize,
    pub parameter_count: usize,
    /// 1 when fine-tuned under the wavefront mask.
    pub wavefront: u8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WfStepInfo {
    pub frame_index: u64,
    /// Forward passes spent on the frame's image tokens.
    pub iterations: usize,
    pub gen_ms: f64,
    /// The action that produced the frame (sampled when none was given).
    pub action: WfAction,
}

/// A loaded checkpoint and its codebook.
pub struct WfModel {
    checkpoint: Arc<Checkpoint>,
    codebook: Arc<Codebook>,
}

/// One episode. Holds its own reference to the model.
pub struct WfSession {
    episode: Episode,
    codebook: Arc<Codebook>,
    frame: Vec<u8>,
    frame_index: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> WfStatus {
    match e {
        Error::Config(_) => WfStatus::Config,
        Error::InvalidInput(_) | Error::MalformedBlock { .. } | Error::InvalidToken { .. } => WfStatus::InvalidArgument,
        Error::CorruptClip { .. }
        | Error::CorruptFile { .. }
        | Error::IncompatibleVocabulary { .. }
        | Error::InsufficientData(_)
        | Error::Io(_)
        | Error::Json(_) => WfStatus::Data,
        Error::ContextExceeded { .. } => WfStatus::ContextExceeded,
        Error::Diverged { .. } | Error::UnparseableFrame(_) => WfStatus::Runtime,
        Error::InClip { source, .. } => status_of(source),
    }
}

struct Failure(WfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), format!("{}: {e}", e.code()))
    }
}

fn null(name: &str) -> Failure {
    Failure(WfStatus::NullArgument, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            WfStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(WfStatus::InvalidArgument, format!("{name} is not UTF-8")))?;
    Ok(Path::new(s))
}

fn record_of(a: &WfAction) -> Result<ActionRecord, Failure> {
    let bad = |field: &str, v: u8| Failure(WfStatus::InvalidArgument, format!("action.{field} = {v} is out of range"));
    let flag = |field: &str, v: u8| match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(bad(field, v)),
    };
    Ok(ActionRecord {
        movement: match a.movement {
            WF_MOVE_NONE => Move::None,
            WF_MOVE_FORWARD => Move::Forward,
            WF_MOVE_BACKWARD => Move::Backward,
            v => return Err(bad("movement", v)),
        },
        strafe: match a.strafe {
            WF_STRAFE_NONE => Strafe::None,
            WF_STRAFE_LEFT => Strafe::Left,
            WF_STRAFE_RIGHT => Strafe::Right,
            v => return Err(bad("strafe", v)),
        },
        modifier: match a.modifier {
            WF_MODIFIER_NONE => Modifier::None,
            WF_MODIFIER_SPRINT => Modifier::Sprint,
            WF_MODIFIER_SNEAK => Modifier::Sneak,
            v => return Err(bad("modifier", v)),
        },
        use_item: flag("use_item", a.use_item)?,
        attack: flag("attack", a.attack)?,
        jump: flag("jump", a.jump)?,
        drop: flag("drop", a.drop)?,
        camera_dx: a.camera_dx,
        camera_dy: a.camera_dy,
    })
}

fn action_of(r: &ActionRecord) -> WfAction {
    WfAction {
        movement: match r.movement {
            Move::None => WF_MOVE_NONE,
            Move::Forward => WF_MOVE_FORWARD,
            Move::Backward => WF_MOVE_BACKWARD,
        },
        strafe: match r.strafe {
            Strafe::None => WF_STRAFE_NONE,
            Strafe::Left => WF_STRAFE_LEFT,
            Strafe::Right => WF_STRAFE_RIGHT,
        },
        modifier: match r.modifier {
            Modifier::None => WF_MODIFIER_NONE,
            Modifier::Sprint => WF_MODIFIER_SPRINT,
            Modifier::Sneak => WF_MODIFIER_SNEAK,
        },
        use_item: r.use_item as u8,
        attack: r.attack as u8,
        jump: r.jump as u8,
        drop: r.drop as u8,
        camera_dx: r.camera_dx,
        camera_dy: r.camera_dy,
    }
}

/// Library version, static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Exact wavefront speedup `h·w / (h+w−1)` as a reduced fraction.
///
/// # Safety
/// `num` and `den` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_speedup_ratio(h: usize, w: usize, num: *mut u64, den: *mut u64) -> WfStatus {
    guard(|| {
        if num.is_null() || den.is_null() {
            return Err(null("num/den"));
        }
        let r = speedup_ratio(h, w)?;
        *num = r.num;
        *den = r.den;
        Ok(())
    })
}

/// Loads a checkpoint and the codebook it was trained with.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_model_load(
    checkpoint_path: *const c_char,
    codebook_path: *const c_char,
    out: *mut *mut WfModel,
) -> WfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let checkpoint = Checkpoint::load(path_arg(checkpoint_path, "checkpoint_path")?)?;
        let codebook = Codebook::load(path_arg(codebook_path, "codebook_path")?)?;
        if checkpoint.meta.vocabulary()?.codebook_digest != codebook.digest() {
            return Err(Failure(WfStatus::Data, "codebook does not match the checkpoint's vocabulary".into()));
        }
        *out = Box::into_raw(Box::new(WfModel {
            checkpoint: Arc::new(checkpoint),
            codebook: Arc::new(codebook),
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`wf_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn wf_model_free(model: *mut WfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_model_info(model: *const WfModel, out: *mut WfModelInfo) -> WfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let meta = &m.checkpoint.meta;
        let cfg = m.checkpoint.model.config();
        let layout = meta.frame_layout()?;
        *out = WfModelInfo {
            frame_width: layout.w * wfworld::visual_codec::PATCH,
            frame_height: layout.h * wfworld::visual_codec::PATCH,
            grid_h: layout.h,
            grid_w: layout.w,
            vocab_size: cfg.vocab_size,
            image_vocab_size: meta.image_vocab_size as usize,
            max_positions: cfg.max_positions,
            parameter_count: cfg.parameter_count(),
            wavefront: (meta.regime == MaskRegime::Wavefront) as u8,
        };
        Ok(())
    })
}

fn decode_rgb(codebook: &Codebook, grid: &TokenGrid) -> Result<Vec<u8>, Failure> {
    Ok(codebook.decode_tokens(grid)?.pixels)
}

/// Opens an episode on the world generated by `world_seed`. The prompt
/// frame is available through [`wf_session_frame`].
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_session_new(model: *const WfModel, world_seed: u64, decoding: u8, out: *mut *mut WfSession) -> WfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let decoding = match decoding {
            WF_DECODING_AUTOREGRESSIVE => Decoding::Autoregressive,
            WF_DECODING_DIAGONAL => Decoding::Diagonal,
            v => return Err(Failure(WfStatus::InvalidArgument, format!("decoding = {v} is out of range"))),
        };
        let grid = m.codebook.encode_frame(&render(&generate_world(world_seed), &EventFlags::default()))?;
        let mut episode = Episode::new(m.checkpoint.clone(), decoding, Sampler::Greedy)?;
        episode.start(&Prompt::single(grid.clone()))?;
        *out = Box::into_raw(Box::new(WfSession {
            episode,
            frame: decode_rgb(&m.codebook, &grid)?,
            codebook: m.codebook.clone(),
            frame_index: 0,
        }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`wf_session_new`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn wf_session_free(session: *mut WfSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Copies the current frame (row-major RGB, `frame_width·frame_height·3`
/// bytes) into `rgb`.
///
/// # Safety
/// `session` must be a live handle; `rgb` must be valid for `rgb_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn wf_session_frame(session: *const WfSession, rgb: *mut u8, rgb_len: usize) -> WfStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        copy_frame(&s.frame, rgb, rgb_len)
    })
}

unsafe fn copy_frame(frame: &[u8], rgb: *mut u8, rgb_len: usize) -> Result<(), Failure> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    if rgb_len < frame.len() {
        return Err(Failure(
            WfStatus::BufferTooSmall,
            format!("frame needs {} bytes, buffer holds {rgb_len}", frame.len()),
        ));
    }
    ptr::copy_nonoverlapping(frame.as_ptr(), rgb, frame.len());
    Ok(())
}

/// Frames that still fit in the session's context.
///
/// # Safety
/// `session` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_session_remaining(session: *const WfSession, out: *mut usize) -> WfStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s.episode.remaining_frames();
        Ok(())
    })
}

/// Generates the next frame. With `action` null the model chooses the
/// action itself. `rgb` receives the frame; `info` may be null.
///
/// # Safety
/// `session` must be a live handle; `action` null or valid; `rgb` valid for
/// `rgb_len` bytes; `info` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn wf_session_step(
    session: *mut WfSession,
    action: *const WfAction,
    rgb: *mut u8,
    rgb_len: usize,
    info: *mut WfStepInfo,
) -> WfStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let vocab = s.episode.vocabulary().clone();
        let block = match action.as_ref() {
            Some(a) => Some(vocab.actions.encode(&record_of(a)?)?),
            None => None,
        };
        let needed = s.frame.len();
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if rgb_len < needed {
            return Err(Failure(
                WfStatus::BufferTooSmall,
                format!("frame needs {needed} bytes, buffer holds {rgb_len}"),
            ));
        }
        let step = s.episode.step(block.as_ref())?;
        s.frame = decode_rgb(&s.codebook, &step.grid)?;
        s.frame_index += 1;
        copy_frame(&s.frame, rgb, rgb_len)?;
        if let Some(info) = info.as_mut() {
            *info = WfStepInfo {
                frame_index: s.frame_index,
                iterations: step.iterations,
                gen_ms: step.elapsed_ms,
                action: action_of(&vocab.actions.decode(&step.action)?),
            };
        }
        Ok(())
    })
}
