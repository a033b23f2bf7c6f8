//! Websocket session service: one episode per connection, diagonal decoding,
//! one generated frame per action message.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use super::CHECKPOINT_FILE;
use crate::action_codec::ActionRecord;
use crate::decoding::{Decoding, Episode, Mode, Prompt, Sampler};
use crate::error::{Error, Result};
use crate::gridcraft::{generate_world, render, EventFlags};
use crate::model::Checkpoint;
use crate::visual_codec::{Codebook, TokenGrid};

/// Frames averaged into the reported fps.
const FPS_WINDOW: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSettings {
    pub checkpoint: PathBuf,
    pub codebook: PathBuf,
    pub bind: String,
    /// Actions buffered while a frame is being generated; overflow is dropped.
    pub queue: usize,
    pub agent_top_k: usize,
    pub agent_temperature: f32,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("runs/train").join(CHECKPOINT_FILE),
            codebook: PathBuf::from("data").join(super::CODEBOOK_FILE),
            bind: "127.0.0.1:8765".into(),
            queue: 4,
            agent_top_k: 8,
            agent_temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Starts a new episode from the world generated by `seed`. `mode`
    /// defaults to world-model play.
    Reset {
        seed: u64,
        #[serde(default)]
        mode: Option<Mode>,
    },
    /// In agent mode the fields are ignored and the model picks the action.
    Action(ActionRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        width: usize,
        height: usize,
        /// Base64 of row-major RGB bytes.
        rgb: String,
        frame_index: u64,
        gen_ms: f64,
        fps: f64,
    },
    AgentAction(ActionRecord),
    Error {
        code: String,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code: code.into(),
            message: message.into(),
        }
    }
}

/// Shared, immutable model state plus per-session settings.
pub struct SessionService {
    checkpoint: Arc<Checkpoint>,
    codebook: Codebook,
    settings: ServeSettings,
}

impl SessionService {
    pub fn new(checkpoint: Arc<Checkpoint>, codebook: Codebook, settings: ServeSettings) -> Result<Self> {
        let vocab = checkpoint.meta.vocabulary()?;
        if vocab.codebook_digest != codebook.digest() {
            return Err(Error::config("codebook does not match the checkpoint's vocabulary"));
        }
        if settings.queue == 0 {
            return Err(Error::config("queue must hold at least one action"));
        }
        if settings.agent_top_k == 0 || !(settings.agent_temperature > 0.0) {
            return Err(Error::config("agent sampling needs top_k ≥ 1 and a positive temperature"));
        }
        Ok(Self {
            checkpoint,
            codebook,
            settings,
        })
    }

    pub fn settings(&self) -> &ServeSettings {
        &self.settings
    }

    pub fn session(self: &Arc<Self>) -> Session {
        Session {
            service: self.clone(),
            episode: None,
            mode: Mode::WorldModel,
            frame_index: 0,
            recent_ms: VecDeque::new(),
        }
    }

    fn health(&self) -> serde_json::Value {
        let meta = &self.checkpoint.meta;
        serde_json::json!({
            "status": "ok",
            "version": env!("CARGO_PKG_VERSION"),
            "model": self.checkpoint.model.config(),
            "regime": meta.regime,
            "grid": { "h": meta.grid_h, "w": meta.grid_w },
            "image_vocab_size": meta.image_vocab_size,
            "decoding": Decoding::Diagonal,
            "queue": self.settings.queue,
        })
    }
}

/// Decode state of one connection.
pub struct Session {
    service: Arc<SessionService>,
    episode: Option<Episode>,
    mode: Mode,
    frame_index: u64,
    recent_ms: VecDeque<f64>,
}

impl Session {
    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Reset { seed, mode } => match self.reset(seed, mode.unwrap_or(Mode::WorldModel)) {
                Ok(m) => vec![m],
                Err(e) => {
                    self.episode = None;
                    vec![ServerMessage::error(e.code(), e.to_string())]
                }
            },
            ClientMessage::Action(a) => self.act(&a),
        }
    }

    fn frame_message(&self, grid: &TokenGrid, gen_ms: f64) -> Result<ServerMessage> {
        let frame = self.service.codebook.decode_tokens(grid)?;
        let total: f64 = self.recent_ms.iter().sum();
        let fps = if total > 0.0 { self.recent_ms.len() as f64 * 1e3 / total } else { 0.0 };
        Ok(ServerMessage::Frame {
            width: frame.width,
            height: frame.height,
            rgb: base64::engine::general_purpose::STANDARD.encode(&frame.pixels),
            frame_index: self.frame_index,
            gen_ms,
            fps,
        })
    }

    fn reset(&mut self, seed: u64, mode: Mode) -> Result<ServerMessage> {
        let svc = self.service.clone();
        let sampler = match mode {
            Mode::WorldModel => Sampler::Greedy,
            Mode::Agent => Sampler::TopK {
                k: svc.settings.agent_top_k,
                temperature: svc.settings.agent_temperature,
                seed,
            },
        };
        let first = render(&generate_world(seed), &EventFlags::default());
        let grid = svc.codebook.encode_frame(&first)?;
        let mut ep = Episode::new(svc.checkpoint.clone(), Decoding::Diagonal, sampler)?;
        ep.start(&Prompt::single(grid.clone()))?;
        self.episode = Some(ep);
        self.mode = mode;
        self.frame_index = 0;
        self.recent_ms.clear();
        self.frame_message(&grid, 0.0)
    }

    fn act(&mut self, a: &ActionRecord) -> Vec<ServerMessage> {
        let Some(ep) = self.episode.as_mut() else {
            return vec![ServerMessage::error("no_episode", "send a reset message first")];
        };
        if ep.remaining_frames() == 0 {
            self.episode = None;
            return vec![ServerMessage::error(
                "context_exceeded",
                "the episode has used its whole context; send a reset message",
            )];
        }
        let vocab = ep.vocabulary().clone();
        let block = match self.mode {
            Mode::WorldModel => match vocab.actions.encode(a) {
                Ok(b) => Some(b),
                Err(e) => return vec![ServerMessage::error("bad_message", e.to_string())],
            },
            Mode::Agent => None,
        };
        let step = match ep.step(block.as_ref()) {
            Ok(s) => s,
            Err(e) => {
                self.episode = None;
                return vec![ServerMessage::error(e.code(), format!("{e}; session reset"))];
            }
        };
        self.frame_index += 1;
        if self.recent_ms.len() == FPS_WINDOW {
            self.recent_ms.pop_front();
        }
        self.recent_ms.push_back(step.elapsed_ms);
        let mut out = Vec::with_capacity(2);
        if self.mode == Mode::Agent {
            match vocab.actions.decode(&step.action) {
                Ok(r) => out.push(ServerMessage::AgentAction(r)),
                Err(e) => out.push(ServerMessage::error(e.code(), e.to_string())),
            }
        }
        match self.frame_message(&step.grid, step.elapsed_ms) {
            Ok(m) => out.push(m),
            Err(e) => {
                self.episode = None;
                out.push(ServerMessage::error(e.code(), format!("{e}; session reset")));
            }
        }
        out
    }
}

pub fn router(service: Arc<SessionService>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/ws", get(upgrade))
        .with_state(service)
}

pub async fn serve(listener: tokio::net::TcpListener, service: Arc<SessionService>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

async fn health(State(svc): State<Arc<SessionService>>) -> impl IntoResponse {
    Json(svc.health())
}

async fn upgrade(ws: WebSocketUpgrade, State(svc): State<Arc<SessionService>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| run_session(socket, svc))
}

fn encode(m: &ServerMessage) -> Message {
    Message::Text(serde_json::to_string(m).expect("server messages serialize"))
}

async fn run_session(socket: WebSocket, svc: Arc<SessionService>) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<ServerMessage>();
    let (work_tx, mut work_rx) = mpsc::channel::<ClientMessage>(svc.settings.queue);

    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            if sink.send(encode(&m)).await.is_err() {
                break;
            }
        }
    });

    let worker_out = out_tx.clone();
    let mut session = svc.session();
    let worker = tokio::spawn(async move {
        while let Some(msg) = work_rx.recv().await {
            let Ok((s, replies)) = tokio::task::spawn_blocking(move || {
                let replies = session.handle(msg);
                (session, replies)
            })
            .await
            else {
                break;
            };
            session = s;
            for r in replies {
                if worker_out.send(r).is_err() {
                    return;
                }
            }
        }
    });

    while let Some(Ok(frame)) = stream.next().await {
        let text = match frame {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                let _ = out_tx.send(ServerMessage::error("bad_message", "binary messages are not supported"));
                continue;
            }
            _ => continue,
        };
        let msg: ClientMessage = match serde_json::from_str(&text) {
            Ok(m) => m,
            Err(e) => {
                let _ = out_tx.send(ServerMessage::error("bad_message", e.to_string()));
                continue;
            }
        };
        match msg {
            ClientMessage::Reset { .. } => {
                if work_tx.send(msg).await.is_err() {
                    break;
                }
            }
            ClientMessage::Action(_) => match work_tx.try_send(msg) {
                Ok(()) => {}
                Err(mpsc::error::TrySendError::Full(_)) => {
                    let _ = out_tx.send(ServerMessage::error(
                        "action_dropped",
                        format!("{} actions already queued; action dropped", svc.settings.queue),
                    ));
                }
                Err(mpsc::error::TrySendError::Closed(_)) => break,
            },
        }
    }
    drop(work_tx);
    let _ = worker.await;
    drop(out_tx);
    let _ = writer.await;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_parse() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"reset","seed":5}"#).unwrap();
        assert_eq!(m, ClientMessage::Reset { seed: 5, mode: None });
        let m: ClientMessage = serde_json::from_str(r#"{"type":"reset","seed":5,"mode":"agent"}"#).unwrap();
        assert_eq!(m, ClientMessage::Reset { seed: 5, mode: Some(Mode::Agent) });
        let m: ClientMessage = serde_json::from_str(
            r#"{"type":"action","move":"forward","strafe":"left","modifier":"none","use":false,"attack":true,"jump":false,"drop":false,"camera_dx":3.5,"camera_dy":-1.0}"#,
        )
        .unwrap();
        let ClientMessage::Action(a) = m else { panic!("not an action") };
        assert!(a.attack);
        assert_eq!(a.camera_dx, 3.5);
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"action","move":"sideways"}"#).is_err());
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"teleport"}"#).is_err());
    }

    #[test]
    fn server_messages_are_tagged() {
        let v = serde_json::to_value(ServerMessage::error("bad_message", "x")).unwrap();
        assert_eq!(v, serde_json::json!({"type":"error","code":"bad_message","message":"x"}));
        let v = serde_json::to_value(ServerMessage::AgentAction(ActionRecord::noop())).unwrap();
        assert_eq!(v["type"], "agent_action");
        assert_eq!(v["move"], "none");
    }
}
