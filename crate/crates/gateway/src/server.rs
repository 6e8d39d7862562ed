//! HTTP and WebSocket front end.
//!
//! One engine task owns the [`Runtime`]; connections talk to it over a
//! channel, so every inbound message is stamped and processed in arrival
//! order. Outbound actions are broadcast to the connections joined to the
//! action's chat channel after they have been logged.
//!
//! Endpoints:
//!
//! * `GET /ws` — frame protocol described in [`crate::wire`].
//! * `POST /attachments/{name}` — raw body upload; answers with the
//!   attachment object to put in a `message` frame.
//! * `GET /attachments/{ref}` — download an uploaded file.
//! * `GET /channels/{id}/history?since=N` — audit records of a channel.
//! * `GET /channels/{id}/session` — current session status.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use etbot_core::store::{EventRecord, Selector};
use etbot_core::{
    ChannelId, Engine, EventStore, InboundMessage, JsonlStore, MediaKind, OutboundAction, Runtime, Timestamp,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};

use crate::config::ServiceConfig;
use crate::wire::{decode_frame, encode_frame, FrameType, WireAttachment, WireFrame, PROTOCOL_VERSION};

/// Hard cap on a single WebSocket message; frames above the configured
/// frame limit but below this still get an `oversized` error frame.
const WS_MESSAGE_CAP: usize = 16 * 1024 * 1024;

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        Timestamp(ms as u64)
    })
}

/// Something that happened on a chat channel, fanned out to connections.
#[derive(Clone, Debug)]
pub enum ChannelEvent {
    Tester { conn: u64, msg: InboundMessage },
    Action(OutboundAction),
}

impl ChannelEvent {
    fn channel(&self) -> &ChannelId {
        match self {
            ChannelEvent::Tester { msg, .. } => &msg.channel_id,
            ChannelEvent::Action(a) => &a.channel_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub channel: String,
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ends_at: Option<u64>,
    pub remaining_ms: u64,
    pub charters: Vec<String>,
    pub open_flow: bool,
}

enum Command {
    Inbound {
        conn: u64,
        msg: InboundMessage,
        done: oneshot::Sender<Result<(), String>>,
    },
    Tick {
        done: Option<oneshot::Sender<()>>,
    },
    History {
        channel: ChannelId,
        since: u64,
        done: oneshot::Sender<Result<Vec<EventRecord>, String>>,
    },
    Session {
        channel: ChannelId,
        done: oneshot::Sender<SessionView>,
    },
}

struct EngineActor<S> {
    runtime: Runtime<S>,
    clock: Clock,
    last: Timestamp,
    events: broadcast::Sender<ChannelEvent>,
}

impl<S: EventStore> EngineActor<S> {
    /// The engine clock never runs backwards, even if the wall clock does.
    fn now(&mut self) -> Timestamp {
        self.last = self.last.max((self.clock)());
        self.last
    }

    fn publish(&self, action: &OutboundAction) {
        // No subscribers is fine: the action is already in the audit log.
        let _ = self.events.send(ChannelEvent::Action(action.clone()));
    }

    fn handle(&mut self, command: Command) {
        match command {
            Command::Inbound { conn, mut msg, done } => {
                msg.timestamp = self.now();
                let echo = ChannelEvent::Tester { conn, msg: msg.clone() };
                let result = self.runtime.deliver(msg);
                let result = result.map(|deliveries| {
                    let _ = self.events.send(echo);
                    for d in &deliveries {
                        self.publish(&d.action);
                    }
                });
                let _ = done.send(result.map_err(|e| e.to_string()));
            }
            Command::Tick { done } => {
                let now = self.now();
                let channels: Vec<ChannelId> = self.runtime.channel_ids().cloned().collect();
                for channel in channels {
                    match self.runtime.advance_channel(&channel, now) {
                        Ok(deliveries) => deliveries.iter().for_each(|d| self.publish(&d.action)),
                        Err(e) => tracing::debug!(%channel, "tick skipped: {e}"),
                    }
                }
                if let Some(done) = done {
                    let _ = done.send(());
                }
            }
            Command::History { channel, since, done } => {
                let records = self
                    .runtime
                    .store()
                    .query(&Selector::Channel(channel))
                    .map(|rs| rs.into_iter().filter(|r| r.offset >= since).collect())
                    .map_err(|e| e.to_string());
                let _ = done.send(records);
            }
            Command::Session { channel, done } => {
                let now = self.now();
                let state = self.runtime.state(&channel);
                let active = state.and_then(|s| s.active());
                let _ = done.send(SessionView {
                    channel: channel.to_string(),
                    active: active.is_some(),
                    session_id: active.map(|s| s.session_id.to_string()),
                    started_at: active.map(|s| s.started_at.millis()),
                    ends_at: active.map(|s| s.ends_at().millis()),
                    remaining_ms: active.map_or(0, |s| s.remaining_ms(now)),
                    charters: state.map_or_else(Vec::new, |s| s.charters.iter().map(|c| c.name.clone()).collect()),
                    open_flow: state.is_some_and(|s| s.open_flow.is_some()),
                });
            }
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    commands: mpsc::Sender<Command>,
    events: broadcast::Sender<ChannelEvent>,
    attachment_dir: Arc<PathBuf>,
    max_frame_bytes: usize,
    next_conn: Arc<AtomicU64>,
    next_upload: Arc<AtomicU64>,
}

impl AppState {
    /// Starts the engine task. `tick` is the timer resolution; `None`
    /// disables the ticker, in which case call [`AppState::tick`] manually.
    pub fn spawn<S>(runtime: Runtime<S>, clock: Clock, config: &ServiceConfig, tick: Option<Duration>) -> AppState
    where
        S: EventStore + Send + 'static,
    {
        let (commands, mut rx) = mpsc::channel::<Command>(1024);
        let (events, _) = broadcast::channel(1024);
        let mut actor = EngineActor {
            runtime,
            clock,
            last: Timestamp::ZERO,
            events: events.clone(),
        };
        tokio::spawn(async move {
            while let Some(command) = rx.recv().await {
                actor.handle(command);
            }
        });
        if let Some(period) = tick {
            let ticker = commands.clone();
            tokio::spawn(async move {
                let mut interval = tokio::time::interval(period);
                loop {
                    interval.tick().await;
                    if ticker.send(Command::Tick { done: None }).await.is_err() {
                        break;
                    }
                }
            });
        }
        AppState {
            commands,
            events,
            attachment_dir: Arc::new(config.attachment_dir.clone()),
            max_frame_bytes: config.max_frame_bytes,
            next_conn: Arc::new(AtomicU64::new(1)),
            next_upload: Arc::new(AtomicU64::new(1)),
        }
    }

    /// Fires due timers on every channel and waits until their actions
    /// have been published.
    pub async fn tick(&self) {
        let (done, rx) = oneshot::channel();
        if self.commands.send(Command::Tick { done: Some(done) }).await.is_ok() {
            let _ = rx.await;
        }
    }

    async fn submit(&self, conn: u64, msg: InboundMessage) -> Result<(), String> {
        let (done, rx) = oneshot::channel();
        self.commands
            .send(Command::Inbound { conn, msg, done })
            .await
            .map_err(|_| "engine stopped".to_string())?;
        rx.await.map_err(|_| "engine stopped".to_string())?
    }
}

pub fn router(state: AppState, max_upload_bytes: usize) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route(
            "/attachments/{name}",
            post(upload)
                .get(download)
                .layer(DefaultBodyLimit::max(max_upload_bytes)),
        )
        .route("/channels/{id}/history", get(history))
        .route("/channels/{id}/session", get(session))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

/// Opens the audit log, restores channel state from it and serves until
/// the process is stopped.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let engine = Engine::new(config.engine_config()?);
    let store = JsonlStore::open(&config.store_path)?;
    let runtime = Runtime::resume(engine, store)?;
    tokio::fs::create_dir_all(&config.attachment_dir).await?;
    let state = AppState::spawn(
        runtime,
        system_clock(),
        &config,
        Some(Duration::from_millis(config.tick_ms)),
    );
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, store = %config.store_path.display(), "etbot listening");
    axum::serve(listener, router(state, config.max_upload_bytes)).await?;
    Ok(())
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.max_message_size(WS_MESSAGE_CAP)
        .on_upgrade(move |socket| Connection::new(state).run(socket))
}

struct Connection {
    state: AppState,
    id: u64,
    seq: u64,
    joined: Option<(String, String)>,
}

enum Step {
    Continue,
    Close,
}

impl Connection {
    fn new(state: AppState) -> Self {
        let id = state.next_conn.fetch_add(1, Ordering::Relaxed);
        Self {
            state,
            id,
            seq: 0,
            joined: None,
        }
    }

    async fn send(&mut self, socket: &mut WebSocket, mut frame: WireFrame) -> bool {
        self.seq += 1;
        frame.seq = self.seq;
        let text = String::from_utf8(encode_frame(&frame)).expect("frames are UTF-8");
        socket.send(Message::Text(text.into())).await.is_ok()
    }

    async fn run(mut self, mut socket: WebSocket) {
        let mut events = self.state.events.subscribe();
        loop {
            // Biased towards the event stream: the engine publishes a message's
            // actions before acknowledging it, so they are always forwarded
            // before the connection reads its next frame.
            tokio::select! {
                biased;
                event = events.recv() => {
                    let frame = match event {
                        Ok(event) => match self.outgoing(&event) {
                            Some(frame) => frame,
                            None => continue,
                        },
                        Err(broadcast::error::RecvError::Lagged(n)) => {
                            WireFrame::error(0, "lagged", format!("{n} events were dropped; reload the history"))
                        }
                        Err(broadcast::error::RecvError::Closed) => break,
                    };
                    if !self.send(&mut socket, frame).await {
                        break;
                    }
                }
                incoming = socket.recv() => {
                    let bytes = match incoming {
                        Some(Ok(Message::Text(t))) => Bytes::from(t),
                        Some(Ok(Message::Binary(b))) => b,
                        Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
                        _ => break,
                    };
                    let (replies, step) = self.on_frame(&bytes).await;
                    for frame in replies {
                        if !self.send(&mut socket, frame).await {
                            return;
                        }
                    }
                    if let Step::Close = step {
                        let _ = socket.send(Message::Close(None)).await;
                        break;
                    }
                }
            }
        }
    }

    fn outgoing(&self, event: &ChannelEvent) -> Option<WireFrame> {
        let (channel, _) = self.joined.as_ref()?;
        if event.channel().as_str() != channel {
            return None;
        }
        match event {
            ChannelEvent::Action(action) => Some(WireFrame::action(0, action)),
            ChannelEvent::Tester { conn, .. } if *conn == self.id => None,
            ChannelEvent::Tester { msg, .. } => {
                let mut frame = WireFrame::message(0, msg.channel_id.as_str(), msg.user_id.as_str(), &msg.text);
                frame.attachments = msg.attachments.iter().map(WireAttachment::from).collect();
                Some(frame)
            }
        }
    }

    async fn on_frame(&mut self, bytes: &[u8]) -> (Vec<WireFrame>, Step) {
        let frame = match decode_frame(bytes, self.state.max_frame_bytes) {
            Ok(frame) => frame,
            Err(e) => return (vec![e.to_frame(0)], Step::Continue),
        };
        let one = |f| (vec![f], Step::Continue);
        match frame.frame_type {
            FrameType::Hello => {
                if frame.version != Some(PROTOCOL_VERSION) {
                    let text = format!(
                        "unsupported protocol version {:?}; this server speaks {PROTOCOL_VERSION}",
                        frame.version
                    );
                    return (vec![WireFrame::error(0, "version", text)], Step::Close);
                }
                match (frame.channel, frame.user) {
                    (Some(channel), Some(user)) if !channel.trim().is_empty() && !user.trim().is_empty() => {
                        let reply = WireFrame::hello(0, &channel, &user);
                        self.joined = Some((channel, user));
                        one(reply)
                    }
                    _ => one(WireFrame::error(0, "malformed", "hello needs a channel and a user")),
                }
            }
            FrameType::Message => {
                let Some((channel, user)) = self.joined.clone() else {
                    return one(WireFrame::error(0, "not-joined", "send a hello frame first"));
                };
                let inbound = WireFrame {
                    channel: Some(channel),
                    user: Some(user),
                    ..frame
                }
                .to_inbound(Timestamp::ZERO)
                .expect("message frame with channel and user");
                if !inbound.is_valid() {
                    return one(WireFrame::error(
                        0,
                        "malformed",
                        "a message needs text or an attachment",
                    ));
                }
                match self.state.submit(self.id, inbound).await {
                    Ok(()) => (Vec::new(), Step::Continue),
                    Err(reason) => one(WireFrame::error(0, "rejected", reason)),
                }
            }
            FrameType::Ping => one(WireFrame::new(FrameType::Ping, 0)),
            FrameType::Action | FrameType::Error => one(WireFrame::error(
                0,
                "unexpected",
                format!("clients may not send {:?} frames", frame.frame_type),
            )),
        }
    }
}

fn sanitize(name: &str) -> Option<String> {
    let cleaned: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    (!cleaned.is_empty() && !cleaned.starts_with('.') && cleaned.len() <= 128).then_some(cleaned)
}

fn media_for(name: &str) -> MediaKind {
    let ext = name
        .rsplit_once('.')
        .map(|(_, e)| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" | "jpg" | "jpeg" | "gif" | "webp" | "bmp" => MediaKind::Image,
        _ => MediaKind::File,
    }
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn upload(State(state): State<AppState>, Path(name): Path<String>, body: Bytes) -> Response {
    let Some(safe) = sanitize(&name) else {
        return error_response(StatusCode::BAD_REQUEST, "invalid file name");
    };
    if body.is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "empty upload");
    }
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let n = state.next_upload.fetch_add(1, Ordering::Relaxed);
    let reference = format!("{stamp}-{n}-{safe}");
    if let Err(e) = tokio::fs::create_dir_all(state.attachment_dir.as_ref()).await {
        return error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    if let Err(e) = tokio::fs::write(state.attachment_dir.join(&reference), &body).await {
        return error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    let attachment = WireAttachment {
        name,
        reference,
        media: media_for(&safe),
        size: body.len() as u64,
    };
    (StatusCode::CREATED, Json(attachment)).into_response()
}

async fn download(State(state): State<AppState>, Path(reference): Path<String>) -> Response {
    if sanitize(&reference).as_deref() != Some(reference.as_str()) {
        return error_response(StatusCode::BAD_REQUEST, "invalid reference");
    }
    match tokio::fs::read(state.attachment_dir.join(&reference)).await {
        Ok(bytes) => bytes.into_response(),
        Err(_) => error_response(StatusCode::NOT_FOUND, "no such attachment"),
    }
}

#[derive(Deserialize)]
struct HistoryQuery {
    #[serde(default)]
    since: u64,
}

async fn history(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<HistoryQuery>) -> Response {
    let (done, rx) = oneshot::channel();
    let command = Command::History {
        channel: ChannelId::new(id),
        since: q.since,
        done,
    };
    if state.commands.send(command).await.is_err() {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "engine stopped");
    }
    match rx.await {
        Ok(Ok(records)) => Json(records).into_response(),
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(_) => error_response(StatusCode::SERVICE_UNAVAILABLE, "engine stopped"),
    }
}

async fn session(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let (done, rx) = oneshot::channel();
    let command = Command::Session {
        channel: ChannelId::new(id),
        done,
    };
    if state.commands.send(command).await.is_err() {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "engine stopped");
    }
    match rx.await {
        Ok(view) => Json(view).into_response(),
        Err(_) => error_response(StatusCode::SERVICE_UNAVAILABLE, "engine stopped"),
    }
}
