use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use etbot_core::store::EventRecord;
use etbot_core::{Engine, EngineConfig, MemoryStore, Runtime, Timestamp};
use etbot_gateway::config::ServiceConfig;
use etbot_gateway::server::{router, AppState, Clock, SessionView};
use etbot_gateway::wire::{decode_frame, encode_frame, FrameType, WireAttachment, WireFrame};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};
use tower::ServiceExt;

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Harness {
    state: AppState,
    addr: SocketAddr,
    clock: Arc<AtomicU64>,
    config: ServiceConfig,
    _dir: tempfile::TempDir,
}

async fn harness() -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        attachment_dir: dir.path().join("attachments"),
        ..ServiceConfig::default()
    };
    let millis = Arc::new(AtomicU64::new(1_000_000));
    let clock: Clock = {
        let millis = millis.clone();
        Arc::new(move || Timestamp(millis.load(Ordering::SeqCst)))
    };
    let runtime = Runtime::new(Engine::new(EngineConfig::default()), MemoryStore::new());
    let state = AppState::spawn(runtime, clock, &config, None);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone(), config.max_upload_bytes);
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Harness {
        state,
        addr,
        clock: millis,
        config,
        _dir: dir,
    }
}

impl Harness {
    async fn connect(&self) -> Ws {
        connect_async(format!("ws://{}/ws", self.addr)).await.unwrap().0
    }

    async fn join(&self, channel: &str, user: &str) -> Ws {
        let mut ws = self.connect().await;
        send(&mut ws, &WireFrame::hello(1, channel, user)).await;
        let hello = recv(&mut ws).await;
        assert_eq!(hello.frame_type, FrameType::Hello);
        assert_eq!(hello.version, Some(1));
        ws
    }

    fn advance(&self, secs: u64) {
        self.clock.fetch_add(secs * 1000, Ordering::SeqCst);
    }

    async fn get(&self, uri: &str) -> (StatusCode, Vec<u8>) {
        let app = router(self.state.clone(), self.config.max_upload_bytes);
        let response = app
            .oneshot(Request::get(uri).body(Body::empty()).unwrap())
            .await
            .unwrap();
        let status = response.status();
        let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
        (status, bytes.to_vec())
    }

    async fn post(&self, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
        let app = router(self.state.clone(), self.config.max_upload_bytes);
        let response = app
            .oneshot(Request::post(uri).body(Body::from(body)).unwrap())
            .await
            .unwrap();
        let status = response.status();
        let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
        (status, bytes.to_vec())
    }
}

async fn send(ws: &mut Ws, frame: &WireFrame) {
    send_raw(ws, String::from_utf8(encode_frame(frame)).unwrap()).await;
}

async fn send_raw(ws: &mut Ws, text: String) {
    ws.send(Message::text(text)).await.unwrap();
}

async fn recv(ws: &mut Ws) -> WireFrame {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .expect("frame within 5 s")
            .expect("stream open")
            .expect("valid message");
        if let Message::Text(text) = msg {
            return decode_frame(text.as_bytes(), usize::MAX).unwrap();
        }
    }
}

/// Pings and collects every frame received before the pong.
async fn drain(ws: &mut Ws) -> Vec<WireFrame> {
    send(ws, &WireFrame::new(FrameType::Ping, 99)).await;
    let mut frames = Vec::new();
    loop {
        let frame = recv(ws).await;
        if frame.frame_type == FrameType::Ping {
            return frames;
        }
        frames.push(frame);
    }
}

#[tokio::test]
async fn command_round_trip_with_increasing_seq() {
    let h = harness().await;
    let mut ws = h.join("lab", "beth").await;
    send(&mut ws, &WireFrame::message(2, "lab", "beth", "?commands")).await;
    let intro = recv(&mut ws).await;
    assert_eq!(intro.kind.as_deref(), Some("notice"));
    assert!(intro.text.unwrap().starts_with("Hello! I'm etbot"));
    let reply = recv(&mut ws).await;
    assert_eq!(reply.frame_type, FrameType::Action);
    assert_eq!(reply.kind.as_deref(), Some("reply"));
    assert_eq!(reply.channel.as_deref(), Some("lab"));
    assert!(reply.text.unwrap().contains("?charter"));
    assert_eq!((intro.seq, reply.seq), (2, 3));
}

#[tokio::test]
async fn prompts_carry_their_kind() {
    let h = harness().await;
    let mut ws = h.join("lab", "beth").await;
    send(&mut ws, &WireFrame::message(2, "lab", "beth", "?report")).await;
    send(&mut ws, &WireFrame::message(3, "lab", "beth", "?start")).await;
    let frames = drain(&mut ws).await;
    let kinds: Vec<_> = frames.iter().map(|f| f.kind.as_deref().unwrap()).collect();
    assert_eq!(kinds, ["notice", "reply", "prompt"]);
}

#[tokio::test]
async fn protocol_errors_keep_the_connection() {
    let h = harness().await;
    let mut ws = h.connect().await;

    send(&mut ws, &WireFrame::message(1, "lab", "beth", "?commands")).await;
    assert_eq!(recv(&mut ws).await.code.as_deref(), Some("not-joined"));

    send_raw(&mut ws, r#"{"type":"shout","seq":2}"#.into()).await;
    assert_eq!(recv(&mut ws).await.code.as_deref(), Some("unknown-type"));

    send_raw(&mut ws, r#"{"type":"message","seq":3,"text":"#.into()).await;
    assert_eq!(recv(&mut ws).await.code.as_deref(), Some("malformed"));

    send_raw(&mut ws, "x".repeat(1024 * 1024)).await;
    let err = recv(&mut ws).await;
    assert_eq!(err.code.as_deref(), Some("oversized"));
    assert_eq!(err.frame_type, FrameType::Error);

    send(&mut ws, &WireFrame::new(FrameType::Action, 5)).await;
    assert_eq!(recv(&mut ws).await.code.as_deref(), Some("unexpected"));

    let frames = drain(&mut ws).await;
    assert!(frames.is_empty());
}

#[tokio::test]
async fn version_mismatch_closes() {
    let h = harness().await;
    let mut ws = h.connect().await;
    let mut hello = WireFrame::hello(1, "lab", "beth");
    hello.version = Some(2);
    send(&mut ws, &hello).await;
    assert_eq!(recv(&mut ws).await.code.as_deref(), Some("version"));
    let next = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap();
    assert!(matches!(next, Some(Ok(Message::Close(_))) | None | Some(Err(_))));
}

#[tokio::test]
async fn channel_members_see_each_other() {
    let h = harness().await;
    let mut ana = h.join("team", "ana").await;
    let mut bob = h.join("team", "bob").await;
    let mut eve = h.join("other", "eve").await;

    send(&mut ana, &WireFrame::message(2, "team", "ana", "?manual")).await;
    let ana_frames = drain(&mut ana).await;
    assert_eq!(ana_frames.len(), 2, "ana gets intro and manual, not her own echo");

    let bob_frames = drain(&mut bob).await;
    assert_eq!(bob_frames[0].frame_type, FrameType::Message);
    assert_eq!(bob_frames[0].user.as_deref(), Some("ana"));
    assert_eq!(bob_frames[0].text.as_deref(), Some("?manual"));
    assert_eq!(bob_frames.len(), 3);
    assert!(drain(&mut eve).await.is_empty());
}

#[tokio::test]
async fn timers_fire_on_tick() {
    let h = harness().await;
    let mut ws = h.join("clock", "ana").await;
    send(&mut ws, &WireFrame::message(2, "clock", "ana", "?start")).await;
    send(&mut ws, &WireFrame::message(3, "clock", "ana", "15")).await;
    assert_eq!(drain(&mut ws).await.len(), 3);

    let (_, body) = h.get("/channels/clock/session").await;
    let view: SessionView = serde_json::from_slice(&body).unwrap();
    assert!(view.active);
    assert_eq!(view.remaining_ms, 900_000);

    h.advance(450);
    h.state.tick().await;
    let frames = drain(&mut ws).await;
    let reminder = frames.iter().find(|f| f.kind.as_deref() == Some("reminder")).unwrap();
    assert!(reminder.text.as_deref().unwrap().contains("7 min 30 s left"));

    h.advance(450);
    h.state.tick().await;
    let frames = drain(&mut ws).await;
    assert!(frames
        .iter()
        .any(|f| f.text.as_deref().unwrap().starts_with("Time is up!")));
    let (_, body) = h.get("/channels/clock/session").await;
    let view: SessionView = serde_json::from_slice(&body).unwrap();
    assert!(!view.active);
}

#[tokio::test]
async fn upload_attach_and_read_history() {
    let h = harness().await;
    let png = vec![0x89, b'P', b'N', b'G', 1, 2, 3];
    let (status, body) = h.post("/attachments/crash%20shot.png", png.clone()).await;
    assert_eq!(status, StatusCode::CREATED);
    let attachment: WireAttachment = serde_json::from_slice(&body).unwrap();
    assert_eq!(attachment.name, "crash shot.png");
    assert_eq!(attachment.size, png.len() as u64);
    assert!(attachment.reference.ends_with("crash_shot.png"));

    let (status, bytes) = h.get(&format!("/attachments/{}", attachment.reference)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, png);
    assert_eq!(h.get("/attachments/missing.png").await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.post("/attachments/.hidden", vec![1]).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(
        h.post("/attachments/empty.txt", vec![]).await.0,
        StatusCode::BAD_REQUEST
    );

    let mut ws = h.join("shots", "ana").await;
    send(&mut ws, &WireFrame::message(2, "shots", "ana", "?charter")).await;
    let mut with_file = WireFrame::message(3, "shots", "ana", "");
    with_file.text = None;
    with_file.attachments.push(attachment.clone());
    for text in ["Login", "App", "Goals"] {
        send(&mut ws, &WireFrame::message(3, "shots", "ana", text)).await;
    }
    send(&mut ws, &with_file).await;
    let frames = drain(&mut ws).await;
    assert!(frames
        .last()
        .unwrap()
        .text
        .as_deref()
        .unwrap()
        .starts_with("Got 1 attachment(s)"));

    let (status, body) = h.get("/channels/shots/history").await;
    assert_eq!(status, StatusCode::OK);
    let records: Vec<EventRecord> = serde_json::from_slice(&body).unwrap();
    let uploaded = records.iter().find(|r| !r.attachments.is_empty()).unwrap();
    assert_eq!(uploaded.attachments[0].content_ref, attachment.reference);
    assert!(records.iter().all(|r| r.channel_id.as_str() == "shots"));

    let since = records[3].offset;
    let (_, body) = h.get(&format!("/channels/shots/history?since={since}")).await;
    let tail: Vec<EventRecord> = serde_json::from_slice(&body).unwrap();
    assert_eq!(tail.len(), records.len() - 3);

    let (_, body) = h.get("/channels/nobody/session").await;
    let view: SessionView = serde_json::from_slice(&body).unwrap();
    assert!(!view.active && view.charters.is_empty());
}
