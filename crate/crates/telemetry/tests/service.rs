use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use pilotstack_core::dataset::{DriveRecord, Manifest, RecordMode, Tub};
use pilotstack_core::drive::{
    DriveMode, LoopConfig, LoopHandle, Session, SessionSummary, SystemClock, TelemetrySink, World,
};
use pilotstack_core::sim::{make_default_track, CameraModel, ImageFrame, VehicleParams};
use pilotstack_telemetry::{
    replay_tub, spawn_service, ServiceConfig, ServiceState, TelemetryHub, TelemetryPublisher,
};
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

// Loop timing is asserted below, so tests in this file take turns on the CPU.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn schema(name: &str) -> jsonschema::JSONSchema {
    let path = format!("{}/../../schemas/{name}", env!("CARGO_MANIFEST_DIR"));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::JSONSchema::compile(&doc).unwrap()
}

struct Live {
    handle: Arc<LoopHandle>,
    service: pilotstack_telemetry::ServiceHandle,
    publisher: Arc<TelemetryPublisher>,
    loop_thread: std::thread::JoinHandle<SessionSummary>,
}

impl Live {
    fn start(token: Option<&str>, duration: Option<Duration>) -> Self {
        let handle = LoopHandle::new(Arc::new(SystemClock::new()), DriveMode::Manual);
        let hub = TelemetryHub::new(32);
        let publisher = Arc::new(TelemetryPublisher::new(hub.clone(), 10.0, 70));
        let state = ServiceState {
            hub,
            handle: Some(handle.clone()),
            config: Arc::new(ServiceConfig {
                token: token.map(str::to_string),
                send_timeout: Duration::from_secs(2),
                ..ServiceConfig::default()
            }),
        };
        let service = spawn_service("127.0.0.1:0", state).unwrap();
        let world = World::new(make_default_track(), VehicleParams::default(), CameraModel::default()).unwrap();
        let sink: Arc<dyn TelemetrySink> = publisher.clone();
        let mut session = Session::new(world, LoopConfig::default(), handle.clone())
            .unwrap()
            .with_autopilot(pilotstack_core::drive::PurePursuitPilot::new(0.45, 0.4))
            .with_sink(sink);
        let loop_thread = std::thread::spawn(move || session.run_loop(duration));
        Live { handle, service, publisher, loop_thread }
    }

    fn addr(&self) -> SocketAddr {
        self.service.local_addr()
    }

    fn finish(self) -> SessionSummary {
        self.handle.request_shutdown();
        let s = self.loop_thread.join().unwrap();
        self.service.shutdown();
        s
    }
}

fn http_get(addr: SocketAddr, path: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).unwrap();
    let status = buf.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = buf.split("\r\n\r\n").nth(1).unwrap_or("").to_string();
    (status, body)
}

type Client = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn next_json(ws: &mut Client, kind: &str) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap();
        if let Message::Text(t) = msg {
            let v: Value = serde_json::from_str(&t).unwrap();
            if v["type"] == kind {
                return v;
            }
        }
    }
}

#[tokio::test]
#[allow(clippy::await_holding_lock)] // held for the whole test on purpose
async fn telemetry_stream_and_control_round_trip() {
    let _serial = serial();
    let live = Live::start(None, None);
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/ws", live.addr())).await.unwrap();
    let telemetry = schema("telemetry.schema.json");
    let reply_schema = schema("reply.schema.json");

    // stream: valid messages with increasing ticks, frames at about 10 per second
    let started = Instant::now();
    let mut last_tick = None;
    let mut frames = 0;
    while started.elapsed() < Duration::from_secs(3) {
        let v = next_json(&mut ws, "telemetry").await;
        assert!(telemetry.is_valid(&v), "{v}");
        let tick = v["tick"].as_u64().unwrap();
        if let Some(last) = last_tick {
            assert!(tick > last);
        }
        last_tick = Some(tick);
        frames += v.get("frame_jpeg_b64").is_some() as usize;
    }
    assert!((26..=34).contains(&frames), "{frames} frames in 3 s");

    // drive command: clamped and echoed in telemetry
    let sent = Instant::now();
    ws.send(Message::Text(r#"{"type":"drive","drive":{"steering_norm":2.0,"throttle_norm":0.5}}"#.into()))
        .await
        .unwrap();
    let ack = next_json(&mut ws, "ack").await;
    assert!(reply_schema.is_valid(&ack), "{ack}");
    assert_eq!(ack["clamped"], true);
    assert_eq!(ack["drive"]["steering_norm"], 1.0);
    loop {
        let v = next_json(&mut ws, "telemetry").await;
        if v["steering_norm"] == 1.0 {
            break;
        }
    }
    assert!(sent.elapsed() < Duration::from_millis(250), "{:?}", sent.elapsed());

    // autopilot, then stop: duty drops to zero and mode returns to manual
    ws.send(Message::Text(r#"{"type":"mode","mode":"autopilot"}"#.into())).await.unwrap();
    assert_eq!(next_json(&mut ws, "ack").await["mode"], "autopilot");
    loop {
        let v = next_json(&mut ws, "telemetry").await;
        if v["mode"] == "autopilot" && v["motor_duty"].as_f64().unwrap() > 0.0 {
            break;
        }
    }
    ws.send(Message::Text(r#"{"type":"stop"}"#.into())).await.unwrap();
    let ack = next_json(&mut ws, "ack").await;
    assert_eq!(ack["mode"], "manual");
    // at most one tick may have been in flight when the stop arrived
    let mut seen = 0;
    loop {
        let v = next_json(&mut ws, "telemetry").await;
        seen += 1;
        if v["mode"] == "manual" {
            assert_eq!(v["motor_duty"], 0.0);
            break;
        }
        assert!(seen <= 1, "{v}");
    }

    // bad input is answered, not fatal
    ws.send(Message::Text(r#"{"type":"reverse"}"#.into())).await.unwrap();
    let err = next_json(&mut ws, "error").await;
    assert!(reply_schema.is_valid(&err));
    ws.send(Message::Text("not json".into())).await.unwrap();
    next_json(&mut ws, "error").await;

    let (status, body) = http_get(live.addr(), "/healthz");
    assert_eq!(status, 200);
    let health: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(health["status"], "ok");
    assert!(health["summary"]["ticks"].as_u64().unwrap() > 0);
    let (status, body) = http_get(live.addr(), "/");
    assert_eq!(status, 200);
    assert!(body.contains("<html"));

    drop(ws);
    let summary = live.finish();
    assert_eq!(summary.overruns, 0, "{summary:?}");
}

#[tokio::test]
#[allow(clippy::await_holding_lock)] // held for the whole test on purpose
async fn token_is_enforced() {
    let _serial = serial();
    let live = Live::start(Some("sesame"), None);
    let addr = live.addr();
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.is_err());
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/ws?token=wrong")).await.is_err());
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/ws?token=sesame")).await.is_ok());
    live.finish();
}

#[test]
fn stalled_client_does_not_delay_the_loop() {
    let _serial = serial();
    let live = Live::start(None, Some(Duration::from_secs(6)));
    // completes the handshake, then never reads another byte
    let mut raw = TcpStream::connect(live.addr()).unwrap();
    write!(
        raw,
        "GET /ws HTTP/1.1\r\nHost: localhost\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n\
         Sec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n"
    )
    .unwrap();
    let summary = live.loop_thread.join().unwrap();
    assert!(live.publisher.sent() > 100);
    assert_eq!(summary.overruns, 0, "{summary:?}");
    assert!((119..=121).contains(&summary.ticks), "{summary:?}");
    drop(raw);
    live.service.shutdown();
}

fn make_tub(dir: &std::path::Path, n: usize) -> Tub {
    let mut tub = Tub::create(dir, Manifest::new(32, 24, "t")).unwrap();
    for i in 0..n {
        let frame = ImageFrame::filled(32, 24, [i as u8, 0, 0]);
        let rec = DriveRecord::new(0.01 * i as f64 - 0.2, 0.3, 50 * i as u64, RecordMode::Manual);
        tub.append_record(&frame, rec).unwrap();
    }
    tub
}

#[test]
fn replay_keeps_order_ticks_and_time_scale() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let tub = make_tub(&dir.path().join("tub"), 40);
    let hub = TelemetryHub::new(256);
    let mut rx = hub.subscribe();
    let stop = AtomicBool::new(false);
    let summary = replay_tub(&tub, &hub, &LoopConfig::default(), 2.0, 10.0, &stop).unwrap();
    assert_eq!(summary.messages, 40);
    // 39 intervals of 50 ms at double speed
    assert!((0.97..1.3).contains(&summary.wall_time_s), "{summary:?}");
    let telemetry = schema("telemetry.schema.json");
    for i in 0..40u64 {
        let v: Value = serde_json::from_str(rx.try_recv().unwrap().as_str()).unwrap();
        assert!(telemetry.is_valid(&v), "{v}");
        assert_eq!(v["tick"], i);
        assert_eq!(v["timestamp_ms"], 50 * i);
    }
    // 1 s of replay timeline at a 10 Hz stream
    assert!((9..=11).contains(&summary.frames), "{summary:?}");
}

#[test]
fn replay_rejects_bad_speed() {
    let dir = tempfile::tempdir().unwrap();
    let tub = make_tub(&dir.path().join("tub"), 2);
    let stop = AtomicBool::new(false);
    assert!(replay_tub(&tub, &TelemetryHub::default(), &LoopConfig::default(), 0.0, 10.0, &stop).is_err());
}

#[test]
fn schemas_accept_documented_examples() {
    let control = schema("control.schema.json");
    for ok in [
        r#"{"type":"drive","drive":{"steering_norm":2.0,"throttle_norm":0.1}}"#,
        r#"{"type":"mode","mode":"autopilot"}"#,
        r#"{"type":"stop"}"#,
    ] {
        assert!(control.is_valid(&serde_json::from_str(ok).unwrap()), "{ok}");
        serde_json::from_str::<pilotstack_telemetry::ControlMessage>(ok).unwrap();
    }
    for bad in [r#"{"type":"reverse"}"#, r#"{"type":"mode","mode":"fast"}"#, r#"{"type":"drive"}"#] {
        assert!(!control.is_valid(&serde_json::from_str(bad).unwrap()), "{bad}");
        assert!(serde_json::from_str::<pilotstack_telemetry::ControlMessage>(bad).is_err());
    }
}
