//! WebSocket transport: one simulation thread, one reader and one writer
//! task per client.
//!
//! State fans out through a broadcast channel of [`CLIENT_QUEUE`] frames.
//! A client that falls behind loses the oldest frames; the simulation never
//! waits for it. Hand input goes into a latest-value slot read once per
//! tick; controls are queued.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::serve::ListenerExt;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::sync::{broadcast, mpsc, oneshot};

use wandbench_core::geometry::Pose;
use wandbench_core::session::Setup;

use crate::live::LiveSession;
use crate::protocol::{ClientInput, Control, ServerMessage, SCHEMA_VERSION};
use crate::replay::replay_stream;
use crate::Error;

/// Frames buffered per client before the oldest are dropped.
pub const CLIENT_QUEUE: usize = 64;
/// Queued control commands before new ones are rejected.
pub const CONTROL_QUEUE: usize = 32;
pub const DEFAULT_BROADCAST_HZ: f64 = 60.0;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: SocketAddr,
    pub broadcast_hz: f64,
    pub log_out: Option<PathBuf>,
    /// Start the first trial without waiting for a `start` control.
    pub autostart: bool,
}

impl ServeConfig {
    pub fn new(bind: SocketAddr) -> Self {
        Self {
            bind,
            broadcast_hz: DEFAULT_BROADCAST_HZ,
            log_out: None,
            autostart: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct HandSlot {
    pose: Pose,
    stamp: Option<f64>,
    seq: u64,
}

struct Shared {
    hello: String,
    frames: broadcast::Sender<Arc<str>>,
    hand: Mutex<HandSlot>,
    controls: mpsc::Sender<Control>,
}

/// A running live service. Dropping it does not stop the server; call
/// [`RunningService::shutdown`].
pub struct RunningService {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sim: Option<JoinHandle<Result<(), Error>>>,
    server: Option<tokio::task::JoinHandle<()>>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl RunningService {
    pub async fn shutdown(mut self) -> Result<(), Error> {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.server.take() {
            let _ = h.await;
        }
        match self.sim.take().map(|h| h.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(Error::Closed("simulation thread panicked".into())),
            None => Ok(()),
        }
    }

    /// Waits until the server stops (e.g. ctrl-c handled by the caller).
    pub async fn wait(mut self) -> Result<(), Error> {
        if let Some(h) = self.server.take() {
            let _ = h.await;
        }
        self.stop.store(true, Ordering::SeqCst);
        match self.sim.take().map(|h| h.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(Error::Closed("simulation thread panicked".into())),
            None => Ok(()),
        }
    }
}

/// Binds `cfg.bind` (port 0 picks a free port) and starts the simulation.
pub async fn serve(setup: Setup, cfg: ServeConfig) -> Result<RunningService, Error> {
    if !(cfg.broadcast_hz > 0.0) {
        return Err(Error::Malformed("broadcast rate must be > 0".into()));
    }
    let log: Option<Box<dyn std::io::Write + Send>> = match &cfg.log_out {
        Some(p) => Some(Box::new(std::io::BufWriter::new(std::fs::File::create(p)?))),
        None => None,
    };
    let mut session = LiveSession::new(setup, log);
    if cfg.autostart {
        session.control(Control::Start)?;
    }
    let (frames, _) = broadcast::channel(CLIENT_QUEUE);
    let (controls, control_rx) = mpsc::channel(CONTROL_QUEUE);
    let hello = ServerMessage::Hello {
        version: SCHEMA_VERSION,
        mode: session.mode(),
        broadcast_hz: cfg.broadcast_hz,
        dt: session.setup().config.dt(),
        hand_start: session.setup().hand_start.wire(),
    }
    .to_json();
    let shared = Arc::new(Shared {
        hello,
        frames: frames.clone(),
        hand: Mutex::new(HandSlot {
            pose: session.hand(),
            stamp: None,
            seq: 0,
        }),
        controls,
    });

    let stop = Arc::new(AtomicBool::new(false));
    let sim = {
        let (shared, stop) = (shared.clone(), stop.clone());
        let period = Duration::from_secs_f64(1.0 / cfg.broadcast_hz);
        std::thread::Builder::new()
            .name("wandbench-sim".into())
            .spawn(move || sim_loop(session, shared, control_rx, stop, period))?
    };

    let app = Router::new().route("/", get(ws_live)).route("/ws", get(ws_live)).with_state(shared);
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    let addr = listener.local_addr()?;
    let listener = listener.tap_io(no_delay);
    let (tx, rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let res = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
        if let Err(e) = res {
            log::error!("server stopped: {e}");
        }
    });
    log::info!("live service on ws://{addr}/ws");
    Ok(RunningService {
        addr,
        stop,
        sim: Some(sim),
        server: Some(server),
        shutdown: Some(tx),
    })
}

// small frames must not wait on delayed ACKs
fn no_delay(tcp: &mut tokio::net::TcpStream) {
    if let Err(e) = tcp.set_nodelay(true) {
        log::debug!("set_nodelay: {e}");
    }
}

fn sim_loop(
    mut session: LiveSession,
    shared: Arc<Shared>,
    mut controls: mpsc::Receiver<Control>,
    stop: Arc<AtomicBool>,
    broadcast_period: Duration,
) -> Result<(), Error> {
    let dt = Duration::from_secs_f64(session.setup().config.dt());
    let mut next_tick = Instant::now();
    let mut next_frame = next_tick;
    let mut seen = 0;
    while !stop.load(Ordering::SeqCst) {
        while let Ok(c) = controls.try_recv() {
            if let Err(e) = session.control(c) {
                let _ = shared.frames.send(ServerMessage::error(e.to_string()).to_json().into());
            }
        }
        let slot = *shared.hand.lock().expect("hand slot poisoned");
        if slot.seq != seen {
            seen = slot.seq;
            session.set_hand(slot.pose, slot.stamp);
        }
        if let Err(e) = session.tick() {
            log::error!("tick failed: {e}");
            let _ = shared.frames.send(ServerMessage::error(e.to_string()).to_json().into());
            session.control(Control::Pause)?;
        }
        let now = Instant::now();
        if now >= next_frame {
            // no receivers is fine
            let _ = shared.frames.send(ServerMessage::State(session.state()).to_json().into());
            next_frame += broadcast_period;
            if next_frame < now {
                next_frame = now + broadcast_period;
            }
        }
        next_tick += dt;
        let now = Instant::now();
        if next_tick > now {
            std::thread::sleep((next_tick.min(next_frame)) - now);
            // catch up on broadcast if it fell before the next tick
            while Instant::now() < next_tick {
                let now = Instant::now();
                if now >= next_frame {
                    let _ = shared.frames.send(ServerMessage::State(session.state()).to_json().into());
                    next_frame += broadcast_period;
                }
                let wake = next_tick.min(next_frame);
                if wake > Instant::now() {
                    std::thread::sleep(wake - Instant::now());
                }
            }
        } else {
            next_tick = now;
        }
    }
    session.flush()
}

async fn ws_live(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| client_live(socket, shared))
}

async fn client_live(socket: WebSocket, shared: Arc<Shared>) {
    let (mut sink, mut stream) = socket.split();
    let mut frames = shared.frames.subscribe();
    let (direct_tx, mut direct_rx) = mpsc::channel::<String>(8);
    if sink.send(Message::Text(shared.hello.clone().into())).await.is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        loop {
            tokio::select! {
                frame = frames.recv() => match frame {
                    Ok(f) => {
                        if sink.send(Message::Text(f.to_string().into())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => log::debug!("client lagged, dropped {n} frames"),
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                direct = direct_rx.recv() => match direct {
                    Some(text) => {
                        if sink.send(Message::Text(text.into())).await.is_err() {
                            break;
                        }
                    }
                    None => break,
                },
            }
        }
    });

    let mut sent_hand = false;
    while let Some(msg) = stream.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t.to_string(),
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(Message::Binary(_)) => {
                let _ = direct_tx.send(ServerMessage::error("binary frames are not supported").to_json()).await;
                continue;
            }
            Ok(_) => continue,
        };
        match ClientInput::parse(&text) {
            Ok(input) => {
                if let Some(pose) = input.hand {
                    let mut slot = shared.hand.lock().expect("hand slot poisoned");
                    slot.pose = pose;
                    slot.stamp = input.stamp;
                    slot.seq += 1;
                    sent_hand = true;
                }
                if let Some(c) = input.control {
                    if shared.controls.try_send(c).is_err() {
                        let _ = direct_tx.send(ServerMessage::error("control queue full").to_json()).await;
                    }
                }
            }
            Err(e) => {
                let _ = direct_tx.send(ServerMessage::error(e.to_string()).to_json()).await;
            }
        }
    }
    // losing the input source pauses the trial
    if sent_hand {
        let _ = shared.controls.send(Control::Pause).await;
    }
    drop(direct_tx);
    writer.abort();
}

/// Serves a recorded log: every client that connects gets its own timed
/// playback from the start.
pub async fn serve_replay(bind: SocketAddr, log: PathBuf, speed: f64) -> Result<RunningService, Error> {
    std::fs::metadata(&log)?;
    let state = Arc::new((log, speed));
    let app = Router::new()
        .route("/", get(ws_replay))
        .route("/ws", get(ws_replay))
        .with_state(state);
    let listener = tokio::net::TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let listener = listener.tap_io(no_delay);
    let (tx, rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    log::info!("replay service on ws://{addr}/ws");
    Ok(RunningService {
        addr,
        stop: Arc::new(AtomicBool::new(false)),
        sim: None,
        server: Some(server),
        shutdown: Some(tx),
    })
}

async fn ws_replay(ws: WebSocketUpgrade, State(state): State<Arc<(PathBuf, f64)>>) -> Response {
    ws.on_upgrade(move |socket| client_replay(socket, state))
}

async fn client_replay(socket: WebSocket, state: Arc<(PathBuf, f64)>) {
    let (mut sink, _stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(text) = rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    });
    let file = match std::fs::File::open(&state.0) {
        Ok(f) => f,
        Err(e) => {
            let _ = tx.send(ServerMessage::error(e.to_string()).to_json());
            return;
        }
    };
    let reader = std::io::BufReader::new(file);
    if let Err(e) = replay_stream(reader, state.1, |s| tx.send(s).is_ok()).await {
        log::warn!("replay stopped: {e}");
    }
    drop(tx);
    let _ = writer.await;
}
