//! HTTP control service. One engine task owns the [`Controller`]; handlers
//! talk to it through an ordered mailbox and read published snapshots.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use faasim_core::battleground::ArenaLabel;
use faasim_core::{Ack, ControlCommand, ControlError, Controller, SimConfig, SimTime, StreamItem};
use futures::Stream;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tower_http::services::ServeDir;

/// Simulated time between periodic full snapshots on the event stream.
pub const SNAPSHOT_PERIOD_MS: u64 = 2000;
/// Simulated time advanced per engine iteration when unpaced.
const UNPACED_CHUNK_MS: u64 = 1000;
const TICK: Duration = Duration::from_millis(50);

/// One server-sent message.
#[derive(Debug, Clone)]
pub struct Frame {
    pub arena: Option<ArenaLabel>,
    pub event: &'static str,
    pub data: String,
}

/// What readers see without going through the mailbox.
#[derive(Debug, Clone, Default)]
pub struct View {
    pub running: bool,
    pub battleground: bool,
    pub time_ms: u64,
    /// A `LiveSnapshot`, or `{"A": .., "B": ..}` in battleground mode.
    pub state: Value,
    /// A `MetricsReport`, or per-arena reports plus the comparison.
    pub metrics: Value,
}

enum Request {
    Command(Value, oneshot::Sender<Result<Ack, ControlError>>),
    ExportCsv(oneshot::Sender<String>),
}

#[derive(Clone)]
pub struct Handle {
    mailbox: mpsc::Sender<Request>,
    view: watch::Receiver<Arc<View>>,
    frames: broadcast::Sender<Arc<Frame>>,
}

impl Handle {
    /// Starts the engine task on the current runtime.
    pub fn spawn(config: SimConfig) -> anyhow::Result<Self> {
        let controller = Controller::new(config)?;
        let (mailbox, rx) = mpsc::channel(256);
        let (frames, _) = broadcast::channel(1 << 16);
        let (view_tx, view) = watch::channel(Arc::new(View::default()));
        let mut engine = Engine {
            ctl: controller,
            rx,
            view: view_tx,
            frames: frames.clone(),
            anchor: (Instant::now(), SimTime::ZERO),
            next_snapshot: SimTime::ZERO,
        };
        engine.publish();
        tokio::spawn(engine.run());
        Ok(Self {
            mailbox,
            view,
            frames,
        })
    }

    pub async fn command(&self, value: Value) -> Result<Ack, ControlError> {
        let (tx, rx) = oneshot::channel();
        self.mailbox
            .send(Request::Command(value, tx))
            .await
            .expect("engine task alive");
        rx.await.expect("engine replies")
    }

    pub async fn export_csv(&self) -> String {
        let (tx, rx) = oneshot::channel();
        self.mailbox
            .send(Request::ExportCsv(tx))
            .await
            .expect("engine task alive");
        rx.await.expect("engine replies")
    }

    pub fn view(&self) -> Arc<View> {
        self.view.borrow().clone()
    }
}

struct Engine {
    ctl: Controller,
    rx: mpsc::Receiver<Request>,
    view: watch::Sender<Arc<View>>,
    frames: broadcast::Sender<Arc<Frame>>,
    /// Wall instant and sim time the pacing is measured from.
    anchor: (Instant, SimTime),
    next_snapshot: SimTime,
}

impl Engine {
    async fn run(mut self) {
        loop {
            let idle = !self.ctl.is_running()
                || (self.ctl.pace() <= 0.0 && self.ctl.next_event_time().is_none());
            if idle {
                match self.rx.recv().await {
                    Some(req) => self.handle(req),
                    None => return,
                }
                continue;
            }
            while let Ok(req) = self.rx.try_recv() {
                self.handle(req);
            }
            if !self.ctl.is_running() {
                continue;
            }
            let pace = self.ctl.pace();
            if pace <= 0.0 {
                let target = self.ctl.now() + UNPACED_CHUNK_MS;
                self.advance(target);
                tokio::task::yield_now().await;
            } else {
                tokio::select! {
                    req = self.rx.recv() => match req {
                        Some(req) => self.handle(req),
                        None => return,
                    },
                    _ = tokio::time::sleep(TICK) => {
                        let (wall, sim) = self.anchor;
                        let elapsed = wall.elapsed().as_secs_f64() * pace;
                        let target = sim + elapsed as u64;
                        if target > self.ctl.now() {
                            self.advance(target);
                        }
                    }
                }
            }
        }
    }

    fn handle(&mut self, req: Request) {
        match req {
            Request::Command(value, reply) => {
                let outcome =
                    ControlCommand::from_json(value).and_then(|cmd| self.ctl.apply_command(cmd));
                if matches!(&outcome, Ok(ack) if ack.kind == "Reset" || ack.kind == "CreateBattleground")
                {
                    self.next_snapshot = self.ctl.now();
                }
                self.flush_stream();
                self.emit_due_snapshot();
                self.anchor = (Instant::now(), self.ctl.now());
                self.publish();
                let _ = reply.send(outcome);
            }
            Request::ExportCsv(reply) => {
                let _ = reply.send(self.ctl.export_csv());
            }
        }
    }

    /// Runs to `target`, stopping at each snapshot boundary on the way so
    /// periodic snapshots sit in order within the stream.
    fn advance(&mut self, target: SimTime) {
        while self.ctl.now() < target {
            let stop = target.min(self.next_snapshot.max(self.ctl.now()));
            let stop = if stop == self.ctl.now() { target } else { stop };
            self.ctl.advance_to(stop);
            self.flush_stream();
            self.emit_due_snapshot();
        }
        self.publish();
    }

    fn flush_stream(&mut self) {
        for (arena, item) in self.ctl.take_stream() {
            let event = match &item {
                StreamItem::Event(_) => "event",
                StreamItem::Delta(_) => "delta",
            };
            self.send(arena, event, &item);
        }
    }

    fn emit_due_snapshot(&mut self) {
        if self.ctl.now() < self.next_snapshot {
            return;
        }
        for (arena, snap) in self.ctl.snapshot() {
            self.send(arena, "snapshot", &snap);
        }
        let period = SNAPSHOT_PERIOD_MS;
        self.next_snapshot = SimTime((self.ctl.now().millis() / period + 1) * period);
    }

    fn send<T: Serialize>(&self, arena: Option<ArenaLabel>, event: &'static str, body: &T) {
        let mut value = serde_json::to_value(body).expect("stream payloads serialise");
        if let (Some(label), Value::Object(map)) = (arena, &mut value) {
            map.insert("arena".into(), json!(label));
        }
        let _ = self.frames.send(Arc::new(Frame {
            arena,
            event,
            data: value.to_string(),
        }));
    }

    fn publish(&mut self) {
        let ctl = &self.ctl;
        let (state, metrics) = match ctl.battleground() {
            None => (
                serde_json::to_value(&ctl.snapshot()[0].1),
                serde_json::to_value(&ctl.metrics()[0].1),
            ),
            Some(bg) => {
                let keyed = |pairs: Vec<(Option<ArenaLabel>, Value)>| {
                    Value::Object(
                        pairs
                            .into_iter()
                            .map(|(l, v)| (l.expect("arena labelled").to_string(), v))
                            .collect(),
                    )
                };
                let snaps = ctl
                    .snapshot()
                    .into_iter()
                    .map(|(l, s)| (l, serde_json::to_value(s).expect("serialises")))
                    .collect();
                let mut metrics = keyed(
                    ctl.metrics()
                        .into_iter()
                        .map(|(l, m)| (l, serde_json::to_value(m).expect("serialises")))
                        .collect(),
                );
                metrics["report"] = serde_json::to_value(bg.report()).expect("serialises");
                (Ok(keyed(snaps)), Ok(metrics))
            }
        };
        self.view.send_replace(Arc::new(View {
            running: ctl.is_running(),
            battleground: ctl.is_battleground(),
            time_ms: ctl.now().millis(),
            state: state.expect("snapshot serialises"),
            metrics: metrics.expect("metrics serialise"),
        }));
    }
}

/// JSON error body with a stable code.
struct ApiError(StatusCode, &'static str, String);

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        let status = match &e {
            ControlError::UnknownNode(_) => StatusCode::NOT_FOUND,
            ControlError::NodeNotActive(_)
            | ControlError::NotInBattleground(_)
            | ControlError::ArenaRequired => StatusCode::CONFLICT,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "ok": false, "error": self.1, "message": self.2 });
        (self.0, Json(body)).into_response()
    }
}

fn wrong_mode(battleground_wanted: bool) -> ApiError {
    if battleground_wanted {
        ApiError(
            StatusCode::CONFLICT,
            "NotInBattleground",
            "no battleground is running; send CreateBattleground first".into(),
        )
    } else {
        ApiError(
            StatusCode::CONFLICT,
            "BattlegroundActive",
            "a battleground is running; use the /battleground endpoints".into(),
        )
    }
}

fn checked_view(h: &Handle, battleground: bool) -> Result<Arc<View>, ApiError> {
    let view = h.view();
    if view.battleground != battleground {
        return Err(wrong_mode(battleground));
    }
    Ok(view)
}

async fn get_state(State(h): State<Handle>) -> Result<Json<Value>, ApiError> {
    Ok(Json(checked_view(&h, false)?.state.clone()))
}

async fn get_metrics(State(h): State<Handle>) -> Result<Json<Value>, ApiError> {
    Ok(Json(checked_view(&h, false)?.metrics.clone()))
}

async fn get_bg_state(State(h): State<Handle>) -> Result<Json<Value>, ApiError> {
    let view = checked_view(&h, true)?;
    Ok(Json(
        json!({ "time_ms": view.time_ms, "arenas": view.state }),
    ))
}

async fn get_bg_metrics(State(h): State<Handle>) -> Result<Json<Value>, ApiError> {
    Ok(Json(checked_view(&h, true)?.metrics.clone()))
}

async fn get_bg_report(State(h): State<Handle>) -> Result<Json<Value>, ApiError> {
    Ok(Json(checked_view(&h, true)?.metrics["report"].clone()))
}

async fn get_status(State(h): State<Handle>) -> Json<Value> {
    let view = h.view();
    Json(json!({
        "running": view.running,
        "mode": if view.battleground { "battleground" } else { "single" },
        "time_ms": view.time_ms,
    }))
}

fn csv_response(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

async fn get_export(State(h): State<Handle>) -> Response {
    csv_response(h.export_csv().await)
}

async fn get_bg_export(State(h): State<Handle>) -> Result<Response, ApiError> {
    checked_view(&h, true)?;
    Ok(csv_response(h.export_csv().await))
}

async fn post_command(State(h): State<Handle>, body: Bytes) -> Result<Json<Ack>, ApiError> {
    let value: Value = serde_json::from_slice(&body).map_err(|e| {
        ApiError::from(ControlError::InvalidCommand(format!(
            "body is not JSON: {e}"
        )))
    })?;
    Ok(Json(h.command(value).await?))
}

fn event_stream(
    h: Handle,
    arenas_only: bool,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = h.frames.subscribe();
    // Late joiners hydrate from the current state first.
    let first = h.view();
    let initial: Vec<Event> = if first.battleground {
        ArenaLabel::BOTH
            .iter()
            .map(|l| {
                let mut snap = first.state[l.as_str()].clone();
                snap["arena"] = json!(l);
                Event::default().event("snapshot").data(snap.to_string())
            })
            .collect()
    } else if arenas_only {
        Vec::new()
    } else {
        vec![Event::default()
            .event("snapshot")
            .data(first.state.to_string())]
    };
    let state = (rx, initial.into_iter(), h);
    let stream = futures::stream::unfold(state, move |(mut rx, mut pending, h)| async move {
        if let Some(ev) = pending.next() {
            return Some((Ok(ev), (rx, pending, h)));
        }
        loop {
            match rx.recv().await {
                Ok(frame) => {
                    if arenas_only && frame.arena.is_none() {
                        continue;
                    }
                    let ev = Event::default().event(frame.event).data(frame.data.clone());
                    return Some((Ok(ev), (rx, pending, h)));
                }
                Err(broadcast::error::RecvError::Lagged(missed)) => {
                    let view = h.view();
                    let data = json!({ "missed": missed, "state": view.state });
                    let ev = Event::default().event("resync").data(data.to_string());
                    return Some((Ok(ev), (rx, pending, h)));
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn get_events(State(h): State<Handle>) -> impl IntoResponse {
    event_stream(h, false)
}

async fn get_bg_events(State(h): State<Handle>) -> impl IntoResponse {
    event_stream(h, true)
}

pub fn router(handle: Handle, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/status", get(get_status))
        .route("/state", get(get_state))
        .route("/metrics", get(get_metrics))
        .route("/export.csv", get(get_export))
        .route("/events", get(get_events))
        .route("/command", post(post_command))
        .route("/battleground/state", get(get_bg_state))
        .route("/battleground/metrics", get(get_bg_metrics))
        .route("/battleground/report", get(get_bg_report))
        .route("/battleground/export.csv", get(get_bg_export))
        .route("/battleground/events", get(get_bg_events))
        .route("/battleground/command", post(post_command))
        .with_state(handle);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process is stopped.
pub async fn serve(
    listener: TcpListener,
    config: SimConfig,
    ui_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let handle = Handle::spawn(config)?;
    axum::serve(listener, router(handle, ui_dir)).await?;
    Ok(())
}
