use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{broadcast, oneshot};

use dea_lab::campaign::{plan_stage1, Cell, Manifest, PlannedTrial};
use dea_lab::devicemodel::{DeviceSpec, Drive, Filler, MaterialConfig};
use dea_lab::rig::{ModeTarget, Protocol, RigError};
use dea_lab::store;

use crate::campaigns::{self, CampaignState};
use crate::channels::{lock, ChannelHandle, ChannelStatus, Job, TrialJob};
use crate::stream::{ClientFilter, Frame, StreamItem, Subscribe};
use crate::{AppState, SCHEMA_VERSION};

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/campaigns", post(post_campaign))
        .route("/campaigns/{id}", get(get_campaign))
        .route("/campaigns/{id}/commands", post(post_campaign_command))
        .route("/channels", get(get_channels))
        .route("/channels/{id}/commands", post(post_channel_command))
        .route("/runs/{id}/report", get(get_report))
        .route("/stream", get(stream))
        .fallback(|| async { not_found("route") })
        .with_state(state)
}

type Shared = State<Arc<AppState>>;

fn not_found(what: &str) -> Response {
    (
        StatusCode::NOT_FOUND,
        Json(json!({"schema_version": SCHEMA_VERSION, "error": "not_found", "detail": format!("unknown {what}")})),
    )
        .into_response()
}

fn bad_request(reason: &str, detail: impl ToString) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(json!({"schema_version": SCHEMA_VERSION, "error": reason, "detail": detail.to_string()})),
    )
        .into_response()
}

/// Reply to a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandResponse {
    pub schema_version: u32,
    pub accepted: bool,
    /// Machine-readable rejection reason, e.g. "interlock" or "busy".
    pub reason: Option<String>,
    pub detail: Option<String>,
    pub device_id: Option<String>,
    pub channel: Option<ChannelStatus>,
}

impl CommandResponse {
    fn accepted(status: StatusCode, channel: Option<ChannelStatus>, device_id: Option<String>) -> Response {
        let body = Self {
            schema_version: SCHEMA_VERSION,
            accepted: true,
            reason: None,
            detail: None,
            device_id,
            channel,
        };
        (status, Json(body)).into_response()
    }

    fn rejected(reason: &str, detail: impl ToString, channel: Option<ChannelStatus>) -> Response {
        let body = Self {
            schema_version: SCHEMA_VERSION,
            accepted: false,
            reason: Some(reason.to_string()),
            detail: Some(detail.to_string()),
            device_id: None,
            channel,
        };
        (StatusCode::CONFLICT, Json(body)).into_response()
    }
}

/// Channel command. `payload` carries the action's arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "payload")]
pub enum ChannelCommand {
    StartTrial(StartTrial),
    Abort,
    SwitchMode { target: ModeTarget },
    ResetFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrial {
    /// V/µm
    pub field: f64,
    /// Hz
    pub freq: f64,
    #[serde(default = "default_filler")]
    pub filler: Filler,
    #[serde(default = "default_cnt")]
    pub cnt_conc: f64,
    #[serde(default)]
    pub seed: u64,
    pub device: Option<DeviceSpec>,
    pub protocol: Option<Protocol>,
    /// Lifetime cap, s.
    pub cap: Option<f64>,
    pub accel: Option<f64>,
}

fn default_filler() -> Filler {
    Filler::CB
}

fn default_cnt() -> f64 {
    2.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "payload")]
pub enum CampaignCommand {
    Abort,
}

fn channel(state: &AppState, id: &str) -> Option<Arc<ChannelHandle>> {
    let id: u32 = id.parse().ok()?;
    state.channels.iter().find(|c| c.id == id).cloned()
}

async fn get_channels(State(state): Shared) -> Response {
    let channels: Vec<ChannelStatus> = state.channels.iter().map(|c| c.snapshot()).collect();
    Json(json!({"schema_version": SCHEMA_VERSION, "channels": channels})).into_response()
}

async fn post_channel_command(State(state): Shared, Path(id): Path<String>, body: Bytes) -> Response {
    let Some(ch) = channel(&state, &id) else {
        return not_found("channel");
    };
    let cmd: ChannelCommand = match serde_json::from_slice(&body) {
        Ok(c) => c,
        Err(e) => return bad_request("invalid_command", e),
    };
    match cmd {
        ChannelCommand::Abort => {
            let running = lock(&ch.status).current_trial.is_some();
            if running {
                ch.abort.request();
                CommandResponse::accepted(StatusCode::ACCEPTED, Some(ch.snapshot()), None)
            } else {
                CommandResponse::rejected("idle", "no trial running", Some(ch.snapshot()))
            }
        }
        ChannelCommand::SwitchMode { target } => {
            if let Err(r) = reserve(&ch, target == ModeTarget::Impedance) {
                return r;
            }
            let (tx, rx) = oneshot::channel();
            run_sync(&ch, Job::SwitchMode { target, reply: tx }, rx).await
        }
        ChannelCommand::ResetFault => {
            if let Err(r) = reserve(&ch, false) {
                return r;
            }
            let (tx, rx) = oneshot::channel();
            run_sync(&ch, Job::ResetFault { reply: tx }, rx).await
        }
        ChannelCommand::StartTrial(t) => start_trial(&state, &ch, t),
    }
}

/// Checks the channel can take a command and marks it busy.
fn reserve(ch: &ChannelHandle, needs_isolation: bool) -> Result<(), Response> {
    let mut s = lock(&ch.status);
    if needs_isolation && s.interlock.hv_live {
        let snap = s.clone();
        return Err(CommandResponse::rejected(
            "interlock",
            "HV live; impedance mode requires the drive stopped and HV isolated",
            Some(snap),
        ));
    }
    if s.owner.is_some() || s.busy || s.current_trial.is_some() {
        let detail = match &s.owner {
            Some(c) => format!("channel held by campaign {c}"),
            None => "channel busy".to_string(),
        };
        let snap = s.clone();
        return Err(CommandResponse::rejected("busy", detail, Some(snap)));
    }
    s.busy = true;
    Ok(())
}

async fn run_sync(ch: &ChannelHandle, job: Job, rx: oneshot::Receiver<Result<(), RigError>>) -> Response {
    if let Err(e) = ch.enqueue(job) {
        lock(&ch.status).busy = false;
        return CommandResponse::rejected("unavailable", e, None);
    }
    match rx.await {
        Ok(Ok(())) => CommandResponse::accepted(StatusCode::OK, Some(ch.snapshot()), None),
        Ok(Err(e)) => CommandResponse::rejected(e.reason(), &e, Some(ch.snapshot())),
        Err(_) => CommandResponse::rejected("unavailable", "channel worker stopped", None),
    }
}

fn start_trial(state: &AppState, ch: &ChannelHandle, t: StartTrial) -> Response {
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(t.field) || !positive(t.freq) || !t.cap.is_none_or(positive) {
        return bad_request("invalid_trial", "field, freq and cap must be positive");
    }
    let material = MaterialConfig {
        filler: t.filler,
        cnt_conc: t.cnt_conc,
    };
    let cell = Cell::new(
        Drive {
            field: t.field,
            frequency: t.freq,
        },
        material,
    );
    let planned = PlannedTrial::new(t.seed, 0, cell, 0);
    let device_id = planned.device_id.clone();
    {
        let s = lock(&ch.status);
        if s.fault.is_some() {
            let snap = s.clone();
            drop(s);
            return CommandResponse::rejected("faulted", "reset the fault first", Some(snap));
        }
    }
    if let Err(r) = reserve(ch, false) {
        return r;
    }
    lock(&ch.status).current_trial = Some(device_id.clone());
    ch.attach(None, t.accel.unwrap_or(state.config.accel));
    let mut protocol = t.protocol.unwrap_or_default();
    if let Some(cap) = t.cap {
        protocol.lifetime.cap = cap;
    }
    let job = TrialJob {
        planned,
        device: t.device.unwrap_or_else(DeviceSpec::test_sample),
        protocol,
        campaign: None,
        cancel: None,
        reply: None,
    };
    if let Err(e) = ch.enqueue(Job::Trial(Box::new(job))) {
        let mut s = lock(&ch.status);
        s.busy = false;
        s.current_trial = None;
        return CommandResponse::rejected("unavailable", e, None);
    }
    CommandResponse::accepted(StatusCode::ACCEPTED, Some(ch.snapshot()), Some(device_id))
}

#[derive(Debug, Deserialize)]
struct CampaignQuery {
    accel: Option<f64>,
}

fn safe_id(s: &str) -> bool {
    !s.is_empty() && !s.starts_with('.') && s.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
}

async fn post_campaign(State(state): Shared, Query(q): Query<CampaignQuery>, body: Bytes) -> Response {
    let text = String::from_utf8_lossy(&body);
    let manifest = match Manifest::from_json(&text) {
        Ok(m) => m,
        Err(e) => return bad_request("invalid_manifest", e),
    };
    let n = (manifest.channels.max(1) as usize).min(state.channels.len());
    if n == 0 {
        return bad_request("invalid_manifest", "service has no channels");
    }
    let chosen: Vec<Arc<ChannelHandle>> = state.channels[..n].to_vec();

    let mut campaigns = lock(&state.campaigns);
    let slug: String = manifest
        .name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let id = format!("{}-s{}-{}", slug, manifest.seed, campaigns.len() + 1);

    // claim all channels or none
    let mut guards: Vec<_> = chosen.iter().map(|c| lock(&c.status)).collect();
    if let Some(g) = guards
        .iter()
        .find(|g| g.owner.is_some() || g.busy || g.current_trial.is_some())
    {
        let snap = ChannelStatus::clone(g);
        return CommandResponse::rejected("busy", format!("channel {} is in use", snap.id), Some(snap));
    }
    for g in guards.iter_mut() {
        g.owner = Some(id.clone());
    }
    drop(guards);

    let plan = plan_stage1(&manifest.space, &[], manifest.seed);
    let accel = q.accel.unwrap_or(state.config.accel);
    let run_dir = state.config.data_dir.join(&id);
    match campaigns::start(id.clone(), manifest, run_dir.clone(), chosen.clone(), accel, state.frames.clone()) {
        Ok(c) => {
            campaigns.insert(id.clone(), c);
            let channel_ids: Vec<u32> = chosen.iter().map(|c| c.id).collect();
            (
                StatusCode::CREATED,
                Json(json!({
                    "schema_version": SCHEMA_VERSION,
                    "id": id,
                    "run_dir": run_dir,
                    "channels": channel_ids,
                    "plan": plan,
                })),
            )
                .into_response()
        }
        Err(e) => {
            for c in &chosen {
                lock(&c.status).owner = None;
            }
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(json!({"schema_version": SCHEMA_VERSION, "error": "storage", "detail": e})),
            )
                .into_response()
        }
    }
}

async fn get_campaign(State(state): Shared, Path(id): Path<String>) -> Response {
    match lock(&state.campaigns).get(&id) {
        Some(c) => Json(c.view()).into_response(),
        None => not_found("campaign"),
    }
}

async fn post_campaign_command(State(state): Shared, Path(id): Path<String>, body: Bytes) -> Response {
    let Some(c) = lock(&state.campaigns).get(&id).cloned() else {
        return not_found("campaign");
    };
    match serde_json::from_slice::<CampaignCommand>(&body) {
        Ok(CampaignCommand::Abort) => {
            if c.state() != CampaignState::Running {
                return CommandResponse::rejected("not_running", "campaign already ended", None);
            }
            c.abort();
            CommandResponse::accepted(StatusCode::ACCEPTED, None, None)
        }
        Err(e) => bad_request("invalid_command", e),
    }
}

async fn get_report(State(state): Shared, Path(id): Path<String>) -> Response {
    if !safe_id(&id) {
        return not_found("run");
    }
    let known = lock(&state.campaigns).get(&id).cloned();
    if let Some(c) = &known {
        if c.state() == CampaignState::Running {
            return CommandResponse::rejected("not_ready", "campaign still running", None);
        }
    }
    let dir = known.map_or_else(|| state.config.data_dir.join(&id), |c| c.run_dir.clone());
    match store::load_report(&dir) {
        Ok(r) => Json(r).into_response(),
        Err(_) => not_found("run report"),
    }
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    /// Comma-separated channel ids; all channels when absent.
    channels: Option<String>,
    rate: Option<f64>,
}

async fn stream(State(state): Shared, Query(q): Query<StreamQuery>, ws: WebSocketUpgrade) -> Response {
    let channels = match q.channels.as_deref().filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => match s.split(',').map(|x| x.trim().parse::<u32>()).collect::<Result<Vec<_>, _>>() {
            Ok(v) => Some(v),
            Err(e) => return bad_request("invalid_channels", e),
        },
    };
    if q.rate.is_some_and(|r| !(r.is_finite() && r > 0.0)) {
        return bad_request("invalid_rate", "rate must be positive");
    }
    let filter = ClientFilter::new(channels, q.rate);
    ws.on_upgrade(move |socket| client(socket, state, filter))
}

async fn client(socket: WebSocket, state: Arc<AppState>, mut filter: ClientFilter) {
    let mut rx = state.frames.subscribe();
    let (mut out, mut inbound) = socket.split();

    // current faults first
    for ch in &state.channels {
        let s = ch.snapshot();
        if let Some(reason) = s.fault {
            if filter.wants_channel(s.id) {
                let f = Frame::new(StreamItem::Fault { channel: s.id, reason }, s.accel.unwrap_or(f64::INFINITY));
                if send(&mut out, &f).await.is_err() {
                    return;
                }
            }
        }
    }

    loop {
        tokio::select! {
            frame = rx.recv() => {
                let frame = match frame {
                    Ok(f) => f,
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        Arc::new(Frame::new(StreamItem::Lagged { skipped: n }, state.config.accel))
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                };
                if filter.accept(&frame.item) && send(&mut out, &frame).await.is_err() {
                    break;
                }
            }
            msg = inbound.next() => {
                match msg {
                    Some(Ok(Message::Text(t))) => {
                        if let Ok(sub) = serde_json::from_str::<Subscribe>(t.as_str()) {
                            filter.update(sub);
                        }
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => {}
                }
            }
        }
    }
}

async fn send<S>(out: &mut S, frame: &Frame) -> Result<(), ()>
where
    S: futures::Sink<Message> + Unpin,
{
    let text = serde_json::to_string(frame).map_err(|_| ())?;
    out.send(Message::Text(text.into())).await.map_err(|_| ())
}
