use std::sync::Arc;
use std::time::{Duration, Instant};

use dea_lab::rig::{ChannelMode, SimFaults, TelemetrySample};
use dea_lab_service::stream::{Frame, StreamItem};
use dea_lab_service::{router, AppState, ServiceConfig};
use futures::StreamExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

struct Server {
    base: String,
    ws: String,
    state: Arc<AppState>,
    _dir: tempfile::TempDir,
}

async fn serve(config: impl FnOnce(&mut ServiceConfig)) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig {
        data_dir: dir.path().to_path_buf(),
        ..ServiceConfig::default()
    };
    config(&mut cfg);
    let state = AppState::new(cfg);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server {
        base: format!("http://{addr}"),
        ws: format!("ws://{addr}"),
        state,
        _dir: dir,
    }
}

async fn get(url: String) -> (u16, Value) {
    let r = reqwest::get(url).await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

async fn post(url: String, body: Value) -> (u16, Value) {
    let r = reqwest::Client::new().post(url).json(&body).send().await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

async fn command(s: &Server, ch: u32, body: Value) -> (u16, Value) {
    post(format!("{}/channels/{ch}/commands", s.base), body).await
}

async fn wait_for(s: &Server, ch: u32, timeout: Duration, pred: impl Fn(&Value) -> bool) -> Value {
    let start = Instant::now();
    loop {
        let (_, v) = get(format!("{}/channels", s.base)).await;
        let c = v["channels"][ch as usize].clone();
        if pred(&c) {
            return c;
        }
        assert!(start.elapsed() < timeout, "timed out waiting on channel {ch}: {c}");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

fn quick_manifest() -> Value {
    json!({
        "schema_version": 1,
        "name": "svc",
        "seed": 3,
        "channels": 2,
        "space": {
            "fields": [45.0, 50.0],
            "frequencies": [50.0],
            "fillers": ["CB", "CG"],
            "cnt_concs": [2.5, 2.9],
            "replicates_per_cell": 2,
            "lifetime_cap": 10800.0
        },
        "protocol": {"telemetry_rate": 1.0, "pre_sweep": false, "post_sweep": false}
    })
}

#[tokio::test(flavor = "multi_thread")]
async fn channels_start_idle_and_unknown_ids_are_not_found() {
    let s = serve(|_| {}).await;
    let (code, v) = get(format!("{}/channels", s.base)).await;
    assert_eq!(code, 200);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["channels"].as_array().unwrap().len(), 2);
    assert_eq!(v["channels"][0]["mode"], "idle");
    assert_eq!(v["channels"][0]["interlock"]["hv_live"], false);

    assert_eq!(command(&s, 9, json!({"action": "ResetFault"})).await.0, 404);
    assert_eq!(get(format!("{}/campaigns/nope", s.base)).await.0, 404);
    assert_eq!(get(format!("{}/runs/nope/report", s.base)).await.0, 404);
    assert_eq!(get(format!("{}/runs/..%2Fetc/report", s.base)).await.0, 404);
    let (code, v) = get(format!("{}/nothing", s.base)).await;
    assert_eq!(code, 404);
    assert_eq!(v["error"], "not_found");
}

#[tokio::test(flavor = "multi_thread")]
async fn switch_mode_goes_through_the_rig() {
    let s = serve(|_| {}).await;
    let (code, v) = command(&s, 0, json!({"action": "SwitchMode", "payload": {"target": "force"}})).await;
    assert_eq!(code, 200, "{v}");
    assert_eq!(v["accepted"], true);
    assert_eq!(v["channel"]["mode"], "measuring_force");
    let clamp = v["channel"]["clamp_force_n"].as_f64().unwrap();
    assert!((0.6..=0.65).contains(&clamp), "{clamp}");

    let (code, v) = command(&s, 0, json!({"action": "SwitchMode", "payload": {"target": "impedance"}})).await;
    assert_eq!(code, 200, "{v}");
    assert_eq!(v["channel"]["interlock"]["hv_isolated"], true);

    let (code, v) = command(&s, 0, json!({"action": "Abort"})).await;
    assert_eq!(code, 409);
    assert_eq!(v["reason"], "idle");

    let (code, _) = command(&s, 0, json!({"action": "Fly"})).await;
    assert_eq!(code, 400);
}

#[tokio::test(flavor = "multi_thread")]
async fn impedance_refused_while_hv_live_and_abort_flags_trial() {
    let s = serve(|_| {}).await;
    let (code, v) = command(
        &s,
        0,
        json!({"action": "StartTrial", "payload": {"field": 35.0, "freq": 1.0, "filler": "CB", "cnt_conc": 2.5}}),
    )
    .await;
    assert_eq!(code, 202, "{v}");
    let id = v["device_id"].as_str().unwrap().to_string();

    wait_for(&s, 0, Duration::from_secs(10), |c| c["interlock"]["hv_live"] == true).await;
    let (code, v) = command(&s, 0, json!({"action": "SwitchMode", "payload": {"target": "impedance"}})).await;
    assert_eq!(code, 409);
    assert_eq!(v["accepted"], false);
    assert_eq!(v["reason"], "interlock");

    let (code, v) = command(&s, 0, json!({"action": "SwitchMode", "payload": {"target": "idle"}})).await;
    assert_eq!(code, 409);
    assert_eq!(v["reason"], "busy");

    let (code, _) = command(&s, 0, json!({"action": "Abort"})).await;
    assert_eq!(code, 202);
    let c = wait_for(&s, 0, Duration::from_secs(5), |c| !c["last_trial"].is_null()).await;
    assert_eq!(c["last_trial"]["device_id"], id.as_str());
    assert_eq!(c["last_trial"]["status"], "Aborted");
    assert_eq!(c["last_trial"]["lifetime"]["terminal_cause"], "Aborted");
    let c = wait_for(&s, 0, Duration::from_secs(5), |c| c["busy"] == false).await;
    assert_eq!(c["mode"], "idle");
    assert!(c["current_trial"].is_null());
}

#[tokio::test(flavor = "multi_thread")]
async fn start_trial_validates_payload() {
    let s = serve(|_| {}).await;
    let (code, v) = command(&s, 1, json!({"action": "StartTrial", "payload": {"field": -1.0, "freq": 1.0}})).await;
    assert_eq!(code, 400);
    assert_eq!(v["error"], "invalid_trial");
}

#[tokio::test(flavor = "multi_thread")]
async fn campaign_runs_to_a_report_with_monotone_progress() {
    let s = serve(|c| c.accel = f64::INFINITY).await;
    let (code, v) = post(format!("{}/campaigns", s.base), quick_manifest()).await;
    assert_eq!(code, 201, "{v}");
    let id = v["id"].as_str().unwrap().to_string();
    let plan = v["plan"].as_array().unwrap();
    assert_eq!(plan.len(), 2 * 2);
    assert!(plan.iter().all(|t| t["stage"] == 1));

    let (code, v) = command(&s, 0, json!({"action": "SwitchMode", "payload": {"target": "force"}})).await;
    assert_eq!(code, 409, "{v}");
    assert_eq!(v["reason"], "busy");
    let (code, _) = post(format!("{}/campaigns", s.base), quick_manifest()).await;
    assert_eq!(code, 409);

    let start = Instant::now();
    let mut done_cells = 0;
    let view = loop {
        let (code, v) = get(format!("{}/campaigns/{id}", s.base)).await;
        assert_eq!(code, 200);
        let done = v["cells"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|c| c["status"] != "pending")
            .count();
        assert!(done >= done_cells, "cell regressed to pending");
        done_cells = done;
        if v["state"] != "running" {
            break v;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "campaign did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(view["state"], "finished", "{view}");
    assert_eq!(view["boundary"][0]["field"], 45.0);

    let (code, report) = get(format!("{}/runs/{id}/report", s.base)).await;
    assert_eq!(code, 200);
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["trials"], view["trials_completed"]);
    let on_disk: Value =
        serde_json::from_slice(&std::fs::read(s.state.config.data_dir.join(&id).join("report.json")).unwrap()).unwrap();
    assert_eq!(report, on_disk);

    let trials = dea_lab::store::load_trials(s.state.config.data_dir.join(&id)).unwrap();
    for t in &trials {
        let r = dea_lab::store::resolve_ref(s.state.config.data_dir.join(&id), &t.telemetry_ref).unwrap();
        assert!(r.complete && !r.samples.is_empty(), "{}", t.telemetry_ref);
    }

    let c = wait_for(&s, 0, Duration::from_secs(5), |c| c["owner"].is_null()).await;
    assert_eq!(c["mode"], "idle");
}

#[tokio::test(flavor = "multi_thread")]
async fn campaign_abort_cancels() {
    let s = serve(|c| c.accel = 1000.0).await;
    let mut m = quick_manifest();
    m["space"]["fields"] = json!([35.0, 40.0]);
    let (code, v) = post(format!("{}/campaigns", s.base), m).await;
    assert_eq!(code, 201);
    let id = v["id"].as_str().unwrap().to_string();
    wait_for(&s, 0, Duration::from_secs(10), |c| !c["current_trial"].is_null()).await;
    let (code, _) = post(format!("{}/campaigns/{id}/commands", s.base), json!({"action": "Abort"})).await;
    assert_eq!(code, 202);
    let start = Instant::now();
    loop {
        let (_, v) = get(format!("{}/campaigns/{id}", s.base)).await;
        if v["state"] == "cancelled" {
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(20), "{v}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let (code, _) = get(format!("{}/runs/{id}/report", s.base)).await;
    assert_eq!(code, 404);
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_manifest_is_bad_request() {
    let s = serve(|_| {}).await;
    let (code, v) = post(format!("{}/campaigns", s.base), json!({"schema_version": 7})).await;
    assert_eq!(code, 400);
    assert_eq!(v["error"], "invalid_manifest");
}

async fn next_frame<S>(ws: &mut S, wait: Duration) -> Option<Frame>
where
    S: futures::Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        match tokio::time::timeout(wait, ws.next()).await {
            Ok(Some(Ok(Message::Text(t)))) => return Some(serde_json::from_str(t.as_str()).unwrap()),
            Ok(Some(Ok(_))) => continue,
            _ => return None,
        }
    }
}

fn sample(t: f64) -> TelemetrySample {
    TelemetrySample {
        t,
        channel: 0,
        mode: ChannelMode::ActuatingDisplacement,
        voltage: 1200.0,
        current: 1.0,
        displacement: Some(0.1),
        force: None,
        clamp_force: 0.0,
        hv_isolated: false,
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn one_hertz_stream_delivers_every_hundredth_sample() {
    let s = serve(|_| {}).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{}/stream?channels=0&rate=1", s.ws))
        .await
        .unwrap();
    // subscription is registered once the upgrade completes
    tokio::time::sleep(Duration::from_millis(100)).await;
    for k in 0..1000u64 {
        let item = StreamItem::Telemetry {
            channel: 0,
            sample: sample(k as f64 * 0.01),
        };
        s.state.frames.send(Arc::new(Frame::new(item, 1000.0))).unwrap();
    }
    let mut ts = Vec::new();
    while let Some(f) = next_frame(&mut ws, Duration::from_millis(300)).await {
        assert_eq!(f.schema_version, 1);
        assert_eq!(f.time_base.accel, Some(1000.0));
        if let StreamItem::Telemetry { sample, .. } = f.item {
            ts.push(sample.t);
        }
    }
    let expect: Vec<f64> = (0..10).map(|i| (i * 100) as f64 * 0.01).collect();
    assert_eq!(ts, expect);
}

#[tokio::test(flavor = "multi_thread")]
async fn two_clients_on_one_channel_see_identical_sequences() {
    let s = serve(|c| c.accel = f64::INFINITY).await;
    let url = format!("{}/stream?channels=0&rate=2", s.ws);
    let (mut a, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let (mut b, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    tokio::time::sleep(Duration::from_millis(100)).await;
    let (code, _) = command(
        &s,
        0,
        json!({"action": "StartTrial", "payload": {"field": 50.0, "freq": 50.0, "filler": "CG", "cnt_conc": 2.9}}),
    )
    .await;
    assert_eq!(code, 202);
    let mut seqs = Vec::new();
    for ws in [&mut a, &mut b] {
        let mut v = Vec::new();
        while let Some(f) = next_frame(ws, Duration::from_millis(1500)).await {
            v.push(f);
        }
        seqs.push(v);
    }
    assert!(seqs[0].len() > 100, "{}", seqs[0].len());
    assert_eq!(seqs[0], seqs[1]);
    assert!(seqs[0]
        .iter()
        .all(|f| matches!(&f.item, StreamItem::Telemetry { channel: 0, .. })));
}

#[tokio::test(flavor = "multi_thread")]
async fn subscribing_to_a_faulted_channel_yields_a_fault_first() {
    let s = serve(|c| {
        c.faults.insert(
            1,
            SimFaults {
                force_dropout: true,
                ..SimFaults::default()
            },
        );
    })
    .await;
    let (code, v) = command(&s, 1, json!({"action": "SwitchMode", "payload": {"target": "force"}})).await;
    assert_eq!(code, 409, "{v}");
    assert_eq!(v["channel"]["mode"], "faulted");

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("{}/stream?channels=1", s.ws))
        .await
        .unwrap();
    let f = next_frame(&mut ws, Duration::from_secs(2)).await.expect("fault frame");
    match f.item {
        StreamItem::Fault { channel, .. } => assert_eq!(channel, 1),
        other => panic!("expected fault, got {other:?}"),
    }

    let (code, v) = command(&s, 1, json!({"action": "StartTrial", "payload": {"field": 40.0, "freq": 1.0}})).await;
    assert_eq!(code, 409);
    assert_eq!(v["reason"], "faulted");
    let (code, v) = command(&s, 1, json!({"action": "ResetFault"})).await;
    assert_eq!(code, 200, "{v}");
    assert_eq!(v["channel"]["mode"], "idle");
    assert!(v["channel"]["fault"].is_null());
}
