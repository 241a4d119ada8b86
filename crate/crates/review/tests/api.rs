use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use hydroclean::model::{EventStatus, HourStamp, RepairAction};
use hydroclean::pipeline::{Config, Inputs, Pipeline, QueueItem};
use hydroclean::synth::{generate, GroundTruth, SyntheticPlan};
use hydroclean_review::{decimate, router, ApiError, Point, ReportView, Shared, StreamView};
use serde_json::{json, Value};
use tokio::sync::RwLock;
use tower::ServiceExt;

fn plan(seed: u64) -> SyntheticPlan {
    let mut p = SyntheticPlan { seed, stream_count: 60, ..SyntheticPlan::default() };
    p.mui.rate = 0.1;
    p.spikes.isolated = 3;
    p.spikes.bursts = 0;
    p.resets.count = 2;
    p
}

fn store(dir: &std::path::Path, plan: &SyntheticPlan, through: u8) -> (Shared, GroundTruth) {
    let corpus = generate(plan);
    corpus.write(&dir.join("data")).unwrap();
    let cfg = Config { store: dir.join("store"), inputs: Inputs::in_dir(&dir.join("data")), ..Config::default() };
    let (mut p, _) = Pipeline::ingest(cfg).unwrap();
    p.run_through(through).unwrap();
    (Arc::new(RwLock::new(p)), corpus.truth)
}

async fn call(state: &Shared, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn path_key(key: &str) -> String {
    key.replace('|', "%7C")
}

/// Every reading of `key`, fetched in undecimated windows.
async fn full_series(state: &Shared, key: &str) -> Vec<Point> {
    let end = state.read().await.stream(&key.parse().unwrap()).unwrap().readings().last().unwrap().at + 1;
    let first = state.read().await.stream(&key.parse().unwrap()).unwrap().readings()[0].at;
    let mut t = first;
    let mut out = Vec::new();
    while t < end {
        let to = t + 4000;
        let (_, v) = call(state, "GET", &format!("/stream/{}?from={t}&to={to}", path_key(key)), None).await;
        let v: StreamView = serde_json::from_value(v).unwrap();
        assert!(!v.decimated);
        out.extend(v.points);
        t = to;
    }
    out
}

#[tokio::test]
async fn accept_scales_segment_and_second_post_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let (state, truth) = store(dir.path(), &plan(11), 4);
    let (st, q) = call(&state, "GET", "/queue", None).await;
    assert_eq!(st, StatusCode::OK);
    let queue: Vec<QueueItem> = serde_json::from_value(q).unwrap();
    let item = queue
        .iter()
        .find(|i| i.proposal.is_some() && truth.mui_keys().contains(&i.event.key))
        .expect("a planted MUI with a proposal is queued")
        .clone();
    let proposal = item.proposal.clone().unwrap();
    let key = item.event.key.to_string();

    let before = full_series(&state, &key).await;
    let (_, view) = call(&state, "GET", &format!("/stream/{}", path_key(&key)), None).await;
    let view: StreamView = serde_json::from_value(view).unwrap();
    assert!(!view.billing.is_empty());

    let body = json!({"key": key, "event_id": item.event.id, "decision": "accept", "reviewer": "t"}).to_string();
    let (st, ev) = call(&state, "POST", "/verdict", Some(body.clone())).await;
    assert_eq!(st, StatusCode::OK, "{ev}");
    assert_eq!(ev["status"], "repaired");

    let after = full_series(&state, &key).await;
    let segment = match item.event.proposed_repair.clone().unwrap() {
        RepairAction::ScaleSegment { segment, .. } => segment,
        other => panic!("{other:?}"),
    };
    // oracle: scaled side multiplied and rounded, the rest untouched
    assert_eq!(before.len(), after.len());
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(a.at, b.at);
        let expect = if segment.contains(b.at) { (b.litres as f64 * proposal.factor).round() as i64 } else { b.litres };
        assert_eq!(a.litres, expect);
    }
    let (_, q) = call(&state, "GET", "/queue", None).await;
    assert_eq!(q.as_array().unwrap().len(), queue.len() - 1);

    let (st, err) = call(&state, "POST", "/verdict", Some(body)).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["code"], "already_repaired");
}

#[tokio::test]
async fn reject_leaves_stream_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = store(dir.path(), &plan(12), 4);
    let (_, q) = call(&state, "GET", "/queue", None).await;
    let queue: Vec<QueueItem> = serde_json::from_value(q).unwrap();
    let item = &queue[0];
    let uri = format!("/stream/{}?max_points=100000", path_key(&item.event.key.to_string()));
    let (_, before) = call(&state, "GET", &uri, None).await;
    let body = json!({"key": item.event.key, "event_id": item.event.id, "decision": "reject"}).to_string();
    let (st, ev) = call(&state, "POST", "/verdict", Some(body)).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(ev["status"], "rejected");
    let (_, after) = call(&state, "GET", &uri, None).await;
    assert_eq!(before["points"], after["points"]);
}

#[tokio::test]
async fn edit_stores_changepoint() {
    let dir = tempfile::tempdir().unwrap();
    let (state, truth) = store(dir.path(), &plan(13), 4);
    let (_, q) = call(&state, "GET", "/queue", None).await;
    let queue: Vec<QueueItem> = serde_json::from_value(q).unwrap();
    let item = queue.iter().find(|i| truth.mui_keys().contains(&i.event.key)).unwrap();
    let planted = truth.mui.iter().find(|m| m.key == item.event.key).unwrap();
    let moved = planted.changepoint + 24;
    let body = json!({
        "key": item.event.key, "event_id": item.event.id, "decision": "accept_with_edit",
        "edited_changepoint": moved, "edited_factor": 1.0 / planted.factor,
    })
    .to_string();
    let (st, ev) = call(&state, "POST", "/verdict", Some(body)).await;
    assert_eq!(st, StatusCode::OK, "{ev}");
    let seg = &ev["proposed_repair"]["segment"];
    let bound: HourStamp = serde_json::from_value(match planted.side {
        hydroclean::repair::Side::Before => seg["end"].clone(),
        hydroclean::repair::Side::After => seg["start"].clone(),
    })
    .unwrap();
    let p = state.read().await;
    assert_eq!(p.event(item.event.id).unwrap().status, EventStatus::Repaired);
    if item.proposal.as_ref().is_none_or(|pr| pr.segment == planted.side) {
        assert_eq!(bound, moved);
    }
}

#[tokio::test]
async fn client_errors_have_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = store(dir.path(), &plan(14), 4);
    let (st, err) = call(&state, "POST", "/verdict", Some("{not json".into())).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "malformed_body");

    let key = state.read().await.streams()[0].key.to_string();
    let body = json!({"key": key, "event_id": 987654, "decision": "accept"}).to_string();
    let (st, err) = call(&state, "POST", "/verdict", Some(body)).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let err: ApiError = serde_json::from_value(err).unwrap();
    assert_eq!(err.code, "unknown_event");

    let (_, q) = call(&state, "GET", "/queue", None).await;
    let item: QueueItem = serde_json::from_value(q[0].clone()).unwrap();
    let body = json!({"key": item.event.key, "event_id": item.event.id, "decision": "accept", "edited_factor": 2.0})
        .to_string();
    let (st, err) = call(&state, "POST", "/verdict", Some(body)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "bad_verdict");

    let (st, err) = call(&state, "GET", "/stream/nope%7Cnope%7Cnope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "unknown_stream");
    let (st, _) = call(&state, "GET", "/stream/bad", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn empty_queue_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = store(dir.path(), &SyntheticPlan::clean(15, 20), 5);
    let (st, q) = call(&state, "GET", "/queue", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(q, json!([]));
    let (_, r) = call(&state, "GET", "/report", None).await;
    let r: ReportView = serde_json::from_value(r).unwrap();
    assert_eq!(r.phase_completed, Some(5));
    assert_eq!(r.reports.len(), 6);
    assert!(r.ledger.contains("quantized"));
}

#[tokio::test]
async fn verdict_before_phase_four_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = store(dir.path(), &plan(16), 2);
    let key = state.read().await.streams()[0].key.to_string();
    let body = json!({"key": key, "event_id": 1, "decision": "reject"}).to_string();
    let (st, err) = call(&state, "POST", "/verdict", Some(body)).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["code"], "review_closed");
}

#[tokio::test]
async fn stream_window_and_decimation() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = store(dir.path(), &plan(17), 2);
    let p = state.read().await;
    let s = p.streams()[0].clone();
    drop(p);
    let from = s.readings()[100].at;
    let to = s.readings()[300].at;
    let uri = format!("/stream/{}?from={}&to={}", path_key(&s.key.to_string()), from, to);
    let (st, v) = call(&state, "GET", &uri, None).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let v: StreamView = serde_json::from_value(v).unwrap();
    assert!(v.points.iter().all(|p| p.at >= from && p.at < to));
    assert_eq!(v.total_points, s.slice(&hydroclean::model::HourRange::new(from, to)).len());

    let uri = format!("/stream/{}?max_points=200", path_key(&s.key.to_string()));
    let (_, v) = call(&state, "GET", &uri, None).await;
    let v: StreamView = serde_json::from_value(v).unwrap();
    assert!(v.decimated && v.points.len() <= 200);
    let max = s.readings().iter().map(|r| r.value.litres()).max().unwrap();
    let min = s.readings().iter().map(|r| r.value.litres()).min().unwrap();
    assert!(v.points.iter().any(|p| p.litres == max));
    assert!(v.points.iter().any(|p| p.litres == min));
    assert!(v.points.windows(2).all(|w| w[0].at < w[1].at));
}

#[test]
fn decimate_keeps_extremes_of_each_bucket() {
    use hydroclean::model::{Consumption, Reading};
    let rs: Vec<Reading> = (0..1000)
        .map(|i| Reading::new(HourStamp::from_hours(i), Consumption::from_litres((i * 7919 % 1000) - 300)))
        .collect();
    let pts = decimate(&rs, 100);
    assert!(pts.len() <= 100);
    for b in 0..50 {
        let chunk = &rs[b * 20..(b + 1) * 20];
        let lo = chunk.iter().map(|r| r.value.litres()).min().unwrap();
        let hi = chunk.iter().map(|r| r.value.litres()).max().unwrap();
        let inside: Vec<i64> =
            pts.iter().filter(|p| chunk.iter().any(|r| r.at == p.at)).map(|p| p.litres).collect();
        assert!(inside.contains(&lo) && inside.contains(&hi));
    }
    assert_eq!(decimate(&rs[..10], 100).len(), 10);
}
