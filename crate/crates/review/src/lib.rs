//! JSON API over a pipeline store: the review queue, stream views with a
//! billing overlay, verdict submission and the phase ledger.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, Utc};
use hydroclean::detect::{classify_mui, monthly_std, std2m, MuiVerdict};
use hydroclean::model::{render_ledger, AnomalyEvent, CompositeKey, EventId, HourStamp, PhaseReport, Reading};
use hydroclean::pipeline::{Pipeline, PipelineError, QueueItem};
use hydroclean::repair::{Decision, MuiProposal, Side, Verdict};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

/// Points returned for one stream view at most.
pub const MAX_POINTS: usize = 5000;

pub type Shared = Arc<RwLock<Pipeline>>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status: status.as_u16(), code: code.into(), message: message.into() }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let code = e.code();
        let status = match code {
            "unknown_event" | "unknown_stream" => StatusCode::NOT_FOUND,
            "already_repaired" | "not_queued" | "review_closed" => StatusCode::CONFLICT,
            "bad_verdict" | "wrong_class" => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub at: HourStamp,
    pub litres: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BillingBand {
    pub period_start: NaiveDate,
    pub period_end: NaiveDate,
    pub billed_litres: i64,
    /// Sum of the stream's current readings over the period.
    pub metered_litres: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamView {
    pub key: CompositeKey,
    pub category: Option<String>,
    pub unit: Option<String>,
    pub total_points: usize,
    pub decimated: bool,
    pub points: Vec<Point>,
    pub billing: Vec<BillingBand>,
    pub std2m: Option<f64>,
    pub verdict: Option<MuiVerdict>,
    pub proposal: Option<MuiProposal>,
    pub events: Vec<AnomalyEvent>,
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct StreamQuery {
    pub from: Option<HourStamp>,
    pub to: Option<HourStamp>,
    pub max_points: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictBody {
    pub key: CompositeKey,
    pub event_id: EventId,
    pub decision: Decision,
    #[serde(default)]
    pub edited_changepoint: Option<HourStamp>,
    #[serde(default)]
    pub edited_factor: Option<f64>,
    #[serde(default)]
    pub edited_segment: Option<Side>,
    #[serde(default)]
    pub reviewer: Option<String>,
    #[serde(default)]
    pub decided_at: Option<DateTime<Utc>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportView {
    pub phase_completed: Option<u8>,
    pub reports: Vec<PhaseReport>,
    pub ledger: String,
}

/// Keeps the first and last reading plus the minimum and maximum of each
/// bucket, so isolated spikes survive thinning.
pub fn decimate(readings: &[Reading], max_points: usize) -> Vec<Point> {
    let point = |r: &Reading| Point { at: r.at, litres: r.value.litres() };
    let max_points = max_points.max(2);
    if readings.len() <= max_points {
        return readings.iter().map(point).collect();
    }
    let buckets = max_points / 2;
    let mut out = Vec::with_capacity(buckets * 2);
    for b in 0..buckets {
        let lo = b * readings.len() / buckets;
        let hi = (b + 1) * readings.len() / buckets;
        let chunk = &readings[lo..hi];
        let (mut imin, mut imax) = (0, 0);
        for (i, r) in chunk.iter().enumerate() {
            if r.value < chunk[imin].value {
                imin = i;
            }
            if r.value > chunk[imax].value {
                imax = i;
            }
        }
        out.push(point(&chunk[imin.min(imax)]));
        if imin != imax {
            out.push(point(&chunk[imin.max(imax)]));
        }
    }
    out
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/queue", get(queue))
        .route("/stream/{key}", get(stream))
        .route("/verdict", post(verdict))
        .route("/report", get(report))
        .with_state(state)
}

pub async fn serve(pipeline: Pipeline, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, router(Arc::new(RwLock::new(pipeline))))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn queue(State(s): State<Shared>) -> ApiResult<Vec<QueueItem>> {
    Ok(Json(s.read().await.queue()))
}

async fn stream(State(s): State<Shared>, Path(key): Path<String>, Query(q): Query<StreamQuery>) -> ApiResult<StreamView> {
    let key: CompositeKey =
        key.parse().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_key", format!("{key}: {e}")))?;
    let p = s.read().await;
    let st = p.stream(&key).ok_or_else(|| ApiError::from(PipelineError::UnknownStream(key.clone())))?;
    let readings: Vec<Reading> = st
        .readings()
        .iter()
        .filter(|r| q.from.is_none_or(|f| r.at >= f) && q.to.is_none_or(|t| r.at < t))
        .copied()
        .collect();
    let max_points = q.max_points.unwrap_or(MAX_POINTS).min(MAX_POINTS);
    let points = decimate(&readings, max_points);
    let billing = p
        .billing_for(&key)
        .iter()
        .map(|b| BillingBand {
            period_start: b.period_start,
            period_end: b.period_end,
            billed_litres: b.consumption.litres(),
            metered_litres: st.sum_in(&b.hours()).litres(),
        })
        .collect();
    let score = p.month_grid().ok().and_then(|g| std2m(&key, &monthly_std(st, &g)).ok());
    Ok(Json(StreamView {
        key: key.clone(),
        category: st.category.as_ref().map(|c| c.main.code().to_string()),
        unit: st.unit_label.clone(),
        total_points: readings.len(),
        decimated: points.len() < readings.len(),
        points,
        billing,
        std2m: score,
        verdict: score.map(|v| classify_mui(v, &p.config().mui)),
        proposal: p.proposal(&key).cloned(),
        events: p.events().filter(|e| e.key == key).map(|e| AnomalyEvent { originals: Vec::new(), ..e.clone() }).collect(),
    }))
}

async fn verdict(State(s): State<Shared>, body: Bytes) -> ApiResult<AnomalyEvent> {
    let b: VerdictBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()))?;
    let v = Verdict {
        key: b.key,
        event_id: b.event_id,
        decision: b.decision,
        edited_changepoint: b.edited_changepoint,
        edited_factor: b.edited_factor,
        edited_segment: b.edited_segment,
        reviewer: b.reviewer.unwrap_or_else(|| "analyst".into()),
        decided_at: b.decided_at.unwrap_or_else(Utc::now),
    };
    let mut p = s.write().await;
    let event = p.submit_verdict(v)?;
    tracing::info!(id = %event.id, key = %event.key, status = ?event.status, "verdict applied");
    Ok(Json(AnomalyEvent { originals: Vec::new(), ..event }))
}

async fn report(State(s): State<Shared>) -> ApiResult<ReportView> {
    let p = s.read().await;
    Ok(Json(ReportView {
        phase_completed: p.phase_completed(),
        reports: p.reports().to_vec(),
        ledger: render_ledger(p.reports()),
    }))
}
