//! Turning detected anomalies into corrected streams.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AnomalyEvent, BillingRecord, CompositeKey, Consumption, DataStream, ErrorClass, EventId, EventStatus, HourRange,
    HourStamp, ModelError, Reading, RepairAction, Span,
};

#[derive(Debug, Error, PartialEq)]
pub enum RepairError {
    #[error("{0}: no billing record overlaps the stream")]
    NoGroundTruth(CompositeKey),
    #[error("{key}: best residual {best} does not halve {before}")]
    NoConfidentProposal { key: CompositeKey, best: Consumption, before: Consumption },
    #[error("unknown event {0}")]
    UnknownEvent(EventId),
    #[error("event {0} is already repaired")]
    AlreadyRepaired(EventId),
    #[error("event {0} is {1:?}, not queued")]
    NotQueued(EventId, EventStatus),
    #[error("event {0} is a {1} event")]
    WrongClass(EventId, ErrorClass),
    #[error("verdict rejected: {0}")]
    BadVerdict(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Largest half-width tried when looking for valid neighbors.
pub const MAX_NEIGHBORHOOD_HOURS: i64 = 64;

fn div_round(num: i64, den: i64) -> i64 {
    let (n, d) = (num as i128, den as i128);
    let q = (2 * n + n.signum() * d) / (2 * d);
    q as i64
}

/// Rounded mean of present readings within ±`hours` of `span` that are
/// neither inside `span` nor inside any of the `flagged` spans.
pub fn neighborhood_mean(stream: &DataStream, span: Span, hours: i64, flagged: &[Span]) -> Option<Consumption> {
    let window = HourRange::new(span.first - hours, span.last + hours + 1);
    let (mut sum, mut n) = (0i64, 0i64);
    for r in stream.slice(&window) {
        if span.contains(r.at) || flagged.iter().any(|f| f.contains(r.at)) {
            continue;
        }
        sum += r.value.litres();
        n += 1;
    }
    (n > 0).then(|| Consumption::from_litres(div_round(sum, n)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeRepair {
    Replaced { value: Consumption, neighborhood_hours: i64 },
    /// No valid neighbor within the widest window; the span became a gap.
    MarkedGap,
}

/// Replaces the readings of a spike or reset span by its neighborhood mean.
///
/// The window starts at ±`neighborhood_hours` and doubles up to
/// [`MAX_NEIGHBORHOOD_HOURS`]. Replaced readings are kept in `event.originals`.
pub fn repair_spike(
    stream: &mut DataStream,
    event: &mut AnomalyEvent,
    neighborhood_hours: i64,
    flagged: &[Span],
) -> Result<SpikeRepair, RepairError> {
    if !matches!(event.class, ErrorClass::Spike | ErrorClass::Reset) {
        return Err(RepairError::WrongClass(event.id, event.class));
    }
    if event.status.is_resolved() {
        return Err(RepairError::AlreadyRepaired(event.id));
    }
    let mut h = neighborhood_hours.max(1);
    let mut mean = None;
    while mean.is_none() && h <= MAX_NEIGHBORHOOD_HOURS {
        mean = neighborhood_mean(stream, event.span, h, flagged).map(|m| (m, h));
        h *= 2;
    }
    let span = event.span;
    let readings = stream.readings_mut();
    event.originals = readings.iter().filter(|r| span.contains(r.at)).copied().collect();
    let outcome = match mean {
        Some((value, used)) => {
            for r in readings.iter_mut().filter(|r| span.contains(r.at)) {
                r.value = value;
            }
            SpikeRepair::Replaced { value, neighborhood_hours: used }
        }
        None => {
            readings.retain(|r| !span.contains(r.at));
            SpikeRepair::MarkedGap
        }
    };
    event.proposed_repair = Some(RepairAction::ReplaceWithNeighborhoodMean);
    event.status = EventStatus::Repaired;
    Ok(outcome)
}

/// Σ |stream sum − billed| over billing periods overlapping the stream.
pub fn billing_residual(stream: &DataStream, billing: &[BillingRecord]) -> Result<Consumption, RepairError> {
    let range = stream.observed_range().ok_or_else(|| RepairError::NoGroundTruth(stream.key.clone()))?;
    let mut any = false;
    let mut total = Consumption::ZERO;
    for b in billing {
        let period = b.hours();
        if period.intersect(&range).is_empty() {
            continue;
        }
        any = true;
        total += (stream.sum_in(&period) - b.consumption).abs();
    }
    if any {
        Ok(total)
    } else {
        Err(RepairError::NoGroundTruth(stream.key.clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Before,
    After,
}

/// Imperial gallons per cubic metre.
pub const IMPERIAL_GALLONS_PER_M3: f64 = 219.969;
/// Cubic feet per cubic metre.
pub const CUBIC_FEET_PER_M3: f64 = 35.3147;

/// Unit-conversion factors, their decades and reciprocals.
pub fn default_factors() -> Vec<f64> {
    let base = [10.0, 100.0, 1000.0, IMPERIAL_GALLONS_PER_M3, CUBIC_FEET_PER_M3];
    base.iter().copied().chain(base.iter().map(|f| 1.0 / f)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MuiSearch {
    pub factors: Vec<f64>,
    /// A proposal must bring the residual to at most this fraction of the original.
    pub max_residual_ratio: f64,
    /// Relative tolerance when matching an edited factor to a candidate.
    pub snap_tolerance: f64,
}

impl Default for MuiSearch {
    fn default() -> Self {
        MuiSearch { factors: default_factors(), max_residual_ratio: 0.5, snap_tolerance: 0.005 }
    }
}

impl MuiSearch {
    /// Candidate within the relative tolerance of `f`, if any.
    pub fn snap(&self, f: f64) -> Option<f64> {
        self.factors
            .iter()
            .copied()
            .filter(|c| ((f - c) / c).abs() <= self.snap_tolerance)
            .min_by(|a, b| ((f - a) / a).abs().total_cmp(&((f - b) / b).abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuiProposal {
    pub key: CompositeKey,
    /// First stamp of the `after` side.
    pub changepoint: HourStamp,
    pub factor: f64,
    pub residual_before: Consumption,
    pub residual_after: Consumption,
    pub segment: Side,
}

impl MuiProposal {
    pub fn range(&self, stream: &DataStream) -> HourRange {
        segment_range(stream, self.changepoint, self.segment)
    }
}

/// Stamps scaled when `side` of `changepoint` is repaired.
pub fn segment_range(stream: &DataStream, changepoint: HourStamp, side: Side) -> HourRange {
    let all = stream.observed_range().unwrap_or(HourRange::new(changepoint, changepoint));
    match side {
        Side::Before => HourRange::new(all.start.min(changepoint), changepoint),
        Side::After => HourRange::new(changepoint, all.end.max(changepoint)),
    }
}

/// Multiplies the readings inside `segment`, returning the originals.
pub fn scale_segment(stream: &mut DataStream, segment: &HourRange, factor: f64) -> Vec<Reading> {
    let mut originals = Vec::new();
    for r in stream.readings_mut().iter_mut().filter(|r| segment.contains(r.at)) {
        originals.push(*r);
        r.value = r.value.scale(factor);
    }
    originals
}

struct DayTable {
    first_stamp: HourStamp,
    /// prefix[d] = litres on days before day index d
    prefix: Vec<i64>,
}

impl DayTable {
    fn build(stream: &DataStream) -> Option<Self> {
        let range = stream.observed_range()?;
        let first_day = range.start.day();
        let first_stamp = HourStamp::first_of_day(first_day);
        let days = ((range.end - 1 - first_stamp) / 24 + 1) as usize;
        let mut daily = vec![0i64; days];
        for r in stream.readings() {
            daily[((r.at - first_stamp) / 24) as usize] += r.value.litres();
        }
        let mut prefix = Vec::with_capacity(days + 1);
        prefix.push(0);
        for d in daily {
            prefix.push(prefix.last().unwrap() + d);
        }
        Some(DayTable { first_stamp, prefix })
    }

    fn days(&self) -> usize {
        self.prefix.len() - 1
    }

    /// Day index of `at`, clamped into `0..=days`.
    fn index(&self, at: HourStamp) -> usize {
        let d = (at - self.first_stamp).div_euclid(24);
        d.clamp(0, self.days() as i64) as usize
    }

    fn sum(&self, lo: usize, hi: usize) -> i64 {
        if hi <= lo {
            0
        } else {
            self.prefix[hi] - self.prefix[lo]
        }
    }
}

/// Searches changepoint (day granularity), factor and side minimizing the billing residual.
///
/// Every day boundary strictly inside the stream is tried, so the search
/// covers month boundaries and the days around them. Ties prefer factors
/// closer to 1 (in log terms), then earlier changepoints. The stream is not
/// modified.
pub fn propose_mui_repair(
    stream: &DataStream,
    billing: &[BillingRecord],
    search: &MuiSearch,
) -> Result<MuiProposal, RepairError> {
    let before = billing_residual(stream, billing)?;
    let table = DayTable::build(stream).ok_or_else(|| RepairError::NoGroundTruth(stream.key.clone()))?;
    let range = stream.observed_range().expect("non-empty");
    let periods: Vec<(usize, usize, i64)> = billing
        .iter()
        .filter(|b| !b.hours().intersect(&range).is_empty())
        .map(|b| {
            let h = b.hours();
            (table.index(h.start), table.index(h.end), b.consumption.litres())
        })
        .collect();
    // sums of the stream inside each period, exact
    let sums: Vec<i64> = billing
        .iter()
        .filter(|b| !b.hours().intersect(&range).is_empty())
        .map(|b| stream.sum_in(&b.hours()).litres())
        .collect();

    let mut best: Option<(f64, f64, usize, Side)> = None;
    for c in 1..table.days() {
        for &f in &search.factors {
            for side in [Side::Before, Side::After] {
                let mut res = 0.0;
                for ((a, b, billed), sum) in periods.iter().zip(&sums) {
                    let part = match side {
                        Side::Before => table.sum(*a, c.min(*b)),
                        Side::After => table.sum(c.max(*a), *b),
                    };
                    res += (*sum as f64 + (f - 1.0) * part as f64 - *billed as f64).abs();
                }
                let better = match best {
                    None => true,
                    Some((r, bf, _, _)) => {
                        let tol = 1e-9 * r.abs().max(1.0);
                        res < r - tol || (res <= r + tol && f.ln().abs() < bf.ln().abs())
                    }
                };
                if better {
                    best = Some((res, f, c, side));
                }
            }
        }
    }
    let Some((_, factor, c, side)) = best else {
        return Err(RepairError::NoConfidentProposal { key: stream.key.clone(), best: before, before });
    };
    let changepoint = table.first_stamp + 24 * c as i64;
    let mut trial = stream.clone();
    scale_segment(&mut trial, &segment_range(stream, changepoint, side), factor);
    let after = billing_residual(&trial, billing)?;
    let limit = before.litres() as f64 * search.max_residual_ratio;
    if before == Consumption::ZERO || after.litres() as f64 > limit {
        return Err(RepairError::NoConfidentProposal { key: stream.key.clone(), best: after, before });
    }
    Ok(MuiProposal {
        key: stream.key.clone(),
        changepoint,
        factor,
        residual_before: before,
        residual_after: after,
        segment: side,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    AcceptWithEdit,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub key: CompositeKey,
    pub event_id: EventId,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_changepoint: Option<HourStamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_segment: Option<Side>,
    pub reviewer: String,
    pub decided_at: DateTime<Utc>,
}

impl Verdict {
    pub fn validate(&self) -> Result<(), RepairError> {
        let edited = self.edited_changepoint.is_some() || self.edited_factor.is_some() || self.edited_segment.is_some();
        match self.decision {
            Decision::AcceptWithEdit if !edited => {
                Err(RepairError::BadVerdict("accept_with_edit needs an edited field".into()))
            }
            Decision::Accept | Decision::Reject if edited => {
                Err(RepairError::BadVerdict("edited fields are only allowed with accept_with_edit".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Applies a reviewer's decision on a queued MUI event.
///
/// `proposal` may be absent when the search was not confident; accepting then
/// requires an edit naming at least changepoint and factor.
pub fn apply_verdict(
    stream: &mut DataStream,
    event: &mut AnomalyEvent,
    verdict: &Verdict,
    proposal: Option<&MuiProposal>,
    search: &MuiSearch,
) -> Result<(), RepairError> {
    if verdict.event_id != event.id || verdict.key != event.key || stream.key != event.key {
        return Err(RepairError::UnknownEvent(verdict.event_id));
    }
    if event.class != ErrorClass::Mui {
        return Err(RepairError::WrongClass(event.id, event.class));
    }
    match event.status {
        EventStatus::Queued => {}
        EventStatus::Repaired => return Err(RepairError::AlreadyRepaired(event.id)),
        other => return Err(RepairError::NotQueued(event.id, other)),
    }
    verdict.validate()?;
    if verdict.decision == Decision::Reject {
        event.transition(EventStatus::Rejected)?;
        return Ok(());
    }
    let changepoint = verdict
        .edited_changepoint
        .or(proposal.map(|p| p.changepoint))
        .ok_or_else(|| RepairError::BadVerdict("no proposal; an edited changepoint is required".into()))?;
    let factor = match verdict.edited_factor {
        Some(f) => search
            .snap(f)
            .ok_or_else(|| RepairError::BadVerdict(format!("factor {f} matches no candidate")))?,
        None => proposal
            .map(|p| p.factor)
            .ok_or_else(|| RepairError::BadVerdict("no proposal; an edited factor is required".into()))?,
    };
    let side = verdict.edited_segment.or(proposal.map(|p| p.segment)).unwrap_or(Side::After);
    let segment = segment_range(stream, changepoint, side);
    let action = RepairAction::scale(segment, factor)?;
    event.transition(EventStatus::Repaired)?;
    event.originals = scale_segment(stream, &segment, factor);
    event.proposed_repair = Some(action);
    Ok(())
}

/// Restores the readings an applied repair replaced.
pub fn revert_repair(stream: &mut DataStream, event: &AnomalyEvent) {
    let region = match &event.proposed_repair {
        Some(RepairAction::ScaleSegment { segment, .. }) => *segment,
        _ => event.span.to_range(),
    };
    let readings = stream.readings_mut();
    readings.retain(|r| !region.contains(r.at));
    readings.extend(event.originals.iter().copied());
    readings.sort_by_key(|r| r.at);
}
