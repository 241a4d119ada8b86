//! Duplicate streams, duplicate records and the missing-hour census.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AnomalyEvent, CompositeKey, DataStream, ErrorClass, EventStatus, HourRange, HourStamp, Reading, RepairAction, Span,
};

#[derive(Debug, Error, PartialEq)]
pub enum IntegrityError {
    #[error("{key}: no present readings in window {window}")]
    NoDataInWindow { key: CompositeKey, window: HourRange },
}

/// Fraction of streams that must miss a date for it to count as a global outage.
pub const GLOBAL_OUTAGE_THRESHOLD: f64 = 0.99;

fn series_hash(readings: &[Reading]) -> u64 {
    let mut h = DefaultHasher::new();
    readings.hash(&mut h);
    h.finish()
}

fn span_of(stream: &DataStream) -> Span {
    match stream.observed_range() {
        Some(r) => Span { first: r.start, last: r.end - 1 },
        None => Span::single(HourStamp::from_hours(0)),
    }
}

/// Keeps one stream per group of exact copies.
///
/// The survivor is the smallest key of its group; every other member yields a
/// `DuplicateStream` event pointing at the survivor. Output is sorted by key.
pub fn dedup_streams(mut streams: Vec<DataStream>) -> (Vec<DataStream>, Vec<AnomalyEvent>) {
    streams.sort_by(|a, b| a.key.cmp(&b.key));
    let hashes: Vec<u64> = streams.par_iter().map(|s| series_hash(s.readings())).collect();
    let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, h) in hashes.iter().enumerate() {
        buckets.entry(*h).or_default().push(i);
    }

    // survivor index for every removed stream
    let mut removed: BTreeMap<usize, usize> = BTreeMap::new();
    for members in buckets.values() {
        let mut reps: Vec<usize> = Vec::new();
        for &i in members {
            match reps.iter().find(|&&r| streams[r].readings() == streams[i].readings()) {
                Some(&r) => {
                    removed.insert(i, r);
                }
                None => reps.push(i),
            }
        }
    }

    let mut events = Vec::with_capacity(removed.len());
    for (&i, &r) in &removed {
        let mut e = AnomalyEvent::new(streams[i].key.clone(), ErrorClass::DuplicateStream, span_of(&streams[i]), 0.0)
            .with_status(EventStatus::Repaired);
        e.related_key = Some(streams[r].key.clone());
        events.push(e);
    }
    let kept = streams.into_iter().enumerate().filter(|(i, _)| !removed.contains_key(i)).map(|(_, s)| s).collect();
    (kept, events)
}

/// Resolution of one timestamp holding different values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictPolicy {
    /// Remove every reading at the timestamp; it becomes a gap.
    #[default]
    #[serde(alias = "drop")]
    DropBothMarkMissing,
    #[serde(alias = "first")]
    KeepFirst,
    #[serde(alias = "min")]
    KeepMin,
}

impl FromStr for ConflictPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drop" | "drop-both-mark-missing" => Ok(ConflictPolicy::DropBothMarkMissing),
            "first" | "keep-first" => Ok(ConflictPolicy::KeepFirst),
            "min" | "keep-min" => Ok(ConflictPolicy::KeepMin),
            other => Err(format!("unknown conflict policy {other:?} (drop, first, min)")),
        }
    }
}

impl fmt::Display for ConflictPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConflictPolicy::DropBothMarkMissing => "drop",
            ConflictPolicy::KeepFirst => "first",
            ConflictPolicy::KeepMin => "min",
        })
    }
}

/// Leaves at most one reading per timestamp.
pub fn dedup_records(stream: DataStream, policy: ConflictPolicy) -> (DataStream, Vec<AnomalyEvent>) {
    if stream.has_unique_timestamps() {
        return (stream, Vec::new());
    }
    let key = stream.key.clone();
    let mut out_stream = stream;
    let readings = std::mem::take(out_stream.readings_mut());
    let mut kept = Vec::with_capacity(readings.len());
    let mut events = Vec::new();
    for group in readings.chunk_by(|a, b| a.at == b.at) {
        if group.len() == 1 {
            kept.push(group[0]);
            continue;
        }
        let at = group[0].at;
        let all_equal = group.iter().all(|r| r.value == group[0].value);
        let mut e = if all_equal {
            kept.push(group[0]);
            AnomalyEvent::new(key.clone(), ErrorClass::DuplicateRecord, Span::single(at), group.len() as f64)
                .with_repair(RepairAction::DropRecord)
        } else {
            let action = match policy {
                ConflictPolicy::DropBothMarkMissing => RepairAction::DropRecord,
                ConflictPolicy::KeepFirst => {
                    kept.push(group[0]);
                    RepairAction::DropRecord
                }
                ConflictPolicy::KeepMin => {
                    kept.push(*group.iter().min_by_key(|r| r.value).expect("non-empty group"));
                    RepairAction::DropRecord
                }
            };
            AnomalyEvent::new(key.clone(), ErrorClass::Conflict, Span::single(at), group.len() as f64).with_repair(action)
        };
        e.status = EventStatus::Repaired;
        e.originals = group.to_vec();
        events.push(e);
    }
    *out_stream.readings_mut() = kept;
    (out_stream, events)
}

/// The expected hourly grid shared by every stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub range: HourRange,
    pub global_outage_days: Vec<NaiveDate>,
}

impl Calendar {
    pub fn new(range: HourRange, mut global_outage_days: Vec<NaiveDate>) -> Self {
        global_outage_days.sort();
        global_outage_days.dedup();
        Calendar { range, global_outage_days }
    }

    /// Whole days from the earliest to the latest observed reading, with
    /// global outages detected from the streams themselves.
    pub fn from_streams(streams: &[DataStream]) -> Self {
        let first = streams.iter().filter_map(|s| s.readings().first()).map(|r| r.at).min();
        let last = streams.iter().filter_map(|s| s.readings().last()).map(|r| r.at).max();
        let range = match (first, last) {
            (Some(f), Some(l)) => HourRange::days(f.day(), l.day()),
            _ => HourRange::new(HourStamp::from_hours(0), HourStamp::from_hours(0)),
        };
        let outages = detect_global_outages(streams, &range, GLOBAL_OUTAGE_THRESHOLD);
        Calendar::new(range, outages)
    }

    fn is_outage(&self, at: HourStamp) -> bool {
        self.global_outage_days.binary_search(&at.day()).is_ok()
    }

    pub fn contains(&self, at: HourStamp) -> bool {
        self.range.contains(at) && !self.is_outage(at)
    }

    /// Expected stamps inside `window`.
    pub fn expected_in(&self, window: &HourRange) -> i64 {
        let w = self.range.intersect(window);
        let outage: i64 =
            self.global_outage_days.iter().map(|d| HourRange::day(*d).intersect(&w).len()).sum();
        w.len() - outage
    }

    pub fn expected_count(&self) -> i64 {
        self.expected_in(&self.range)
    }

    pub fn iter(&self) -> impl Iterator<Item = HourStamp> + '_ {
        self.range.iter().filter(|t| !self.is_outage(*t))
    }
}

/// Dates inside `range` on which at least `threshold` of the streams have no reading.
pub fn detect_global_outages(streams: &[DataStream], range: &HourRange, threshold: f64) -> Vec<NaiveDate> {
    if streams.is_empty() || range.is_empty() {
        return Vec::new();
    }
    let dates = range.dates();
    let first = dates[0];
    let covered: Vec<Vec<bool>> = streams
        .par_iter()
        .map(|s| {
            let mut seen = vec![false; dates.len()];
            for r in s.slice(range) {
                let i = (r.at.day() - first).num_days() as usize;
                seen[i] = true;
            }
            seen
        })
        .collect();
    let need = (threshold * streams.len() as f64).ceil() as usize;
    dates
        .iter()
        .enumerate()
        .filter(|(i, _)| covered.iter().filter(|c| !c[*i]).count() >= need.max(1))
        .map(|(_, d)| *d)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapCensus {
    pub key: CompositeKey,
    pub expected_count: u64,
    pub present_count: u64,
    pub missing_timestamps: Vec<HourStamp>,
    pub global_outage_days: Vec<NaiveDate>,
}

impl GapCensus {
    pub fn is_complete(&self) -> bool {
        self.missing_timestamps.is_empty()
    }

    pub fn missing_in(&self, window: &HourRange) -> i64 {
        let lo = self.missing_timestamps.partition_point(|t| *t < window.start);
        let hi = self.missing_timestamps.partition_point(|t| *t < window.end);
        (hi - lo) as i64
    }

    /// Contiguous missing runs.
    pub fn runs(&self) -> Vec<Span> {
        let mut out: Vec<Span> = Vec::new();
        for &t in &self.missing_timestamps {
            match out.last_mut() {
                Some(s) if s.last + 1 == t => s.last = t,
                _ => out.push(Span::single(t)),
            }
        }
        out
    }
}

/// Missing stamps of a deduplicated stream against the shared grid.
pub fn gap_census(stream: &DataStream, calendar: &Calendar) -> GapCensus {
    let present: BTreeSet<HourStamp> =
        stream.slice(&calendar.range).iter().map(|r| r.at).filter(|t| calendar.contains(*t)).collect();
    let missing: Vec<HourStamp> = calendar.iter().filter(|t| !present.contains(t)).collect();
    GapCensus {
        key: stream.key.clone(),
        expected_count: calendar.expected_count() as u64,
        present_count: present.len() as u64,
        missing_timestamps: missing,
        global_outage_days: calendar.global_outage_days.clone(),
    }
}

/// One carried-forward `Gap` event per contiguous missing run.
pub fn gap_events(census: &GapCensus) -> Vec<AnomalyEvent> {
    census
        .runs()
        .into_iter()
        .map(|span| AnomalyEvent::new(census.key.clone(), ErrorClass::Gap, span, span.hours() as f64))
        .collect()
}

/// `(expected, present)` hour counts of a stream inside `window`.
pub fn window_counts(census: &GapCensus, calendar: &Calendar, window: &HourRange) -> (i64, i64) {
    let expected = calendar.expected_in(window);
    (expected, expected - census.missing_in(window))
}

/// Expected over present hours in `window`; 1.0 when nothing is missing.
pub fn gap_scale_factor(census: &GapCensus, calendar: &Calendar, window: &HourRange) -> Result<f64, IntegrityError> {
    let (expected, present) = window_counts(census, calendar, window);
    if present <= 0 {
        return Err(IntegrityError::NoDataInWindow { key: census.key.clone(), window: *window });
    }
    Ok(expected as f64 / present as f64)
}
