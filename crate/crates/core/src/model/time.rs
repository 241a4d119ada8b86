//! Hourly timestamps.
//!
//! Every reading is identified by the end of its one-hour interval, stored as
//! whole hours since the Unix epoch (UTC). Ranges are half-open over those
//! interval-end stamps, so the calendar day `D` owns the stamps
//! `D 01:00 ..= D+1 00:00`.

use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

const SECONDS_PER_HOUR: i64 = 3600;

/// End of a one-hour metering interval, in hours since 1970-01-01T00:00Z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct HourStamp(i64);

impl HourStamp {
    pub const fn from_hours(hours: i64) -> Self {
        HourStamp(hours)
    }

    pub const fn hours(self) -> i64 {
        self.0
    }

    /// Fails unless `dt` lies exactly on an hour boundary.
    pub fn from_datetime(dt: DateTime<Utc>) -> Result<Self, ModelError> {
        let secs = dt.timestamp();
        if dt.timestamp_subsec_nanos() != 0 || secs.rem_euclid(SECONDS_PER_HOUR) != 0 {
            return Err(ModelError::OffHourTimestamp(dt.to_rfc3339()));
        }
        Ok(HourStamp(secs.div_euclid(SECONDS_PER_HOUR)))
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_opt(self.0 * SECONDS_PER_HOUR, 0)
            .single()
            .expect("hour stamp within chrono range")
    }

    /// The stamp of the first interval ending on `date` after midnight (01:00).
    pub fn first_of_day(date: NaiveDate) -> Self {
        let midnight = date.and_hms_opt(0, 0, 0).expect("midnight exists");
        HourStamp(Utc.from_utc_datetime(&midnight).timestamp() / SECONDS_PER_HOUR + 1)
    }

    /// Calendar day on which the metered hour began.
    pub fn day(self) -> NaiveDate {
        HourStamp(self.0 - 1).to_datetime().date_naive()
    }

    /// Hour of day (0..24) at which the metered hour began.
    pub fn hour_of_day(self) -> u32 {
        HourStamp(self.0 - 1).to_datetime().hour()
    }

    /// Monday = 0.
    pub fn weekday(self) -> u32 {
        self.day().weekday().num_days_from_monday()
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let s = s.trim();
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return HourStamp::from_datetime(dt.with_timezone(&Utc));
        }
        for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
            if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
                return HourStamp::from_datetime(Utc.from_utc_datetime(&naive));
            }
        }
        Err(ModelError::BadTimestamp(s.to_string()))
    }
}

impl Add<i64> for HourStamp {
    type Output = HourStamp;
    fn add(self, hours: i64) -> HourStamp {
        HourStamp(self.0 + hours)
    }
}

impl Sub<i64> for HourStamp {
    type Output = HourStamp;
    fn sub(self, hours: i64) -> HourStamp {
        HourStamp(self.0 - hours)
    }
}

impl Sub for HourStamp {
    type Output = i64;
    fn sub(self, other: HourStamp) -> i64 {
        self.0 - other.0
    }
}

impl fmt::Display for HourStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%M:%SZ"))
    }
}

impl FromStr for HourStamp {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HourStamp::parse(s)
    }
}

impl Serialize for HourStamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HourStamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        HourStamp::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Inclusive span of interval-end stamps, used for anomaly extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub first: HourStamp,
    pub last: HourStamp,
}

impl Span {
    pub fn new(first: HourStamp, last: HourStamp) -> Result<Self, ModelError> {
        if last < first {
            return Err(ModelError::EmptySpan);
        }
        Ok(Span { first, last })
    }

    pub fn single(at: HourStamp) -> Self {
        Span { first: at, last: at }
    }

    pub fn hours(&self) -> i64 {
        self.last - self.first + 1
    }

    pub fn contains(&self, at: HourStamp) -> bool {
        self.first <= at && at <= self.last
    }

    pub fn to_range(self) -> HourRange {
        HourRange { start: self.first, end: self.last + 1 }
    }
}

/// Half-open range `[start, end)` of interval-end stamps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HourRange {
    pub start: HourStamp,
    pub end: HourStamp,
}

impl HourRange {
    pub fn new(start: HourStamp, end: HourStamp) -> Self {
        HourRange { start, end }
    }

    pub fn with_len(start: HourStamp, hours: i64) -> Self {
        HourRange { start, end: start + hours }
    }

    /// Stamps belonging to calendar days `first..=last`.
    pub fn days(first: NaiveDate, last: NaiveDate) -> Self {
        HourRange {
            start: HourStamp::first_of_day(first),
            end: HourStamp::first_of_day(last + Duration::days(1)),
        }
    }

    pub fn day(date: NaiveDate) -> Self {
        HourRange::days(date, date)
    }

    pub fn len(&self) -> i64 {
        (self.end - self.start).max(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, at: HourStamp) -> bool {
        self.start <= at && at < self.end
    }

    pub fn intersect(&self, other: &HourRange) -> HourRange {
        let start = self.start.max(other.start);
        let end = self.end.min(other.end).max(start);
        HourRange { start, end }
    }

    pub fn iter(&self) -> impl Iterator<Item = HourStamp> {
        (self.start.0..self.end.0).map(HourStamp)
    }

    /// Calendar days touched by the range, in order.
    pub fn dates(&self) -> Vec<NaiveDate> {
        if self.is_empty() {
            return Vec::new();
        }
        let first = self.start.day();
        let last = (self.end - 1).day();
        first.iter_days().take_while(|d| *d <= last).collect()
    }
}

impl fmt::Display for HourRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Twelve consecutive calendar months used for monthly statistics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonthGrid {
    /// Thirteen boundaries; month `k` owns `boundaries[k]..boundaries[k + 1]`.
    pub boundaries: Vec<HourStamp>,
}

impl MonthGrid {
    pub const MONTHS: usize = 12;

    pub fn starting(year: i32, month: u32) -> Self {
        let mut boundaries = Vec::with_capacity(Self::MONTHS + 1);
        let (mut y, mut m) = (year, month);
        for _ in 0..=Self::MONTHS {
            let date = NaiveDate::from_ymd_opt(y, m, 1).expect("valid month start");
            boundaries.push(HourStamp::first_of_day(date));
            m += 1;
            if m > 12 {
                m = 1;
                y += 1;
            }
        }
        MonthGrid { boundaries }
    }

    /// Grid whose first month contains the first hour of `range`.
    pub fn covering(range: &HourRange) -> Self {
        let d = range.start.day();
        MonthGrid::starting(d.year(), d.month())
    }

    pub fn month(&self, k: usize) -> HourRange {
        HourRange::new(self.boundaries[k], self.boundaries[k + 1])
    }

    pub fn range(&self) -> HourRange {
        HourRange::new(self.boundaries[0], self.boundaries[Self::MONTHS])
    }

    /// Index of the month containing `at`, if any.
    pub fn month_of(&self, at: HourStamp) -> Option<usize> {
        if !self.range().contains(at) {
            return None;
        }
        Some(self.boundaries.partition_point(|b| *b <= at) - 1)
    }
}
