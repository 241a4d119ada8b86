use serde::{Deserialize, Serialize};

use super::{CompositeKey, ConsumerCategory, Consumption, HourRange, HourStamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Reading {
    pub at: HourStamp,
    pub value: Consumption,
}

impl Reading {
    pub fn new(at: HourStamp, value: Consumption) -> Self {
        Reading { at, value }
    }
}

/// One meter's hourly series.
///
/// Readings are kept sorted by timestamp. Until duplicate records have been
/// resolved the same timestamp may appear more than once; those entries keep
/// their original input order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataStream {
    pub key: CompositeKey,
    pub category: Option<ConsumerCategory>,
    pub unit_label: Option<String>,
    readings: Vec<Reading>,
}

impl DataStream {
    pub fn new(key: CompositeKey, mut readings: Vec<Reading>) -> Self {
        readings.sort_by_key(|r| r.at);
        DataStream { key, category: None, unit_label: None, readings }
    }

    pub fn readings(&self) -> &[Reading] {
        &self.readings
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    /// Replaces the series; the new readings are re-sorted.
    pub fn set_readings(&mut self, mut readings: Vec<Reading>) {
        readings.sort_by_key(|r| r.at);
        self.readings = readings;
    }

    pub fn into_readings(self) -> Vec<Reading> {
        self.readings
    }

    /// `[first, last + 1)` over present stamps.
    pub fn observed_range(&self) -> Option<HourRange> {
        let first = self.readings.first()?.at;
        let last = self.readings.last()?.at;
        Some(HourRange::new(first, last + 1))
    }

    pub fn has_unique_timestamps(&self) -> bool {
        self.readings.windows(2).all(|w| w[0].at < w[1].at)
    }

    pub fn total(&self) -> Consumption {
        self.readings.iter().map(|r| r.value).sum()
    }

    /// Reading at `at`; first match when duplicates remain.
    pub fn get(&self, at: HourStamp) -> Option<Consumption> {
        let i = self.readings.partition_point(|r| r.at < at);
        self.readings.get(i).filter(|r| r.at == at).map(|r| r.value)
    }

    /// Readings with stamps inside `range`.
    pub fn slice(&self, range: &HourRange) -> &[Reading] {
        let lo = self.readings.partition_point(|r| r.at < range.start);
        let hi = self.readings.partition_point(|r| r.at < range.end);
        &self.readings[lo..hi.max(lo)]
    }

    pub fn sum_in(&self, range: &HourRange) -> Consumption {
        self.slice(range).iter().map(|r| r.value).sum()
    }

    pub(crate) fn readings_mut(&mut self) -> &mut Vec<Reading> {
        &mut self.readings
    }
}
