//! Peak windows and peak-contributor rankings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity::Calendar;
use crate::model::{Consumption, DataStream, HourRange, HourStamp, RankEntry, Ranking, LITRES_PER_M3};

#[derive(Debug, Error, PartialEq)]
pub enum PeakError {
    #[error("range {range} is shorter than the {window_hours} h window")]
    InvalidRange { range: HourRange, window_hours: i64 },
    #[error("no streams to analyse")]
    EmptyStreamSet,
    #[error("k must be at least 1")]
    InvalidK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakResult {
    pub window: HourRange,
    pub window_hours: i64,
    pub total_volume: Consumption,
    /// m³ per hour.
    pub peak_load: f64,
    pub stream_count: usize,
}

pub fn peak_load(result: &PeakResult) -> f64 {
    result.total_volume.m3() / result.window_hours as f64
}

fn div_round(num: i128, den: i128) -> i64 {
    ((2 * num + num.signum() * den) / (2 * den)) as i64
}

/// Window volume scaled by expected over present hours, rounded to the litre.
pub fn compensate(volume: i64, expected: i64, present: i64) -> Option<i64> {
    if present <= 0 {
        return None;
    }
    if expected == present {
        return Some(volume);
    }
    Some(div_round(volume as i128 * expected as i128, present as i128))
}

/// Hourly totals over `range`; missing hours contribute nothing.
pub fn aggregate_series(streams: &[DataStream], range: &HourRange) -> Vec<i64> {
    let n = range.len() as usize;
    streams
        .par_iter()
        .fold(
            || vec![0i64; n],
            |mut acc, s| {
                for r in s.slice(range) {
                    acc[(r.at - range.start) as usize] += r.value.litres();
                }
                acc
            },
        )
        .reduce(
            || vec![0i64; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

fn prefix(xs: impl Iterator<Item = i64>) -> Vec<i64> {
    let mut p = vec![0i64];
    for x in xs {
        p.push(p.last().unwrap() + x);
    }
    p
}

/// Per-stream prefix sums of value and presence over `range`.
struct StreamPrefix {
    volume: Vec<i64>,
    present: Vec<i64>,
}

impl StreamPrefix {
    fn build(s: &DataStream, range: &HourRange, calendar: &Calendar) -> Self {
        let n = range.len() as usize;
        let mut vol = vec![0i64; n];
        let mut pres = vec![0i64; n];
        for r in s.slice(range) {
            let i = (r.at - range.start) as usize;
            vol[i] += r.value.litres();
            if calendar.contains(r.at) {
                pres[i] = 1;
            }
        }
        StreamPrefix { volume: prefix(vol.into_iter()), present: prefix(pres.into_iter()) }
    }

    fn window(&self, lo: usize, hi: usize) -> (i64, i64) {
        (self.volume[hi] - self.volume[lo], self.present[hi] - self.present[lo])
    }
}

fn expected_prefix(range: &HourRange, calendar: &Calendar) -> Vec<i64> {
    prefix(range.iter().map(|t| calendar.contains(t) as i64))
}

fn argmax_earliest(totals: &[i64]) -> usize {
    let mut best = 0;
    for (i, v) in totals.iter().enumerate() {
        if *v > totals[best] {
            best = i;
        }
    }
    best
}

/// The `window_hours` window within `range` with the largest total volume.
///
/// With a calendar each stream's window volume is scaled by expected over
/// present hours first; streams without any reading in a window add nothing
/// to it. Ties go to the earliest window.
pub fn peak_window(
    streams: &[DataStream],
    range: &HourRange,
    window_hours: i64,
    compensation: Option<&Calendar>,
) -> Result<PeakResult, PeakError> {
    if window_hours < 1 || range.len() < window_hours {
        return Err(PeakError::InvalidRange { range: *range, window_hours });
    }
    if streams.is_empty() {
        return Err(PeakError::EmptyStreamSet);
    }
    let w = window_hours as usize;
    let starts = range.len() as usize - w + 1;
    let totals: Vec<i64> = match compensation {
        None => {
            let p = prefix(aggregate_series(streams, range).into_iter());
            (0..starts).map(|s| p[s + w] - p[s]).collect()
        }
        Some(cal) => {
            let exp = expected_prefix(range, cal);
            streams
                .par_iter()
                .fold(
                    || vec![0i64; starts],
                    |mut acc, s| {
                        let sp = StreamPrefix::build(s, range, cal);
                        for (i, a) in acc.iter_mut().enumerate() {
                            let (v, present) = sp.window(i, i + w);
                            *a += compensate(v, exp[i + w] - exp[i], present).unwrap_or(0);
                        }
                        acc
                    },
                )
                .reduce(
                    || vec![0i64; starts],
                    |mut a, b| {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        a
                    },
                )
        }
    };
    let best = argmax_earliest(&totals);
    let window = HourRange::with_len(range.start + best as i64, window_hours);
    let total_volume = Consumption::from_litres(totals[best]);
    Ok(PeakResult {
        window,
        window_hours,
        total_volume,
        peak_load: total_volume.litres() as f64 / LITRES_PER_M3 as f64 / window_hours as f64,
        stream_count: streams.len(),
    })
}

/// Per-stream window volumes, largest first, truncated to `k`.
///
/// With a calendar, volumes are gap-compensated and streams with no present
/// hour in the window are listed in `excluded` instead of ranked.
pub fn top_k_contributors(
    streams: &[DataStream],
    window: &HourRange,
    k: usize,
    compensation: Option<&Calendar>,
) -> Result<Ranking, PeakError> {
    if k == 0 {
        return Err(PeakError::InvalidK);
    }
    let rows: Vec<Result<RankEntry, &DataStream>> = streams
        .par_iter()
        .map(|s| {
            let slice = s.slice(window);
            let volume: i64 = slice.iter().map(|r| r.value.litres()).sum();
            let load = match compensation {
                None => Some(volume),
                Some(cal) => {
                    let present = slice.iter().filter(|r| cal.contains(r.at)).count() as i64;
                    compensate(volume, cal.expected_in(window), present)
                }
            };
            match load {
                Some(l) => Ok(RankEntry {
                    key: s.key.clone(),
                    load: Consumption::from_litres(l),
                    category: s.category.as_ref().map(|c| c.main),
                }),
                None => Err(s),
            }
        })
        .collect();
    let mut entries = Vec::with_capacity(rows.len());
    let mut excluded = Vec::new();
    for row in rows {
        match row {
            Ok(e) => entries.push(e),
            Err(s) => excluded.push(s.key.clone()),
        }
    }
    excluded.sort();
    if !excluded.is_empty() {
        tracing::debug!(count = excluded.len(), %window, "streams without data in window");
    }
    let mut ranking = Ranking::new(*window, entries);
    ranking.truncate(k);
    ranking.excluded = excluded;
    Ok(ranking)
}

/// Smallest range of whole hours covering every reading.
pub fn data_range(streams: &[DataStream]) -> Option<HourRange> {
    let first = streams.iter().filter_map(|s| s.readings().first()).map(|r| r.at).min()?;
    let last: HourStamp = streams.iter().filter_map(|s| s.readings().last()).map(|r| r.at).max()?;
    Some(HourRange::new(first, last + 1))
}
