//! Context-dependent error detectors.
//!
//! All detectors are pure functions of one stream.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AnomalyEvent, CompositeKey, DataStream, ErrorClass, HourStamp, MonthGrid, Reading, RepairAction, Span,
    LITRES_PER_M3,
};

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("{key}: only {valid} months have enough readings")]
    NotScorable { key: CompositeKey, valid: usize },
}

/// Months need this many readings to get a standard deviation.
pub const MIN_READINGS_PER_MONTH: usize = 24;
/// STD2M needs this many valid months.
pub const MIN_VALID_MONTHS: usize = 6;

/// Population standard deviation in m³ of integer litre values, exact up to the final rounding.
pub fn std_m3(values: impl IntoIterator<Item = i64>) -> Option<f64> {
    let (mut n, mut s, mut q) = (0i128, 0i128, 0i128);
    for v in values {
        let v = v as i128;
        n += 1;
        s += v;
        q += v * v;
    }
    if n == 0 {
        return None;
    }
    let num = n * q - s * s;
    let var = num as f64 / (n * n) as f64;
    Some(var.sqrt() / LITRES_PER_M3 as f64)
}

/// Per-month standard deviation; `None` for months with too few readings.
pub fn monthly_std(stream: &DataStream, grid: &MonthGrid) -> Vec<Option<f64>> {
    (0..MonthGrid::MONTHS)
        .map(|k| {
            let rs = stream.slice(&grid.month(k));
            if rs.len() < MIN_READINGS_PER_MONTH {
                None
            } else {
                std_m3(rs.iter().map(|r| r.value.litres()))
            }
        })
        .collect()
}

/// Population standard deviation of the valid monthly values.
pub fn std2m(key: &CompositeKey, monthly: &[Option<f64>]) -> Result<f64, DetectError> {
    let valid: Vec<f64> = monthly.iter().flatten().copied().collect();
    if valid.len() < MIN_VALID_MONTHS {
        return Err(DetectError::NotScorable { key: key.clone(), valid: valid.len() });
    }
    let n = valid.len() as f64;
    let mean = valid.iter().sum::<f64>() / n;
    let var = valid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdProfile {
    pub key: CompositeKey,
    pub month_boundaries: Vec<HourStamp>,
    pub monthly_std: Vec<Option<f64>>,
    pub std2m: Option<f64>,
}

pub fn std_profile(stream: &DataStream, grid: &MonthGrid) -> StdProfile {
    let monthly = monthly_std(stream, grid);
    StdProfile {
        key: stream.key.clone(),
        month_boundaries: grid.boundaries.clone(),
        std2m: std2m(&stream.key, &monthly).ok(),
        monthly_std: monthly,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MuiBand {
    pub clean_below: f64,
    pub dirty_above: f64,
}

impl Default for MuiBand {
    fn default() -> Self {
        MuiBand { clean_below: 40.0, dirty_above: 250.0 }
    }
}

impl MuiBand {
    pub fn is_valid(&self) -> bool {
        0.0 < self.clean_below && self.clean_below < self.dirty_above
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuiVerdict {
    Clean,
    NeedsReview,
    Dirty,
}

pub fn classify_mui(std2m: f64, band: &MuiBand) -> MuiVerdict {
    if std2m < band.clean_below {
        MuiVerdict::Clean
    } else if std2m > band.dirty_above {
        MuiVerdict::Dirty
    } else {
        MuiVerdict::NeedsReview
    }
}

/// Score given to MUI events whose stream could not be scored.
pub const UNSCORABLE: f64 = -1.0;

/// MUI screening result for one stream; `None` when the stream is clean.
pub fn screen_mui(stream: &DataStream, grid: &MonthGrid, band: &MuiBand) -> Option<AnomalyEvent> {
    let span = Span { first: grid.boundaries[0], last: grid.boundaries[MonthGrid::MONTHS] - 1 };
    match std2m(&stream.key, &monthly_std(stream, grid)) {
        Ok(v) if classify_mui(v, band) == MuiVerdict::Clean => None,
        Ok(v) => Some(AnomalyEvent::new(stream.key.clone(), ErrorClass::Mui, span, v)),
        // not enough data to score: a human has to look
        Err(_) => Some(AnomalyEvent::new(stream.key.clone(), ErrorClass::Mui, span, UNSCORABLE)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpikeParams {
    pub theta: f64,
    pub neighborhood_hours: i64,
    pub min_excess_m3: f64,
    pub max_span_hours: i64,
}

impl Default for SpikeParams {
    fn default() -> Self {
        SpikeParams { theta: 10.0, neighborhood_hours: 8, min_excess_m3: 1.0, max_span_hours: 3 }
    }
}

fn flag_pass(rs: &[Reading], flagged: &[bool], p: &SpikeParams) -> Vec<bool> {
    let (sum, n) = rs
        .iter()
        .zip(flagged)
        .filter(|(_, f)| !**f)
        .fold((0i64, 0i64), |(s, n), (r, _)| (s + r.value.litres(), n + 1));
    let annual = if n == 0 { 0.0 } else { sum as f64 / n as f64 };
    let min_excess = p.min_excess_m3 * LITRES_PER_M3 as f64;
    let mut out = flagged.to_vec();
    let mut lo = 0;
    for (i, r) in rs.iter().enumerate() {
        if flagged[i] {
            continue;
        }
        while rs[lo].at < r.at - p.neighborhood_hours {
            lo += 1;
        }
        let (mut s, mut c) = (0i64, 0i64);
        for (j, q) in rs.iter().enumerate().skip(lo) {
            if q.at > r.at + p.neighborhood_hours {
                break;
            }
            if j != i && !flagged[j] {
                s += q.value.litres();
                c += 1;
            }
        }
        let local = if c == 0 { 0.0 } else { s as f64 / c as f64 };
        let v = r.value.litres() as f64;
        if v > p.theta * local.max(annual) && v - annual >= min_excess {
            out[i] = true;
        }
    }
    out
}

/// Short high-amplitude excursions.
///
/// Flags are refined until stable: once a reading is flagged it no longer
/// counts towards its neighbors' baseline, so adjacent spikes do not hide
/// each other. Runs longer than `max_span_hours` are not reported.
pub fn detect_spikes(stream: &DataStream, p: &SpikeParams) -> Vec<AnomalyEvent> {
    let rs = stream.readings();
    let mut flagged = vec![false; rs.len()];
    loop {
        let next = flag_pass(rs, &flagged, p);
        if next == flagged {
            break;
        }
        flagged = next;
    }
    let mut events = Vec::new();
    let mut i = 0;
    while i < rs.len() {
        if !flagged[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < rs.len() && flagged[j + 1] && rs[j + 1].at == rs[j].at + 1 {
            j += 1;
        }
        let span = Span { first: rs[i].at, last: rs[j].at };
        if span.hours() <= p.max_span_hours {
            let peak = rs[i..=j].iter().map(|r| r.value).max().expect("non-empty run");
            events.push(
                AnomalyEvent::new(stream.key.clone(), ErrorClass::Spike, span, peak.m3())
                    .with_repair(RepairAction::ReplaceWithNeighborhoodMean),
            );
        }
        i = j + 1;
    }
    events
}

/// Every negative reading is a counter reset.
pub fn detect_resets(stream: &DataStream) -> Vec<AnomalyEvent> {
    stream
        .readings()
        .iter()
        .filter(|r| r.value.is_negative())
        .map(|r| {
            AnomalyEvent::new(stream.key.clone(), ErrorClass::Reset, Span::single(r.at), r.value.m3())
                .with_repair(RepairAction::ReplaceWithNeighborhoodMean)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantParams {
    pub min_step_litres: i64,
    pub min_fraction: f64,
    pub min_nonzero: usize,
    /// Values whose gcd estimates the step.
    pub top_values: usize,
    /// Evaluate consecutive windows of this length instead of the whole stream.
    pub window_hours: Option<i64>,
}

impl Default for QuantParams {
    fn default() -> Self {
        QuantParams { min_step_litres: 5000, min_fraction: 0.9, min_nonzero: 720, top_values: 8, window_hours: None }
    }
}

fn gcd(mut a: i64, mut b: i64) -> i64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs()
}

/// Step estimate: gcd of the most frequent nonzero magnitudes.
///
/// Taking every value would let a single fine-grained reading collapse the
/// step to 1 L, so only the dominant values vote.
pub fn quantization_step(values: &[i64], top: usize) -> i64 {
    let mut freq: HashMap<i64, usize> = HashMap::new();
    for v in values.iter().filter(|v| **v != 0) {
        *freq.entry(v.abs()).or_default() += 1;
    }
    let mut by_freq: Vec<(usize, i64)> = freq.into_iter().map(|(v, c)| (c, v)).collect();
    by_freq.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    by_freq.iter().take(top.max(1)).fold(0, |g, (_, v)| gcd(g, *v))
}

/// `(step, fraction of nonzero readings that are multiples of it)`, or `None` with too few nonzero readings.
pub fn quantization_stats(values: &[i64], p: &QuantParams, min_nonzero: usize) -> Option<(i64, f64)> {
    let nonzero: Vec<i64> = values.iter().copied().filter(|v| *v != 0).collect();
    if nonzero.len() < min_nonzero.max(1) {
        return None;
    }
    let g = quantization_step(&nonzero, p.top_values);
    let multiples = nonzero.iter().filter(|v| *v % g == 0).count();
    Some((g, multiples as f64 / nonzero.len() as f64))
}

fn is_quantized(stats: Option<(i64, f64)>, p: &QuantParams) -> bool {
    matches!(stats, Some((g, frac)) if g >= p.min_step_litres && frac >= p.min_fraction)
}

/// Streams recorded in coarse fixed steps.
pub fn detect_quantized(stream: &DataStream, p: &QuantParams) -> Vec<AnomalyEvent> {
    let Some(range) = stream.observed_range() else { return Vec::new() };
    let make = |span: Span, g: i64| {
        AnomalyEvent::new(stream.key.clone(), ErrorClass::Quantized, span, g as f64 / LITRES_PER_M3 as f64)
            .with_repair(RepairAction::None)
    };
    match p.window_hours {
        None => {
            let values: Vec<i64> = stream.readings().iter().map(|r| r.value.litres()).collect();
            let stats = quantization_stats(&values, p, p.min_nonzero);
            if is_quantized(stats, p) {
                vec![make(Span { first: range.start, last: range.end - 1 }, stats.expect("checked").0)]
            } else {
                Vec::new()
            }
        }
        Some(w) => {
            let w = w.max(1);
            let min_nonzero = p.min_nonzero.min((w / 4) as usize);
            let mut events: Vec<AnomalyEvent> = Vec::new();
            let mut start = range.start;
            while start < range.end {
                let window = crate::model::HourRange::with_len(start, w);
                let values: Vec<i64> = stream.slice(&window).iter().map(|r| r.value.litres()).collect();
                let stats = quantization_stats(&values, p, min_nonzero);
                if is_quantized(stats, p) {
                    let g = stats.expect("checked").0;
                    let last = window.end.min(range.end) - 1;
                    match events.last_mut() {
                        Some(e) if e.span.last + 1 == start && e.score * LITRES_PER_M3 as f64 == g as f64 => {
                            e.span.last = last
                        }
                        _ => events.push(make(Span { first: start, last }, g)),
                    }
                }
                start = window.end;
            }
            events
        }
    }
}

/// Keys of streams flagged by any event of `class`.
pub fn keys_with(events: &[AnomalyEvent], class: ErrorClass) -> BTreeSet<CompositeKey> {
    events.iter().filter(|e| e.class == class).map(|e| e.key.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Consumption, HourRange};
    use proptest::prelude::*;

    fn key() -> CompositeKey {
        CompositeKey::new("a", "m", "d").unwrap()
    }

    fn grid() -> MonthGrid {
        MonthGrid::starting(2013, 1)
    }

    fn stream_from(f: impl Fn(i64, HourStamp) -> i64) -> DataStream {
        let g = grid();
        let rs = g.range().iter().enumerate().map(|(i, t)| Reading::new(t, Consumption::from_litres(f(i as i64, t))));
        DataStream::new(key(), rs.collect())
    }

    fn naive_std(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn constant_and_alternating_months() {
        let s = stream_from(|_, _| 700);
        assert!(monthly_std(&s, &grid()).iter().all(|v| *v == Some(0.0)));
        assert_eq!(std2m(&key(), &monthly_std(&s, &grid())), Ok(0.0));
        let s = stream_from(|i, _| if i % 2 == 0 { 0 } else { 2000 });
        assert!(monthly_std(&s, &grid()).iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn std2m_two_levels_and_insufficient() {
        let m: Vec<_> = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0].map(Some).to_vec();
        assert_eq!(std2m(&key(), &m), Ok(1.0));
        let sparse: Vec<_> = (0..12).map(|i| if i < 5 { Some(1.0) } else { None }).collect();
        assert_eq!(std2m(&key(), &sparse), Err(DetectError::NotScorable { key: key(), valid: 5 }));
    }

    #[test]
    fn short_month_is_excluded() {
        let g = grid();
        let s = stream_from(|i, _| i % 7 * 100);
        let mut rs: Vec<_> = s.readings().to_vec();
        let feb = g.month(1);
        rs.retain(|r| !feb.contains(r.at) || r.at < feb.start + 23);
        let m = monthly_std(&DataStream::new(key(), rs), &g);
        assert_eq!(m[1], None);
        assert_eq!(m.iter().flatten().count(), 11);
    }

    #[test]
    fn classify_band_edges() {
        let b = MuiBand::default();
        assert_eq!(classify_mui(0.0, &b), MuiVerdict::Clean);
        assert_eq!(classify_mui(40.0, &b), MuiVerdict::NeedsReview);
        assert_eq!(classify_mui(100.0, &b), MuiVerdict::NeedsReview);
        assert_eq!(classify_mui(250.0, &b), MuiVerdict::NeedsReview);
        assert_eq!(classify_mui(300.0, &b), MuiVerdict::Dirty);
    }

    #[test]
    fn spike_rules() {
        let p = SpikeParams::default();
        let s = stream_from(|i, _| if i == 500 { 50_000 } else { 100 });
        let ev = detect_spikes(&s, &p);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].span, Span::single(s.readings()[500].at));
        assert_eq!(ev[0].score, 50.0);
        let s = stream_from(|i, _| if i == 500 { 150 } else { 100 });
        assert!(detect_spikes(&s, &p).is_empty());
        // adjacent pair: each hides the other without refinement
        let s = stream_from(|i, _| if i == 500 || i == 501 { 20_000 } else { 100 });
        let ev = detect_spikes(&s, &p);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].span.hours(), 2);
        // four hours is no longer short
        let s = stream_from(|i, _| if (500..504).contains(&i) { 20_000 } else { 100 });
        assert!(detect_spikes(&s, &p).is_empty());
    }

    #[test]
    fn resets_on_negative_readings() {
        let s = stream_from(|i, _| if i == 10 { -980_000 } else { 200 });
        let ev = detect_resets(&s);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].score, -980.0);
        assert!(detect_resets(&stream_from(|_, _| 1)).is_empty());
    }

    #[test]
    fn quantized_steps() {
        let p = QuantParams::default();
        let s = stream_from(|i, _| [0, 5000, 10_000, 5000, 15_000][(i % 5) as usize]);
        let ev = detect_quantized(&s, &p);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].score, 5.0);
        let fine = stream_from(|i, _| 1000 + (i * 7919) % 977);
        assert!(detect_quantized(&fine, &p).is_empty());
        // mixed eras: only the windowed variant sees the coarse half
        let half = 4380;
        let mixed = stream_from(|i, _| if i < half { [5000, 10_000][(i % 2) as usize] } else { 1000 + (i * 7919) % 977 });
        assert!(detect_quantized(&mixed, &p).is_empty());
        let w = detect_quantized(&mixed, &QuantParams { window_hours: Some(720), ..p });
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].span.first, mixed.readings()[0].at);
        let coarse_end = mixed.readings()[half as usize].at;
        assert!(w[0].span.last < coarse_end && w[0].span.last >= coarse_end - 720);
    }

    #[test]
    fn step_oracle() {
        let vals = [5000, 10_000, 15_000, 5000, 10_000, 15_000, 20_000, 7];
        // the lone 7 is too rare to vote among the top three
        assert_eq!(quantization_step(&vals, 3), 5000);
        assert_eq!(quantization_step(&vals, 8), 1);
    }

    proptest! {
        #[test]
        fn monthly_std_matches_two_pass(xs in proptest::collection::vec(-5_000_000i64..5_000_000, 24..400)) {
            let exact = std_m3(xs.iter().copied()).unwrap();
            let naive = naive_std(&xs.iter().map(|x| *x as f64 / 1000.0).collect::<Vec<_>>());
            prop_assert!((exact - naive).abs() <= 1e-9 * naive.max(1e-12) + 1e-12);
        }

        #[test]
        fn scale_equivariance_powers_of_two(seed in 0u64..1000, k in 0u32..8) {
            let c = 1i64 << k;
            let s = stream_from(|i, _| ((i as u64 * 2654435761 + seed) % 10_007) as i64);
            let sc = stream_from(|i, _| c * ((i as u64 * 2654435761 + seed) % 10_007) as i64);
            let (a, b) = (monthly_std(&s, &grid()), monthly_std(&sc, &grid()));
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.unwrap() * c as f64, y.unwrap());
            }
            prop_assert_eq!(std2m(&key(), &a).unwrap() * c as f64, std2m(&key(), &b).unwrap());
        }

        #[test]
        fn scale_equivariance_general(seed in 0u64..1000, c in 1i64..300) {
            let s = stream_from(|i, _| ((i as u64 * 40503 + seed) % 3001) as i64);
            let sc = stream_from(|i, _| c * ((i as u64 * 40503 + seed) % 3001) as i64);
            let a = std2m(&key(), &monthly_std(&s, &grid())).unwrap();
            let b = std2m(&key(), &monthly_std(&sc, &grid())).unwrap();
            prop_assert!((a * c as f64 - b).abs() <= 1e-9 * b.max(1e-9));
        }

        #[test]
        fn classify_is_monotone(a in 0.0f64..1000.0, b in 0.0f64..1000.0) {
            let band = MuiBand::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify_mui(lo, &band) <= classify_mui(hi, &band));
        }

        #[test]
        fn constant_streams_have_no_spikes(v in 0i64..10_000_000, len in 1usize..300) {
            let start = grid().range().start;
            let rs = (0..len as i64).map(|i| Reading::new(start + i, Consumption::from_litres(v))).collect();
            prop_assert!(detect_spikes(&DataStream::new(key(), rs), &SpikeParams::default()).is_empty());
        }
    }

    #[test]
    fn screen_routes_unscorable_to_review() {
        let g = grid();
        let rs = HourRange::with_len(g.range().start, 24 * 40).iter().map(|t| Reading::new(t, Consumption::from_litres(1)));
        let ev = screen_mui(&DataStream::new(key(), rs.collect()), &g, &MuiBand::default()).unwrap();
        assert_eq!(ev.score, UNSCORABLE);
        assert!(screen_mui(&stream_from(|_, _| 5), &g, &MuiBand::default()).is_none());
    }
}
