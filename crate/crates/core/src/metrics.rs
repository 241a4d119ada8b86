//! Ranking distortion: weighted Kendall's tau and recall@k.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity::Calendar;
use crate::model::{CompositeKey, Consumption, DataStream, HourRange, MonthGrid, Ranking};
use crate::peaks::{self, PeakError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("total pair weight is zero; the correlation is undefined")]
    Undefined,
    #[error("k = {k} outside 1..={len}")]
    InvalidK { k: usize, len: usize },
    #[error(transparent)]
    Peak(#[from] PeakError),
}

/// Non-negative per-key weights in litres; unknown keys weigh nothing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub BTreeMap<CompositeKey, Consumption>);

impl WeightVector {
    pub fn get(&self, key: &CompositeKey) -> i64 {
        self.0.get(key).map_or(0, |c| c.litres().max(0))
    }

    pub fn uniform<'a>(keys: impl IntoIterator<Item = &'a CompositeKey>) -> Self {
        WeightVector(keys.into_iter().map(|k| (k.clone(), Consumption::from_litres(1))).collect())
    }

    /// Each stream's consumption during `month`, clamped at zero.
    pub fn from_streams(streams: &[DataStream], month: &HourRange) -> Self {
        WeightVector(
            streams.iter().map(|s| (s.key.clone(), Consumption::from_litres(s.sum_in(month).litres().max(0)))).collect(),
        )
    }

    /// Weights from the calendar month holding the start of `peak`.
    pub fn peak_month(streams: &[DataStream], grid: &MonthGrid, peak: &HourRange) -> Self {
        let month = grid.month_of(peak.start).map(|k| grid.month(k)).unwrap_or(*peak);
        WeightVector::from_streams(streams, &month)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    /// Weighted discordance K_w.
    pub k_w_raw: f64,
    /// 1 − 2·K_w / total pair weight, in [−1, 1].
    pub k_w_normalized: f64,
}

/// Pair-enumeration kernel is used up to this many keys.
pub const PAIR_KERNEL_MAX: usize = 2000;

/// Both rankings over the same universe: `(weights in reference order, candidate position of each)`.
fn align(reference: &Ranking, candidate: &Ranking, weights: &WeightVector) -> (Vec<i64>, Vec<usize>) {
    let mut pi: HashMap<&CompositeKey, usize> = candidate.keys().enumerate().map(|(i, k)| (k, i)).collect();
    let in_ref: HashSet<&CompositeKey> = reference.keys().collect();

    let extra_cand: BTreeSet<&CompositeKey> = reference.keys().filter(|k| !pi.contains_key(k)).collect();
    let extra_ref: BTreeSet<&CompositeKey> = candidate.keys().filter(|k| !in_ref.contains(k)).collect();
    let base = candidate.len();
    pi.extend(extra_cand.into_iter().enumerate().map(|(i, k)| (k, base + i)));

    let sigma = reference.keys().chain(extra_ref);
    sigma.map(|k| (weights.get(k), pi[k])).unzip()
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// From X = Σ_discordant (w_a + w_b) and the weights, build the result.
fn finish(x: i128, w: &[i64]) -> Result<CorrelationResult, MetricError> {
    let n = w.len() as i128;
    let total: i128 = w.iter().map(|v| *v as i128).sum();
    let y = (n - 1).max(0) * total;
    if y == 0 {
        return Err(MetricError::Undefined);
    }
    let num = y - 2 * x;
    let g = gcd(num.unsigned_abs(), y as u128).max(1) as i128;
    Ok(CorrelationResult { k_w_raw: x as f64 / 2.0, k_w_normalized: (num / g) as f64 / (y / g) as f64 })
}

/// Σ over discordant pairs of (w_a + w_b) by enumerating every pair.
pub fn discordance_pairs(w: &[i64], pos: &[usize]) -> i128 {
    let total: i128 = w.iter().map(|v| *v as i128).sum();
    let narrow = total < i64::MAX as i128;
    (0..w.len())
        .into_par_iter()
        .map(|i| {
            let p = pos[i];
            let rest = (i + 1..w.len()).map(|j| (pos[j] < p, w[j]));
            // row sums fit in i64 whenever the grand total does
            let (count, sum) = if narrow {
                let (c, s) = rest.fold((0i64, 0i64), |(c, s), (d, v)| (c + d as i64, s + if d { v } else { 0 }));
                (c as i128, s as i128)
            } else {
                rest.fold((0i128, 0i128), |(c, s), (d, v)| (c + d as i128, s + if d { v as i128 } else { 0 }))
            };
            count * w[i] as i128 + sum
        })
        .sum()
}

/// Same quantity by merge sort over candidate positions.
pub fn discordance_merge(w: &[i64], pos: &[usize]) -> i128 {
    let mut items: Vec<(usize, i64)> = pos.iter().copied().zip(w.iter().copied()).collect();
    let mut buf = items.clone();
    merge_count(&mut items, &mut buf)
}

fn merge_count(a: &mut [(usize, i64)], buf: &mut [(usize, i64)]) -> i128 {
    let n = a.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut x = merge_count(&mut a[..mid], &mut buf[..mid]) + merge_count(&mut a[mid..], &mut buf[mid..]);
    // weight still waiting in the left half
    let mut left_weight: i128 = a[..mid].iter().map(|e| e.1 as i128).sum();
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if a[i].0 <= a[j].0 {
            left_weight -= a[i].1 as i128;
            buf[k] = a[i];
            i += 1;
        } else {
            let waiting = (mid - i) as i128;
            x += waiting * a[j].1 as i128 + left_weight;
            buf[k] = a[j];
            j += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&a[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&a[j..n]);
    a.copy_from_slice(&buf[..n]);
    x
}

/// Weighted Kendall's tau of `candidate` against `reference`.
///
/// Keys missing from either ranking are appended to it in key order. The
/// computation is exact in integer litres; the normalized value is formed
/// from the reduced fraction so identity gives exactly 1 and reversal −1.
pub fn weighted_kendall_tau(
    reference: &Ranking,
    candidate: &Ranking,
    weights: &WeightVector,
) -> Result<CorrelationResult, MetricError> {
    let (w, pos) = align(reference, candidate, weights);
    let x = if w.len() <= PAIR_KERNEL_MAX { discordance_pairs(&w, &pos) } else { discordance_merge(&w, &pos) };
    finish(x, &w)
}

/// Both kernels, for cross-checking.
pub fn weighted_kendall_tau_with(
    reference: &Ranking,
    candidate: &Ranking,
    weights: &WeightVector,
    merge: bool,
) -> Result<CorrelationResult, MetricError> {
    let (w, pos) = align(reference, candidate, weights);
    let x = if merge { discordance_merge(&w, &pos) } else { discordance_pairs(&w, &pos) };
    finish(x, &w)
}

/// Share of the reference top-k found in the candidate top-k.
pub fn recall_at_k(reference: &Ranking, candidate: &Ranking, k: usize) -> Result<f64, MetricError> {
    if k == 0 || k > reference.len() {
        return Err(MetricError::InvalidK { k, len: reference.len() });
    }
    let top: HashSet<&CompositeKey> = reference.keys().take(k).collect();
    let hits = candidate.keys().take(k).filter(|key| top.contains(key)).count();
    Ok(hits as f64 / k as f64)
}

/// `recall_at_k` for every k in `1..=k_max`.
pub fn recall_profile(reference: &Ranking, candidate: &Ranking, k_max: usize) -> Result<Vec<(usize, f64)>, MetricError> {
    if k_max == 0 || k_max > reference.len() {
        return Err(MetricError::InvalidK { k: k_max, len: reference.len() });
    }
    let mut seen_ref: HashSet<&CompositeKey> = HashSet::new();
    let mut seen_cand: HashSet<&CompositeKey> = HashSet::new();
    let mut common = 0usize;
    let mut out = Vec::with_capacity(k_max);
    let mut cand = candidate.keys();
    for (i, r) in reference.keys().take(k_max).enumerate() {
        seen_ref.insert(r);
        if seen_cand.contains(r) {
            common += 1;
        }
        if let Some(c) = cand.next() {
            seen_cand.insert(c);
            if seen_ref.contains(c) {
                common += 1;
            }
        }
        out.push((i + 1, common as f64 / (i + 1) as f64));
    }
    Ok(out)
}

/// Full ranking in each dataset's own peak window of `days` days.
pub fn peak_ranking(
    streams: &[DataStream],
    range: &HourRange,
    window_hours: i64,
    compensation: Option<&Calendar>,
) -> Result<Ranking, MetricError> {
    let p = peaks::peak_window(streams, range, window_hours, compensation)?;
    Ok(peaks::top_k_contributors(streams, &p.window, streams.len().max(1), compensation)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WktPoint {
    pub days: i64,
    pub k_w: Option<f64>,
}

/// Correlation between clean and candidate peak rankings for window lengths of `days` days.
pub fn wkt_profile(
    clean: &[DataStream],
    candidate: &[DataStream],
    weights: &WeightVector,
    range: &HourRange,
    days: impl IntoIterator<Item = i64>,
) -> Result<Vec<WktPoint>, MetricError> {
    let mut out = Vec::new();
    for d in days {
        let w = 24 * d;
        if w > range.len() {
            break;
        }
        let reference = peak_ranking(clean, range, w, None)?;
        let cand = peak_ranking(candidate, range, w, None)?;
        let k_w = weighted_kendall_tau(&reference, &cand, weights).ok().map(|r| r.k_w_normalized);
        out.push(WktPoint { days: d, k_w });
    }
    Ok(out)
}
