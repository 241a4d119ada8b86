//! Seeded synthetic corpora with planted errors and their ground truth.
//!
//! Every stream draws its clean series from its own ChaCha stream, so the
//! clean data depend only on the seed, the stream count and the calendar.
//! Corruption choices come from separate streams; turning one error class
//! off leaves the others where they were.

mod shape;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingestion::{write_amid_streams, write_bild, write_mind, JoinTier};
use crate::model::{
    BillingRecord, CompositeKey, ConsumerCategory, Consumption, DataStream, HourStamp, MainCategory, MeterInfo, Reading,
    Span,
};
use crate::repair::Side;

pub use shape::{level_range, CATEGORY_SHARES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuiPlan {
    pub rate: f64,
    pub factor: f64,
    /// Only commercial, industrial and institutional meters at least this large (m³/h).
    pub min_level_m3: f64,
    /// Changepoint months, inclusive, 1-based.
    pub first_month: u32,
    pub last_month: u32,
}

impl Default for MuiPlan {
    fn default() -> Self {
        MuiPlan { rate: 0.05, factor: 219.969, min_level_m3: 12.0, first_month: 3, last_month: 9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikePlan {
    /// Streams with one isolated spike each.
    pub isolated: usize,
    pub min_factor: f64,
    pub max_factor: f64,
    pub max_hours: i64,
    /// Hours at which many meters spike together.
    pub bursts: usize,
    pub burst_meters: usize,
    pub burst_min_m3: f64,
    pub burst_max_m3: f64,
    /// Harmless bumps of 2 to 6 times the local level.
    pub decoys: usize,
}

impl Default for SpikePlan {
    fn default() -> Self {
        SpikePlan {
            isolated: 200,
            min_factor: 20.0,
            max_factor: 200.0,
            max_hours: 2,
            bursts: 2,
            burst_meters: 60,
            burst_min_m3: 500.0,
            burst_max_m3: 20_000.0,
            decoys: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResetPlan {
    pub count: usize,
    pub min_m3: f64,
    pub max_m3: f64,
}

impl Default for ResetPlan {
    fn default() -> Self {
        ResetPlan { count: 50, min_m3: 100.0, max_m3: 2000.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantPlan {
    pub rate: f64,
    pub step_litres: i64,
    pub min_level_m3: f64,
}

impl Default for QuantPlan {
    fn default() -> Self {
        QuantPlan { rate: 0.02, step_litres: 5000, min_level_m3: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapPlan {
    pub stream_fraction: f64,
    pub max_runs: usize,
    pub max_hours: i64,
    /// Consecutive days missing from every stream.
    pub outage_days: i64,
}

impl Default for GapPlan {
    fn default() -> Self {
        GapPlan { stream_fraction: 0.3, max_runs: 3, max_hours: 24, outage_days: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuplicatePlan {
    pub stream_fraction: f64,
    pub equal_records: usize,
    pub conflicting_records: usize,
}

impl Default for DuplicatePlan {
    fn default() -> Self {
        DuplicatePlan { stream_fraction: 0.055, equal_records: 200, conflicting_records: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyPlan {
    /// AMID meter id carries an extra trailing character.
    pub partial_fraction: f64,
    /// AMID meter id carries an extra leading tag.
    pub manual_fraction: f64,
    /// Extra AMID streams resembling no identity.
    pub orphans: usize,
    /// Extra AMID streams whose key prefixes several identities.
    pub ambiguous: usize,
}

impl Default for KeyPlan {
    fn default() -> Self {
        KeyPlan { partial_fraction: 0.02, manual_fraction: 0.01, orphans: 10, ambiguous: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPlan {
    pub seed: u64,
    pub stream_count: usize,
    pub start: NaiveDate,
    pub days: i64,
    pub billing_period_days: i64,
    pub mui: MuiPlan,
    pub spikes: SpikePlan,
    pub resets: ResetPlan,
    pub quantized: QuantPlan,
    pub gaps: GapPlan,
    pub duplicates: DuplicatePlan,
    pub keys: KeyPlan,
}

impl Default for SyntheticPlan {
    fn default() -> Self {
        SyntheticPlan {
            seed: 42,
            stream_count: 1000,
            start: NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date"),
            days: 365,
            billing_period_days: 61,
            mui: MuiPlan::default(),
            spikes: SpikePlan::default(),
            resets: ResetPlan::default(),
            quantized: QuantPlan::default(),
            gaps: GapPlan::default(),
            duplicates: DuplicatePlan::default(),
            keys: KeyPlan::default(),
        }
    }
}

/// Error classes that can be switched on one at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Spikes,
    Mui,
    Resets,
}

impl SyntheticPlan {
    /// Same calendar and streams, nothing planted.
    pub fn clean(seed: u64, stream_count: usize) -> Self {
        SyntheticPlan { seed, stream_count, ..SyntheticPlan::default() }.without_errors()
    }

    pub fn without_errors(mut self) -> Self {
        self.mui.rate = 0.0;
        self.spikes.isolated = 0;
        self.spikes.bursts = 0;
        self.spikes.decoys = 0;
        self.resets.count = 0;
        self.quantized.rate = 0.0;
        self.gaps.stream_fraction = 0.0;
        self.gaps.outage_days = 0;
        self.duplicates = DuplicatePlan { stream_fraction: 0.0, equal_records: 0, conflicting_records: 0 };
        self.keys = KeyPlan { partial_fraction: 0.0, manual_fraction: 0.0, orphans: 0, ambiguous: 0 };
        self
    }

    /// Only one error class, at its configured strength.
    pub fn only(&self, class: Corruption) -> Self {
        let mut p = self.clone().without_errors();
        p.gaps.outage_days = self.gaps.outage_days;
        match class {
            Corruption::Spikes => {
                p.spikes = SpikePlan { decoys: 0, ..self.spikes.clone() };
            }
            Corruption::Mui => p.mui = self.mui.clone(),
            Corruption::Resets => p.resets = self.resets.clone(),
        }
        p
    }

    pub fn hours(&self) -> i64 {
        self.days * 24
    }

    pub fn first_stamp(&self) -> HourStamp {
        HourStamp::first_of_day(self.start)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedMui {
    pub key: CompositeKey,
    pub changepoint: HourStamp,
    /// Factor the scaled side was multiplied by.
    pub factor: f64,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpike {
    pub key: CompositeKey,
    pub span: Span,
    pub amplitude_m3: f64,
    pub burst: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPoint {
    pub key: CompositeKey,
    pub at: HourStamp,
    pub value: Consumption,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedQuantized {
    pub key: CompositeKey,
    pub step_litres: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedDuplicateStream {
    pub copy: CompositeKey,
    pub original: CompositeKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecord {
    pub key: CompositeKey,
    pub at: HourStamp,
    pub conflicting: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedKeyNoise {
    pub amid: CompositeKey,
    pub canonical: CompositeKey,
    /// Loosest tier at which the key is expected to join.
    pub tier: JoinTier,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub canonical: Vec<CompositeKey>,
    /// AMID key of every joinable stream to its identity.
    pub amid_to_canonical: BTreeMap<CompositeKey, CompositeKey>,
    pub key_noise: Vec<PlantedKeyNoise>,
    pub unjoinable: Vec<CompositeKey>,
    pub mui: Vec<PlantedMui>,
    pub spikes: Vec<PlantedSpike>,
    pub decoys: Vec<PlantedPoint>,
    pub resets: Vec<PlantedPoint>,
    pub quantized: Vec<PlantedQuantized>,
    pub duplicate_streams: Vec<PlantedDuplicateStream>,
    pub duplicate_records: Vec<PlantedRecord>,
    pub gaps: Vec<(CompositeKey, Span)>,
    pub outage_days: Vec<NaiveDate>,
}

impl GroundTruth {
    pub fn mui_keys(&self) -> BTreeSet<CompositeKey> {
        self.mui.iter().map(|m| m.key.clone()).collect()
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let f = File::open(path)?;
        serde_json::from_reader(io::BufReader::new(f)).map_err(io::Error::other)
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub plan: SyntheticPlan,
    /// Dirty streams under their AMID keys, duplicate records included.
    pub amid: Vec<DataStream>,
    pub mind: Vec<MeterInfo>,
    pub bild: Vec<BillingRecord>,
    /// Uncorrupted streams under their identity keys.
    pub clean: Vec<DataStream>,
    pub truth: GroundTruth,
}

pub const AMID_FILE: &str = "amid.csv";
pub const MIND_FILE: &str = "mind.csv";
pub const BILD_FILE: &str = "bild.csv";
pub const CLEAN_FILE: &str = "clean.csv";
pub const TRUTH_FILE: &str = "truth.json";

impl Corpus {
    /// Writes the three input tables, the clean reference and the ground truth.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        write_amid_streams(File::create(dir.join(AMID_FILE))?, &self.amid)?;
        write_mind(BufWriter::new(File::create(dir.join(MIND_FILE))?), &self.mind)?;
        write_bild(BufWriter::new(File::create(dir.join(BILD_FILE))?), &self.bild)?;
        write_amid_streams(File::create(dir.join(CLEAN_FILE))?, &self.clean)?;
        let mut w = BufWriter::new(File::create(dir.join(TRUTH_FILE))?);
        serde_json::to_writer_pretty(&mut w, &self.truth).map_err(io::Error::other)?;
        io::Write::flush(&mut w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Role {
    Plain,
    Mui,
    Quantized,
    Reset,
    Spike,
    Burst(usize),
    Decoy,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const CLEAN_STREAM: u64 = 1 << 20;
const DIRTY_STREAM: u64 = 1 << 40;
const EXTRA_STREAM: u64 = 1 << 50;

fn canonical_key(i: usize) -> CompositeKey {
    CompositeKey::new(&format!("acc-{i:05}"), &format!("mtr-{i:05}"), "dev-1").expect("valid key")
}

struct Base {
    category: MainCategory,
    level: f64,
    info: MeterInfo,
    /// Clean litres per grid hour; `None` on outage days.
    values: Vec<Option<i64>>,
}

fn base_stream(plan: &SyntheticPlan, i: usize, stamps: &[HourStamp], outage: &BTreeSet<NaiveDate>) -> Base {
    let mut rng = rng_for(plan.seed, CLEAN_STREAM + i as u64);
    let category = shape::pick_category(&mut rng);
    let (lo, hi) = level_range(category);
    let level = rng.random_range(lo..hi);
    let raw = shape::series(&mut rng, category, level, stamps);
    let values = stamps.iter().zip(raw).map(|(t, v)| (!outage.contains(&t.day())).then_some(v)).collect();
    let sub: u32 = rng.random_range(1..5);
    let info = MeterInfo {
        key: canonical_key(i),
        unit: "m3".into(),
        category: ConsumerCategory { main: category, sub_code: format!("{}-{sub:02}", category.code()) },
        latitude: Some(49.0 + rng.random_range(0.0..0.12)),
        longitude: Some(-122.4 + rng.random_range(0.0..0.25)),
        postal_code: format!("V2S {}A{}", rng.random_range(1..10), rng.random_range(1..10)),
    };
    Base { category, level, info, values }
}

fn mean(values: &[Option<i64>]) -> f64 {
    let (s, n) = values.iter().flatten().fold((0i64, 0i64), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s as f64 / n as f64
    }
}

fn local_mean(values: &[Option<i64>], first: usize, last: usize) -> f64 {
    let lo = first.saturating_sub(8);
    let hi = (last + 8).min(values.len() - 1);
    let around: Vec<Option<i64>> = (lo..=hi).filter(|h| *h < first || *h > last).map(|h| values[h]).collect();
    mean(&around)
}

/// Index whose ±9 h neighborhood is fully present and unreserved.
fn free_hour(rng: &mut ChaCha8Rng, values: &[Option<i64>], reserved: &BTreeSet<usize>) -> Option<usize> {
    let n = values.len();
    if n < 40 {
        return None;
    }
    for _ in 0..200 {
        let h = rng.random_range(20..n - 20);
        let clear = (h - 9..=h + 9).all(|j| values[j].is_some() && !reserved.contains(&j));
        if clear {
            return Some(h);
        }
    }
    None
}

struct Dirty {
    readings: Vec<Reading>,
    mui: Option<PlantedMui>,
    spikes: Vec<PlantedSpike>,
    decoys: Vec<PlantedPoint>,
    resets: Vec<PlantedPoint>,
    quantized: Option<PlantedQuantized>,
    records: Vec<PlantedRecord>,
    gaps: Vec<Span>,
}

struct StreamPlan {
    role: Role,
    gapped: bool,
    equal_records: usize,
    conflicting_records: usize,
}

fn corrupt(plan: &SyntheticPlan, i: usize, base: &Base, sp: &StreamPlan, stamps: &[HourStamp], bursts: &[usize]) -> Dirty {
    let mut rng = rng_for(plan.seed, DIRTY_STREAM + i as u64);
    let key = base.info.key.clone();
    let clean = &base.values;
    let mut v = clean.clone();
    let mut reserved: BTreeSet<usize> = BTreeSet::new();
    let mut out = Dirty {
        readings: Vec::new(),
        mui: None,
        spikes: Vec::new(),
        decoys: Vec::new(),
        resets: Vec::new(),
        quantized: None,
        records: Vec::new(),
        gaps: Vec::new(),
    };
    let annual = mean(clean);
    match sp.role {
        Role::Plain => {}
        Role::Mui => {
            let m = &plan.mui;
            let year = plan.start.year();
            let lo = NaiveDate::from_ymd_opt(year, m.first_month, 1).expect("valid month");
            let hi = NaiveDate::from_ymd_opt(year, m.last_month + 1, 1).expect("valid month") - Duration::days(1);
            let day = lo + Duration::days(rng.random_range(0..=(hi - lo).num_days()));
            let cp = HourStamp::first_of_day(day);
            let side = if rng.random_bool(0.5) { Side::Before } else { Side::After };
            for (h, t) in stamps.iter().enumerate() {
                let scaled = match side {
                    Side::Before => *t < cp,
                    Side::After => *t >= cp,
                };
                if scaled {
                    if let Some(x) = v[h].as_mut() {
                        *x = (*x as f64 * m.factor).round() as i64;
                    }
                }
            }
            out.mui = Some(PlantedMui { key: key.clone(), changepoint: cp, factor: m.factor, side });
        }
        Role::Quantized => {
            let step = plan.quantized.step_litres;
            let mut cum = 0i64;
            for x in v.iter_mut().flatten() {
                let before = cum.div_euclid(step) * step;
                cum += *x;
                *x = cum.div_euclid(step) * step - before;
            }
            out.quantized = Some(PlantedQuantized { key: key.clone(), step_litres: step });
        }
        Role::Reset => {
            if let Some(h) = free_hour(&mut rng, &v, &reserved) {
                let value = -(rng.random_range(plan.resets.min_m3..plan.resets.max_m3) * 1000.0).round() as i64;
                v[h] = Some(value);
                reserved.extend(h - 9..=h + 9);
                out.resets.push(PlantedPoint { key: key.clone(), at: stamps[h], value: Consumption::from_litres(value) });
            }
        }
        Role::Spike => {
            if let Some(h) = free_hour(&mut rng, &v, &reserved) {
                let len = rng.random_range(1..=plan.spikes.max_hours.max(1)) as usize;
                let base_level = local_mean(clean, h, h + len - 1).max(annual);
                let factor = rng.random_range(plan.spikes.min_factor..plan.spikes.max_factor);
                let amp = (factor * base_level).max(annual + 2000.0);
                for j in h..h + len {
                    v[j] = Some((amp * rng.random_range(0.9..1.1)).round() as i64);
                }
                reserved.extend(h - 9..=h + len + 8);
                out.spikes.push(PlantedSpike {
                    key: key.clone(),
                    span: Span { first: stamps[h], last: stamps[h + len - 1] },
                    amplitude_m3: amp / 1000.0,
                    burst: false,
                });
            }
        }
        Role::Burst(b) => {
            let h = bursts[b];
            let (lo, hi) = (plan.spikes.burst_min_m3.ln(), plan.spikes.burst_max_m3.ln());
            let drawn = rng.random_range(lo..hi).exp() * 1000.0;
            let amp = drawn.max(20.0 * local_mean(clean, h, h).max(annual)).max(annual + 2000.0);
            v[h] = Some(amp.round() as i64);
            reserved.extend(h.saturating_sub(9)..=(h + 9).min(v.len() - 1));
            out.spikes.push(PlantedSpike { key: key.clone(), span: Span::single(stamps[h]), amplitude_m3: amp / 1000.0, burst: true });
        }
        Role::Decoy => {
            if let Some(h) = free_hour(&mut rng, &v, &reserved) {
                let value = (local_mean(clean, h, h) * rng.random_range(2.0..6.0)).round() as i64;
                v[h] = Some(value);
                reserved.extend(h - 9..=h + 9);
                out.decoys.push(PlantedPoint { key: key.clone(), at: stamps[h], value: Consumption::from_litres(value) });
            }
        }
    }

    if sp.gapped {
        let runs = rng.random_range(1..=plan.gaps.max_runs.max(1));
        for _ in 0..runs {
            let len = rng.random_range(1..=plan.gaps.max_hours.max(1)) as usize;
            let start = rng.random_range(0..v.len().saturating_sub(len).max(1));
            if (start..start + len).any(|h| reserved.contains(&h)) {
                continue;
            }
            for x in &mut v[start..start + len] {
                *x = None;
            }
            reserved.extend(start..start + len);
        }
        let mut run: Option<Span> = None;
        for (h, t) in stamps.iter().enumerate() {
            let missing = v[h].is_none() && clean[h].is_some();
            match (&mut run, missing) {
                (Some(s), true) if s.last + 1 == *t => s.last = *t,
                (_, true) => {
                    if let Some(s) = run.take() {
                        out.gaps.push(s);
                    }
                    run = Some(Span::single(*t));
                }
                (_, false) => {
                    if let Some(s) = run.take() {
                        out.gaps.push(s);
                    }
                }
            }
        }
        out.gaps.extend(run);
    }

    let mut readings: Vec<Reading> =
        stamps.iter().zip(&v).filter_map(|(t, x)| x.map(|x| Reading::new(*t, Consumption::from_litres(x)))).collect();
    let mut extra = Vec::new();
    for n in 0..sp.equal_records + sp.conflicting_records {
        let conflicting = n >= sp.equal_records;
        for _ in 0..50 {
            let h = rng.random_range(0..v.len());
            let Some(x) = v[h] else { continue };
            if reserved.contains(&h) {
                continue;
            }
            reserved.insert(h);
            let value = if conflicting { x + ((x as f64 * rng.random_range(0.1..0.5)).round() as i64).max(1) } else { x };
            extra.push(Reading::new(stamps[h], Consumption::from_litres(value)));
            out.records.push(PlantedRecord { key: key.clone(), at: stamps[h], conflicting });
            break;
        }
    }
    readings.extend(extra);
    readings.sort_by_key(|r| r.at);
    out.readings = readings;
    out
}

fn billing_for(plan: &SyntheticPlan, i: usize, base: &Base, stamps: &[HourStamp]) -> Vec<BillingRecord> {
    let mut rng = rng_for(plan.seed, EXTRA_STREAM + i as u64);
    let p = plan.billing_period_days.max(1);
    let offset = rng.random_range(0..p);
    let mut bounds = vec![0i64];
    let mut b = offset;
    while b < plan.days {
        if b > 0 {
            bounds.push(b);
        }
        b += p;
    }
    bounds.push(plan.days);
    let mut register: i64 = rng.random_range(0..50_000_000);
    bounds
        .windows(2)
        .map(|w| {
            let (a, z) = (w[0] as usize * 24, w[1] as usize * 24);
            let litres: i64 = base.values[a..z].iter().flatten().sum();
            let _ = stamps;
            let rec = BillingRecord {
                key: base.info.key.clone(),
                unit: "m3".into(),
                period_start: plan.start + Duration::days(w[0]),
                period_end: plan.start + Duration::days(w[1]),
                start_count: register,
                end_count: register + litres,
                consumption: Consumption::from_litres(litres),
            };
            register += litres;
            rec
        })
        .collect()
}

fn bernoulli_subset(rng: &mut ChaCha8Rng, pool: &[usize], expected: f64) -> Vec<usize> {
    if pool.is_empty() || expected <= 0.0 {
        return Vec::new();
    }
    let p = (expected / pool.len() as f64).min(1.0);
    pool.iter().copied().filter(|_| rng.random_bool(p)).collect()
}

/// Builds the corpus described by `plan`.
pub fn generate(plan: &SyntheticPlan) -> Corpus {
    let n = plan.stream_count;
    let first = plan.first_stamp();
    let stamps: Vec<HourStamp> = (0..plan.hours()).map(|h| first + h).collect();
    let mut global = rng_for(plan.seed, 0);

    let mut outage = BTreeSet::new();
    if plan.gaps.outage_days > 0 && plan.days > 60 {
        let latest = (plan.days - plan.gaps.outage_days - 10).max(1);
        let earliest = (latest - 60).max(1).min(latest);
        let d0 = global.random_range(earliest..=latest);
        for d in 0..plan.gaps.outage_days {
            outage.insert(plan.start + Duration::days(d0 + d));
        }
    }

    let bases: Vec<Base> = (0..n).into_par_iter().map(|i| base_stream(plan, i, &stamps, &outage)).collect();

    // exclusive error roles
    let mut roles = vec![Role::Plain; n];
    let mui_pool: Vec<usize> = (0..n)
        .filter(|&i| {
            matches!(bases[i].category, MainCategory::Commercial | MainCategory::Industrial | MainCategory::Institutional)
                && bases[i].level >= plan.mui.min_level_m3
        })
        .collect();
    for i in bernoulli_subset(&mut global, &mui_pool, plan.mui.rate * n as f64) {
        roles[i] = Role::Mui;
    }
    let q_pool: Vec<usize> =
        (0..n).filter(|&i| roles[i] == Role::Plain && bases[i].level >= plan.quantized.min_level_m3).collect();
    for i in bernoulli_subset(&mut global, &q_pool, plan.quantized.rate * n as f64) {
        roles[i] = Role::Quantized;
    }
    let mut pool: Vec<usize> = (0..n).filter(|&i| roles[i] == Role::Plain).collect();
    pool.shuffle(&mut global);
    let mut take = |count: usize, role: Role, roles: &mut Vec<Role>| {
        for _ in 0..count {
            match pool.pop() {
                Some(i) => roles[i] = role,
                None => break,
            }
        }
    };
    take(plan.resets.count, Role::Reset, &mut roles);
    take(plan.spikes.isolated, Role::Spike, &mut roles);
    for b in 0..plan.spikes.bursts {
        take(plan.spikes.burst_meters, Role::Burst(b), &mut roles);
    }
    take(plan.spikes.decoys, Role::Decoy, &mut roles);
    let bursts: Vec<usize> = (0..plan.spikes.bursts)
        .map(|_| loop {
            let h = global.random_range(24..stamps.len().max(49) - 24);
            if !outage.contains(&stamps[h].day()) {
                break h;
            }
        })
        .collect();

    let non_mui: Vec<usize> = (0..n).filter(|&i| roles[i] != Role::Mui).collect();
    let gapped: BTreeSet<usize> =
        bernoulli_subset(&mut global, &non_mui, plan.gaps.stream_fraction * n as f64).into_iter().collect();
    let mut equal = vec![0usize; n];
    let mut conflicting = vec![0usize; n];
    if !non_mui.is_empty() {
        for _ in 0..plan.duplicates.equal_records {
            equal[non_mui[global.random_range(0..non_mui.len())]] += 1;
        }
        for _ in 0..plan.duplicates.conflicting_records {
            conflicting[non_mui[global.random_range(0..non_mui.len())]] += 1;
        }
    }
    let stream_plans: Vec<StreamPlan> = (0..n)
        .map(|i| StreamPlan {
            role: roles[i],
            gapped: gapped.contains(&i),
            equal_records: equal[i],
            conflicting_records: conflicting[i],
        })
        .collect();

    let dirty: Vec<Dirty> =
        (0..n).into_par_iter().map(|i| corrupt(plan, i, &bases[i], &stream_plans[i], &stamps, &bursts)).collect();

    // keys as the meter-data system spells them
    let mut truth = GroundTruth { seed: plan.seed, outage_days: outage.iter().copied().collect(), ..Default::default() };
    let mut amid = Vec::with_capacity(n + n / 10);
    for (i, d) in dirty.into_iter().enumerate() {
        let canonical = bases[i].info.key.clone();
        let u: f64 = global.random();
        let (amid_key, tier) = if u < plan.keys.partial_fraction {
            let c = (b'a' + global.random_range(0..26u8)) as char;
            let k = CompositeKey::new(canonical.account_id(), &format!("{}{c}", canonical.meter_id()), canonical.device_id());
            (k.expect("valid key"), Some(JoinTier::ThreeFieldPartial))
        } else if u < plan.keys.partial_fraction + plan.keys.manual_fraction {
            let tag = global.random_range(1..10);
            let k = CompositeKey::new(canonical.account_id(), &format!("x{tag}-{}", canonical.meter_id()), canonical.device_id());
            (k.expect("valid key"), Some(JoinTier::ManualPartial))
        } else {
            (canonical.clone(), None)
        };
        if let Some(tier) = tier {
            truth.key_noise.push(PlantedKeyNoise { amid: amid_key.clone(), canonical: canonical.clone(), tier });
        }
        truth.amid_to_canonical.insert(amid_key.clone(), canonical.clone());
        truth.canonical.push(canonical.clone());
        if global.random_bool(plan.duplicates.stream_fraction.clamp(0.0, 1.0)) {
            let copy = CompositeKey::new(amid_key.account_id(), amid_key.meter_id(), &format!("{}-copy", amid_key.device_id()))
                .expect("valid key");
            truth.duplicate_streams.push(PlantedDuplicateStream { copy: copy.clone(), original: amid_key.clone() });
            amid.push(DataStream::new(copy, d.readings.clone()));
        }
        truth.mui.extend(d.mui);
        truth.spikes.extend(d.spikes);
        truth.decoys.extend(d.decoys);
        truth.resets.extend(d.resets);
        truth.quantized.extend(d.quantized);
        truth.duplicate_records.extend(d.records);
        truth.gaps.extend(d.gaps.into_iter().map(|s| (canonical.clone(), s)));
        amid.push(DataStream::new(amid_key, d.readings));
    }

    for j in 0..plan.keys.orphans {
        let mut rng = rng_for(plan.seed, EXTRA_STREAM + (1 << 40) + j as u64);
        let level = rng.random_range(0.03..2.0);
        let vals = shape::series(&mut rng, MainCategory::SingleFamily, level, &stamps);
        let key = CompositeKey::new(&format!("orphan-{j:04}"), &format!("zz-{j:04}"), "dev-9").expect("valid key");
        truth.unjoinable.push(key.clone());
        let rs = stamps.iter().zip(vals).filter(|(t, _)| !outage.contains(&t.day()));
        amid.push(DataStream::new(key, rs.map(|(t, v)| Reading::new(*t, Consumption::from_litres(v))).collect()));
    }
    if n >= 12 {
        for j in 0..plan.keys.ambiguous {
            let mut rng = rng_for(plan.seed, EXTRA_STREAM + (1 << 41) + j as u64);
            // prefix of identities 10g..10g+9
            let g = rng.random_range(0..(n - 2) / 10);
            let key = CompositeKey::new(&format!("acc-{g:04}"), &format!("mtr-{g:04}"), "dev-1").expect("valid key");
            if truth.unjoinable.contains(&key) {
                continue;
            }
            let level = rng.random_range(0.03..2.0);
            let vals = shape::series(&mut rng, MainCategory::SingleFamily, level, &stamps);
            truth.unjoinable.push(key.clone());
            let rs = stamps.iter().zip(vals).filter(|(t, _)| !outage.contains(&t.day()));
            amid.push(DataStream::new(key, rs.map(|(t, v)| Reading::new(*t, Consumption::from_litres(v))).collect()));
        }
    }
    amid.sort_by(|a, b| a.key.cmp(&b.key));

    let bild: Vec<BillingRecord> =
        (0..n).into_par_iter().flat_map_iter(|i| billing_for(plan, i, &bases[i], &stamps)).collect();
    let clean: Vec<DataStream> = bases
        .par_iter()
        .map(|b| {
            let rs = stamps.iter().zip(&b.values).filter_map(|(t, v)| v.map(|v| Reading::new(*t, Consumption::from_litres(v))));
            let mut s = DataStream::new(b.info.key.clone(), rs.collect());
            s.category = Some(b.info.category.clone());
            s.unit_label = Some(b.info.unit.clone());
            s
        })
        .collect();
    let mind = bases.into_iter().map(|b| b.info).collect();

    Corpus { plan: plan.clone(), amid, mind, bild, clean, truth }
}
