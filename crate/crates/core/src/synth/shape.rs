//! Clean consumption shapes per consumer category.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{HourStamp, MainCategory};

/// Share of streams per category, in `MainCategory::ALL` order.
pub const CATEGORY_SHARES: [(MainCategory, f64); 6] = [
    (MainCategory::SingleFamily, 0.55),
    (MainCategory::MultiFamily, 0.12),
    (MainCategory::Industrial, 0.08),
    (MainCategory::Commercial, 0.12),
    (MainCategory::Institutional, 0.05),
    (MainCategory::Agricultural, 0.08),
];

/// Mean hourly consumption range in m³.
pub fn level_range(cat: MainCategory) -> (f64, f64) {
    match cat {
        MainCategory::SingleFamily => (0.03, 0.08),
        MainCategory::MultiFamily => (0.5, 3.0),
        MainCategory::Commercial => (4.0, 20.0),
        MainCategory::Industrial => (8.0, 40.0),
        MainCategory::Institutional => (4.0, 15.0),
        MainCategory::Agricultural => (3.0, 40.0),
    }
}

pub fn pick_category(rng: &mut ChaCha8Rng) -> MainCategory {
    let mut u: f64 = rng.random();
    for (c, share) in CATEGORY_SHARES {
        if u < share {
            return c;
        }
        u -= share;
    }
    MainCategory::SingleFamily
}

const SFR: [f64; 24] = [
    0.3, 0.2, 0.2, 0.2, 0.3, 0.6, 1.4, 2.0, 1.7, 1.2, 1.0, 0.9, 0.9, 0.8, 0.8, 0.9, 1.1, 1.5, 1.8, 1.7, 1.4, 1.1, 0.7, 0.4,
];
const MFR: [f64; 24] = [
    0.5, 0.4, 0.4, 0.4, 0.5, 0.8, 1.2, 1.5, 1.4, 1.1, 1.0, 1.0, 1.0, 1.0, 0.9, 1.0, 1.1, 1.3, 1.4, 1.4, 1.3, 1.1, 0.8, 0.6,
];
const COM: [f64; 24] = [
    0.3, 0.3, 0.3, 0.3, 0.3, 0.4, 0.7, 1.2, 1.6, 1.7, 1.7, 1.8, 1.8, 1.7, 1.7, 1.6, 1.5, 1.3, 1.0, 0.8, 0.6, 0.5, 0.4, 0.3,
];
const IND: [f64; 24] = [
    0.7, 0.7, 0.7, 0.7, 0.7, 0.8, 1.0, 1.2, 1.3, 1.3, 1.3, 1.2, 1.2, 1.3, 1.3, 1.3, 1.2, 1.1, 1.0, 0.9, 0.9, 0.8, 0.8, 0.7,
];
const INS: [f64; 24] = [
    0.4, 0.4, 0.4, 0.4, 0.4, 0.5, 0.8, 1.3, 1.6, 1.6, 1.6, 1.6, 1.5, 1.5, 1.5, 1.4, 1.3, 1.1, 0.9, 0.7, 0.6, 0.5, 0.5, 0.4,
];
const AGR: [f64; 24] = [
    0.8, 0.8, 0.9, 1.1, 1.5, 1.9, 2.0, 1.7, 1.3, 1.0, 0.8, 0.7, 0.7, 0.7, 0.7, 0.7, 0.8, 0.9, 1.0, 1.1, 1.1, 1.0, 0.9, 0.8,
];

fn diurnal(cat: MainCategory) -> &'static [f64; 24] {
    match cat {
        MainCategory::SingleFamily => &SFR,
        MainCategory::MultiFamily => &MFR,
        MainCategory::Commercial => &COM,
        MainCategory::Industrial => &IND,
        MainCategory::Institutional => &INS,
        MainCategory::Agricultural => &AGR,
    }
}

fn weekly(cat: MainCategory, weekday: u32) -> f64 {
    let weekend = weekday >= 5;
    match (cat, weekend) {
        (MainCategory::Commercial | MainCategory::Institutional, true) => 0.45,
        (MainCategory::Industrial, true) => 0.7,
        (MainCategory::SingleFamily, true) => 1.1,
        _ => 1.0,
    }
}

/// Yearly cycle peaking in mid July.
fn seasonal(cat: MainCategory, at: HourStamp) -> f64 {
    let doy = chrono::Datelike::ordinal(&at.day()) as f64;
    let c = (2.0 * PI * (doy - 196.0) / 365.0).cos();
    match cat {
        MainCategory::SingleFamily => 1.0 + 0.35 * c,
        MainCategory::MultiFamily => 1.0 + 0.15 * c,
        MainCategory::Agricultural => 0.9 + 0.6 * c,
        _ => 1.0 + 0.08 * c,
    }
}

/// Hourly litres for `stamps`, mean near `level_m3`.
pub fn series(rng: &mut ChaCha8Rng, cat: MainCategory, level_m3: f64, stamps: &[HourStamp]) -> Vec<i64> {
    let mean: f64 = diurnal(cat).iter().sum::<f64>() / 24.0;
    stamps
        .iter()
        .map(|t| {
            let shape = diurnal(cat)[((t.hour_of_day() + 23) % 24) as usize] / mean;
            let noise: f64 = rng.random_range(0.8..1.2);
            let v = level_m3 * 1000.0 * shape * weekly(cat, t.weekday()) * seasonal(cat, *t) * noise;
            v.round().max(0.0) as i64
        })
        .collect()
}
