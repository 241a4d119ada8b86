use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CompositeKey, Consumption, HourRange, MainCategory};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEntry {
    pub key: CompositeKey,
    pub load: Consumption,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<MainCategory>,
}

/// Streams ordered by descending load; equal loads by ascending key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub window: HourRange,
    pub entries: Vec<RankEntry>,
    /// Streams without any reading in the window.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<CompositeKey>,
}

impl Ranking {
    pub fn new(window: HourRange, mut entries: Vec<RankEntry>) -> Self {
        entries.sort_by(|a, b| b.load.cmp(&a.load).then_with(|| a.key.cmp(&b.key)));
        Ranking { window, entries, excluded: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CompositeKey> {
        self.entries.iter().map(|e| &e.key)
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    pub fn is_ordered(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| w[0].load > w[1].load || (w[0].load == w[1].load && w[0].key < w[1].key))
    }

    /// Fraction of total listed load per main category.
    pub fn category_shares(&self) -> BTreeMap<String, f64> {
        let mut by_cat: BTreeMap<String, i64> = BTreeMap::new();
        let mut total = 0i64;
        for e in &self.entries {
            let name = e.category.map(|c| c.code().to_string()).unwrap_or_else(|| "UNK".into());
            let l = e.load.litres().max(0);
            *by_cat.entry(name).or_default() += l;
            total += l;
        }
        by_cat
            .into_iter()
            .map(|(k, v)| (k, if total > 0 { v as f64 / total as f64 } else { 0.0 }))
            .collect()
    }
}
