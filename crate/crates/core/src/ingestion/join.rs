//! Composite-key reconstruction across AMID, MIND and BILD.
//!
//! Each AMID key is matched against the MIND identities. Tiers are tried as a
//! cascade: a key keeps the identity decided by the strictest tier that has
//! any candidate, and a key with two or more candidates at that tier is
//! ambiguous, which counts as unmatched.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{BillingRecord, CompositeKey, DataStream, MeterInfo};

/// Minimum shared length for a partial field match.
pub const MIN_OVERLAP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JoinTier {
    AccountOnly,
    ThreeFieldExact,
    ThreeFieldPartial,
    ManualPartial,
}

impl JoinTier {
    pub const ALL: [JoinTier; 4] =
        [JoinTier::AccountOnly, JoinTier::ThreeFieldExact, JoinTier::ThreeFieldPartial, JoinTier::ManualPartial];

    pub fn name(self) -> &'static str {
        match self {
            JoinTier::AccountOnly => "account-only",
            JoinTier::ThreeFieldExact => "three-field-exact",
            JoinTier::ThreeFieldPartial => "three-field-partial",
            JoinTier::ManualPartial => "manual-partial",
        }
    }

    fn field_level(self) -> Option<FieldMatch> {
        match self {
            JoinTier::AccountOnly => None,
            JoinTier::ThreeFieldExact => Some(FieldMatch::Exact),
            JoinTier::ThreeFieldPartial => Some(FieldMatch::Prefix),
            JoinTier::ManualPartial => Some(FieldMatch::Substring),
        }
    }
}

impl fmt::Display for JoinTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for JoinTier {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JoinTier::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown join tier {s:?}"))
    }
}

/// How closely two normalized field values agree, strictest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FieldMatch {
    Exact,
    Prefix,
    Substring,
}

/// Classifies the relation between two normalized field values.
pub fn field_match(a: &str, b: &str) -> Option<FieldMatch> {
    if a == b {
        return Some(FieldMatch::Exact);
    }
    let (short, long) = if a.chars().count() <= b.chars().count() { (a, b) } else { (b, a) };
    if short.chars().count() < MIN_OVERLAP {
        return None;
    }
    if long.starts_with(short) {
        Some(FieldMatch::Prefix)
    } else if long.contains(short) {
        Some(FieldMatch::Substring)
    } else {
        None
    }
}

/// Weakest field relation across all three fields.
pub fn key_match(a: &CompositeKey, b: &CompositeKey) -> Option<FieldMatch> {
    let mut worst = FieldMatch::Exact;
    for (x, y) in a.fields().into_iter().zip(b.fields()) {
        worst = worst.max(field_match(x, y)?);
    }
    Some(worst)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinReport {
    pub tier: JoinTier,
    pub matched: usize,
    pub unmatched: usize,
    /// Unmatched keys that had two or more candidates.
    pub ambiguous: usize,
    pub unmatched_keys: Vec<CompositeKey>,
    /// Billing records that could not be attached to exactly one identity.
    pub billing_unlinked: usize,
}

/// AMID key → MIND identity.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMapping {
    pub identities: BTreeMap<CompositeKey, CompositeKey>,
}

impl KeyMapping {
    pub fn get(&self, amid_key: &CompositeKey) -> Option<&CompositeKey> {
        self.identities.get(amid_key)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Candidate lookup over identity keys.
struct IdentityIndex<'a> {
    keys: Vec<&'a CompositeKey>,
    by_account: HashMap<&'a str, Vec<usize>>,
    by_meter: HashMap<&'a str, Vec<usize>>,
    /// First four characters of each meter id.
    by_meter_head: HashMap<String, Vec<usize>>,
    /// Every four-character window of each meter id.
    by_meter_gram: HashMap<String, Vec<usize>>,
}

fn grams(s: &str) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    if chars.len() < MIN_OVERLAP {
        return Vec::new();
    }
    chars.windows(MIN_OVERLAP).map(|w| w.iter().collect()).collect()
}

impl<'a> IdentityIndex<'a> {
    fn build(keys: Vec<&'a CompositeKey>) -> Self {
        let mut idx = IdentityIndex {
            by_account: HashMap::new(),
            by_meter: HashMap::new(),
            by_meter_head: HashMap::new(),
            by_meter_gram: HashMap::new(),
            keys: Vec::new(),
        };
        for (i, k) in keys.iter().enumerate() {
            idx.by_account.entry(k.account_id()).or_default().push(i);
            idx.by_meter.entry(k.meter_id()).or_default().push(i);
            let g = grams(k.meter_id());
            if let Some(head) = g.first() {
                idx.by_meter_head.entry(head.clone()).or_default().push(i);
            }
            let unique: BTreeSet<String> = g.into_iter().collect();
            for gram in unique {
                idx.by_meter_gram.entry(gram).or_default().push(i);
            }
        }
        idx.keys = keys;
        idx
    }

    /// Superset of the identities whose meter id matches `meter` at any level.
    fn meter_candidates(&self, meter: &str) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = self.by_meter.get(meter).into_iter().flatten().copied().collect();
        let g = grams(meter);
        if let Some(head) = g.first() {
            // identities containing the query
            out.extend(self.by_meter_gram.get(head).into_iter().flatten().copied());
        }
        for gram in &g {
            // identities contained in the query
            out.extend(self.by_meter_head.get(gram).into_iter().flatten().copied());
        }
        out
    }

    /// Identity decided for `key` at `tier`: `Ok((index, level))`, `Err(n)` with n candidates otherwise.
    fn decide(&self, key: &CompositeKey, tier: JoinTier) -> Result<(usize, u8), usize> {
        let Some(limit) = tier.field_level() else {
            let hits = self.by_account.get(key.account_id()).map(Vec::as_slice).unwrap_or(&[]);
            return match hits {
                [one] => Ok((*one, 0)),
                other => Err(other.len()),
            };
        };
        let mut best: Option<FieldMatch> = None;
        let mut at_best: Vec<usize> = Vec::new();
        for i in self.meter_candidates(key.meter_id()) {
            let Some(level) = key_match(key, self.keys[i]) else { continue };
            if level > limit {
                continue;
            }
            match best {
                Some(b) if level > b => {}
                Some(b) if level == b => at_best.push(i),
                _ => {
                    best = Some(level);
                    at_best = vec![i];
                }
            }
        }
        match (best, at_best.as_slice()) {
            (Some(level), [one]) => Ok((*one, level as u8)),
            (_, many) => Err(many.len()),
        }
    }
}

fn identity_keys(mind: &[MeterInfo]) -> Vec<&CompositeKey> {
    let set: BTreeSet<&CompositeKey> = mind.iter().map(|m| &m.key).collect();
    set.into_iter().collect()
}

/// Resolves every AMID key to at most one MIND identity.
///
/// The result depends only on the key sets, not on record order.
pub fn resolve_keys(
    amid_keys: &BTreeSet<CompositeKey>,
    mind: &[MeterInfo],
    bild: &[BillingRecord],
    tier: JoinTier,
) -> (KeyMapping, JoinReport) {
    let index = IdentityIndex::build(identity_keys(mind));
    let queries: Vec<&CompositeKey> = amid_keys.iter().collect();
    let decisions: Vec<Result<(usize, u8), usize>> = queries.par_iter().map(|k| index.decide(k, tier)).collect();

    // Several AMID keys claiming one identity: the strictest unique claimant keeps it.
    let mut claims: BTreeMap<usize, Vec<(u8, usize)>> = BTreeMap::new();
    for (qi, d) in decisions.iter().enumerate() {
        if let Ok((id, level)) = d {
            claims.entry(*id).or_default().push((*level, qi));
        }
    }
    let mut winners: BTreeMap<usize, usize> = BTreeMap::new();
    for (id, mut c) in claims {
        c.sort();
        let strictest = c[0].0;
        let at_level: Vec<_> = c.iter().filter(|(l, _)| *l == strictest).collect();
        if at_level.len() == 1 {
            winners.insert(at_level[0].1, id);
        }
    }

    let mut mapping = KeyMapping::default();
    let mut unmatched_keys = Vec::new();
    let mut ambiguous = 0;
    for (qi, d) in decisions.iter().enumerate() {
        match winners.get(&qi) {
            Some(id) => {
                mapping.identities.insert(queries[qi].clone(), index.keys[*id].clone());
            }
            None => {
                if !matches!(d, Err(0)) {
                    ambiguous += 1;
                }
                unmatched_keys.push(queries[qi].clone());
            }
        }
    }
    let (_, billing_unlinked) = link_billing(&index, bild, tier);
    let report = JoinReport {
        tier,
        matched: mapping.len(),
        unmatched: unmatched_keys.len(),
        ambiguous,
        unmatched_keys,
        billing_unlinked,
    };
    (mapping, report)
}

fn link_billing(index: &IdentityIndex<'_>, bild: &[BillingRecord], tier: JoinTier) -> (Vec<BillingRecord>, usize) {
    let mut cache: HashMap<&CompositeKey, Option<usize>> = HashMap::new();
    let mut linked = Vec::with_capacity(bild.len());
    let mut unlinked = 0;
    for b in bild {
        let id = *cache.entry(&b.key).or_insert_with(|| index.decide(&b.key, tier).ok().map(|(i, _)| i));
        match id {
            Some(i) => {
                let mut r = b.clone();
                r.key = index.keys[i].clone();
                linked.push(r);
            }
            None => unlinked += 1,
        }
    }
    linked.sort_by(|a, b| a.key.cmp(&b.key).then(a.period_start.cmp(&b.period_start)));
    (linked, unlinked)
}

/// Billing records re-keyed to their MIND identity, plus the unattached count.
pub fn attach_billing(mind: &[MeterInfo], bild: &[BillingRecord], tier: JoinTier) -> (Vec<BillingRecord>, usize) {
    let index = IdentityIndex::build(identity_keys(mind));
    link_billing(&index, bild, tier)
}

/// Removes streams without an identity and re-keys the rest.
///
/// Returns the kept streams (in identity order, carrying MIND category and
/// unit) and the keys that were dropped.
pub fn drop_unmatched(
    mapping: &KeyMapping,
    mind: &[MeterInfo],
    streams: Vec<DataStream>,
) -> (Vec<DataStream>, Vec<CompositeKey>) {
    let info: HashMap<&CompositeKey, &MeterInfo> = mind.iter().map(|m| (&m.key, m)).collect();
    let mut kept = Vec::with_capacity(streams.len());
    let mut dropped = Vec::new();
    for mut s in streams {
        match mapping.get(&s.key) {
            Some(identity) => {
                s.key = identity.clone();
                if let Some(m) = info.get(identity) {
                    s.category = Some(m.category.clone());
                    s.unit_label = Some(m.unit.clone());
                }
                kept.push(s);
            }
            None => dropped.push(s.key.clone()),
        }
    }
    kept.sort_by(|a, b| a.key.cmp(&b.key));
    dropped.sort();
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConsumerCategory, MainCategory};

    fn k(a: &str, m: &str, d: &str) -> CompositeKey {
        CompositeKey::new(a, m, d).unwrap()
    }

    fn info(key: CompositeKey) -> MeterInfo {
        MeterInfo {
            key,
            unit: "m3".into(),
            category: ConsumerCategory { main: MainCategory::SingleFamily, sub_code: String::new() },
            latitude: None,
            longitude: None,
            postal_code: String::new(),
        }
    }

    #[test]
    fn field_relations() {
        assert_eq!(field_match("mtr-0042a", "mtr-0042"), Some(FieldMatch::Prefix));
        assert_eq!(field_match("x-mtr-0042", "mtr-0042"), Some(FieldMatch::Substring));
        assert_eq!(field_match("abc", "abcd"), None);
        assert_eq!(field_match("abcd", "abcd"), Some(FieldMatch::Exact));
        assert_eq!(field_match("ab", "ab"), Some(FieldMatch::Exact));
    }

    #[test]
    fn identical_sets_match_everywhere() {
        let keys: Vec<_> = (0..20).map(|i| k(&format!("acc-{i:04}"), &format!("mtr-{i:04}"), "dev-1")).collect();
        let mind: Vec<_> = keys.iter().cloned().map(info).collect();
        let set: BTreeSet<_> = keys.into_iter().collect();
        for tier in JoinTier::ALL {
            let (m, r) = resolve_keys(&set, &mind, &[], tier);
            assert_eq!(r.unmatched, 0, "{tier}");
            assert_eq!(m.len(), 20);
        }
    }

    #[test]
    fn truncated_meter_needs_partial_tier() {
        let mind = vec![info(k("acc-1", "MTR-0042", "dev-1"))];
        let set: BTreeSet<_> = [k("acc-1", "MTR-0042A", "dev-1")].into();
        assert_eq!(resolve_keys(&set, &mind, &[], JoinTier::ThreeFieldExact).1.unmatched, 1);
        let (m, r) = resolve_keys(&set, &mind, &[], JoinTier::ThreeFieldPartial);
        assert_eq!(r.unmatched, 0);
        assert_eq!(m.get(&k("acc-1", "MTR-0042A", "dev-1")).unwrap().meter_id(), "mtr-0042");
    }

    #[test]
    fn embedded_field_needs_manual_tier() {
        let mind = vec![info(k("acc-1", "mtr-0042", "dev-1"))];
        let set: BTreeSet<_> = [k("acc-1", "x9-mtr-0042", "dev-1")].into();
        assert_eq!(resolve_keys(&set, &mind, &[], JoinTier::ThreeFieldPartial).1.unmatched, 1);
        assert_eq!(resolve_keys(&set, &mind, &[], JoinTier::ManualPartial).1.unmatched, 0);
    }

    #[test]
    fn ambiguity_is_unmatched_and_exact_takes_precedence() {
        let mind = vec![info(k("acc-1", "mtr-0099a", "dev-1")), info(k("acc-1", "mtr-0099b", "dev-1"))];
        let set: BTreeSet<_> = [k("acc-1", "mtr-0099", "dev-1"), k("acc-1", "mtr-0099a", "dev-1")].into();
        let (m, r) = resolve_keys(&set, &mind, &[], JoinTier::ManualPartial);
        assert_eq!(r.unmatched, 1);
        assert_eq!(r.ambiguous, 1);
        assert_eq!(r.unmatched_keys, vec![k("acc-1", "mtr-0099", "dev-1")]);
        assert!(m.get(&k("acc-1", "mtr-0099a", "dev-1")).is_some());
        // account-only cannot tell the two meters apart
        assert_eq!(resolve_keys(&set, &mind, &[], JoinTier::AccountOnly).1.unmatched, 2);
    }

    #[test]
    fn drop_unmatched_rekeys_and_removes() {
        let mind = vec![info(k("acc-1", "mtr-0042", "dev-1"))];
        let set: BTreeSet<_> = [k("acc-1", "mtr-0042a", "dev-1"), k("zzz", "yyy", "xxx")].into();
        let (m, _) = resolve_keys(&set, &mind, &[], JoinTier::ManualPartial);
        let streams: Vec<_> = set.iter().map(|key| DataStream::new(key.clone(), vec![])).collect();
        let (kept, dropped) = drop_unmatched(&m, &mind, streams);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].key, k("acc-1", "mtr-0042", "dev-1"));
        assert_eq!(kept[0].category.as_ref().unwrap().main, MainCategory::SingleFamily);
        assert_eq!(dropped, vec![k("zzz", "yyy", "xxx")]);
    }
}
