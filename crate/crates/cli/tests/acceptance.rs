//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use chrono::DateTime;
use hydroclean::detect::MuiVerdict;
use hydroclean::integrity::{dedup_records, dedup_streams, gap_census, Calendar, ConflictPolicy};
use hydroclean::metrics::{peak_ranking, recall_at_k, weighted_kendall_tau_with, WeightVector};
use hydroclean::model::{
    AnomalyEvent, CompositeKey, Consumption, DataStream, ErrorClass, EventStatus, HourRange, HourStamp, RankEntry,
    Ranking, Reading, RepairAction,
};
use hydroclean::peaks::{data_range, peak_window};
use hydroclean::pipeline::{Config, Inputs, Pipeline, Screening, SCREENING_FILE};
use hydroclean::synth::{generate, Corpus, Corruption, GroundTruth, SyntheticPlan};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = f();
    let took = t.elapsed();
    let in_time = budget.is_none_or(|b| took <= b);
    let pass = o.pass && in_time;
    let limit = budget.map(|b| format!(" / limit {:.0}s", b.as_secs_f64())).unwrap_or_default();
    println!(
        "{} {name}: {} [{:.1}s{limit}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    pass
}

fn key(i: usize) -> CompositeKey {
    CompositeKey::new(&format!("a{i:05}"), "m", "d").unwrap()
}

/// Ranking listing `keys` in the given order.
fn ranking_of(keys: &[CompositeKey]) -> Ranking {
    let n = keys.len() as i64;
    let entries = keys
        .iter()
        .enumerate()
        .map(|(i, k)| RankEntry { key: k.clone(), load: Consumption::from_litres(n - i as i64), category: None })
        .collect();
    Ranking::new(HourRange::with_len(HourStamp::from_hours(0), 1), entries)
}

fn wkt_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    let all: Vec<CompositeKey> = (0..2000).map(key).collect();
    // time inside the correlation itself, without instance generation
    let mut spent = Duration::ZERO;
    for inst in 0..1000 {
        let n = rng.random_range(2..=2000usize);
        let keys = &all[..n];
        let mut shuffled = keys.to_vec();
        shuffled.shuffle(&mut rng);
        let mut reversed = keys.to_vec();
        reversed.reverse();
        let mut weights: BTreeMap<CompositeKey, Consumption> = keys
            .iter()
            .map(|k| {
                let w = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..=1_000_000) };
                (k.clone(), Consumption::from_litres(w))
            })
            .collect();
        weights.insert(keys[0].clone(), Consumption::from_litres(1));
        let w = WeightVector(weights);
        let c = rng.random_range(2..=1000i64);
        let scaled = WeightVector(w.0.iter().map(|(k, v)| (k.clone(), Consumption::from_litres(v.litres() * c))).collect());
        let (r, s, rev) = (ranking_of(keys), ranking_of(&shuffled), ranking_of(&reversed));

        let t0 = Instant::now();
        let pairs = weighted_kendall_tau_with(&r, &s, &w, false).unwrap();
        let merge = weighted_kendall_tau_with(&r, &s, &w, true).unwrap();
        let ident = weighted_kendall_tau_with(&r, &r, &w, true).unwrap();
        let back = weighted_kendall_tau_with(&r, &rev, &w, true).unwrap();
        let sc = weighted_kendall_tau_with(&r, &s, &scaled, true).unwrap();
        spent += t0.elapsed();
        let mut fail = Vec::new();
        if pairs.k_w_raw.to_bits() != merge.k_w_raw.to_bits()
            || pairs.k_w_normalized.to_bits() != merge.k_w_normalized.to_bits()
        {
            fail.push("kernels differ");
        }
        if ident.k_w_normalized != 1.0 || ident.k_w_raw != 0.0 {
            fail.push("identity");
        }
        if back.k_w_normalized != -1.0 {
            fail.push("reversal");
        }
        if sc.k_w_normalized.to_bits() != merge.k_w_normalized.to_bits() || sc.k_w_raw != merge.k_w_raw * c as f64 {
            fail.push("scaling");
        }
        if !fail.is_empty() {
            bad.push(format!("#{inst} n={n}: {}", fail.join(", ")));
        }
    }
    let in_time = spent <= Duration::from_secs(10);
    Outcome {
        pass: bad.is_empty() && in_time,
        detail: if bad.is_empty() {
            format!("1000 instances exact; 5000 correlations in {:.1}s / limit 10s", spent.as_secs_f64())
        } else {
            bad[..bad.len().min(3)].join("; ")
        },
    }
}

fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<DataStream>, HourRange) {
    let hours = rng.random_range(168..=2000i64);
    let start = HourStamp::from_hours(rng.random_range(0..1_000_000));
    let range = HourRange::with_len(start, hours);
    let n = rng.random_range(1..=50usize);
    let streams = (0..n)
        .map(|i| {
            let miss = rng.random_range(0.0..0.3);
            let mut readings = Vec::new();
            for h in -5..hours + 5 {
                if rng.random_bool(miss) {
                    continue;
                }
                let v = if rng.random_bool(0.002) { rng.random_range(0..5_000_000) } else { rng.random_range(0..50_000) };
                readings.push(Reading::new(start + h, Consumption::from_litres(v)));
            }
            DataStream::new(key(i), readings)
        })
        .collect();
    (streams, range)
}

fn peak_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = Vec::new();
    for c in 0..200 {
        let (streams, range) = random_corpus(&mut rng);
        let mut hourly: HashMap<HourStamp, i64> = HashMap::new();
        for s in &streams {
            for r in s.readings() {
                *hourly.entry(r.at).or_default() += r.value.litres();
            }
        }
        for w in [24i64, 168] {
            let mut best: Option<(i64, HourStamp)> = None;
            for off in 0..=range.len() - w {
                let t0 = range.start + off;
                let total: i64 = (0..w).map(|h| hourly.get(&(t0 + h)).copied().unwrap_or(0)).sum();
                if best.is_none_or(|(b, _)| total > b) {
                    best = Some((total, t0));
                }
            }
            let (total, t0) = best.unwrap();
            let got = peak_window(&streams, &range, w, None).unwrap();
            if got.window != HourRange::with_len(t0, w) || got.total_volume.litres() != total {
                bad.push(format!("corpus {c} W={w}: got {} {} want {} {}", got.window, got.total_volume.litres(), t0, total));
            }
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() { "200 corpora x 2 windows exact".into() } else { bad[..bad.len().min(3)].join("; ") },
    }
}

fn config_for(dir: &Path, threads: usize) -> Config {
    Config { store: dir.join("store"), inputs: Inputs::in_dir(&dir.join("data")), threads, ..Config::default() }
}

fn overlaps(e: &AnomalyEvent, k: &CompositeKey, first: HourStamp, last: HourStamp) -> bool {
    &e.key == k && e.span.first <= last && first <= e.span.last
}

/// Default corpus: screening after phase 4, end-to-end recovery, dirty vs cleaned ranking.
fn default_corpus(results: &mut Vec<bool>) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&SyntheticPlan::default());
    corpus.write(&dir.path().join("data")).unwrap();
    let truth = corpus.truth.clone();

    let start = Instant::now();
    let (mut p, _) = Pipeline::ingest(config_for(dir.path(), 0)).unwrap();
    let mut dirty = Vec::new();
    for phase in 0..=4 {
        p.run_phase(phase).unwrap();
        if phase == 2 {
            dirty = p.streams().to_vec();
        }
    }
    let screening_time = start.elapsed();
    let screening: BTreeMap<CompositeKey, Screening> = p.read_artifact(SCREENING_FILE).unwrap();

    results.push(check("STD2M separation", None, || std2m_separation(&screening, &truth, screening_time)));

    p.auto_review(&truth, "auto", DateTime::UNIX_EPOCH).unwrap();
    p.run_phase(5).unwrap();
    let total = start.elapsed();
    results.push(check("End-to-end cleaning", None, || end_to_end(&p, &truth, total)));
    results.push(check("Ranking distortion", None, || ranking_distortion(&corpus, &dirty, p.streams())));
}

fn std2m_separation(screening: &BTreeMap<CompositeKey, Screening>, truth: &GroundTruth, took: Duration) -> Outcome {
    let mui = truth.mui_keys();
    let quantized: BTreeSet<&CompositeKey> = truth.quantized.iter().map(|q| &q.key).collect();
    let mut mui_min = f64::INFINITY;
    let mut clean_max: f64 = 0.0;
    let (mut dirty_hits, mut dirty_total, mut false_dirty, mut unscored) = (0, 0, 0, 0);
    for k in &mui {
        match screening.get(k).and_then(|s| s.std2m.zip(s.verdict)) {
            Some((v, verdict)) => {
                mui_min = mui_min.min(v);
                if verdict != MuiVerdict::NeedsReview {
                    dirty_total += 1;
                    dirty_hits += (verdict == MuiVerdict::Dirty) as usize;
                }
            }
            None => unscored += 1,
        }
    }
    for (_, s) in screening.iter().filter(|(k, _)| !mui.contains(*k) && !quantized.contains(k)) {
        if let Some(v) = s.std2m {
            clean_max = clean_max.max(v);
        }
        false_dirty += (s.verdict == Some(MuiVerdict::Dirty)) as usize;
    }
    let budget = Duration::from_secs(60);
    let pass = unscored == 0
        && mui_min >= 3.0 * clean_max
        && dirty_hits == dirty_total
        && dirty_total > 0
        && false_dirty == 0
        && took <= budget;
    Outcome {
        pass,
        detail: format!(
            "min MUI {mui_min:.1} vs 3 x max clean {clean_max:.2}; recall {dirty_hits}/{dirty_total} ({} planted, {unscored} unscored); false dirty {false_dirty}; ingest..screening {:.1}s / limit 60s",
            mui.len(),
            took.as_secs_f64()
        ),
    }
}

fn end_to_end(p: &Pipeline, truth: &GroundTruth, took: Duration) -> Outcome {
    let events: Vec<&AnomalyEvent> = p.events().collect();
    let repaired = |e: &&&AnomalyEvent| e.status == EventStatus::Repaired;
    let spikes = truth
        .spikes
        .iter()
        .filter(|s| {
            events.iter().filter(repaired).any(|e| e.class == ErrorClass::Spike && overlaps(e, &s.key, s.span.first, s.span.last))
        })
        .count();
    let resets = truth
        .resets
        .iter()
        .filter(|r| events.iter().filter(repaired).any(|e| e.class == ErrorClass::Reset && overlaps(e, &r.key, r.at, r.at)))
        .count();
    let mui = truth
        .mui
        .iter()
        .filter(|m| {
            let repaired_event = events.iter().any(|e| {
                e.class == ErrorClass::Mui
                    && e.key == m.key
                    && e.status == EventStatus::Repaired
                    && matches!(e.proposed_repair, Some(RepairAction::ScaleSegment { .. }))
            });
            let proposal_ok = p.proposal(&m.key).is_some_and(|pr| {
                (pr.changepoint - m.changepoint).abs() <= 48 && pr.factor == 1.0 / m.factor && pr.segment == m.side
            });
            repaired_event && proposal_ok
        })
        .count();
    let dups = truth
        .duplicate_streams
        .iter()
        .filter(|d| {
            events.iter().any(|e| {
                e.class == ErrorClass::DuplicateStream && e.key == d.copy && e.related_key.as_ref() == Some(&d.original)
            })
        })
        .count();
    let quantized_ok = truth.quantized.iter().all(|q| {
        events.iter().any(|e| e.class == ErrorClass::Quantized && e.key == q.key && e.status == EventStatus::CarriedForward)
    });
    let reports = p.reports();
    let carried_row = reports.iter().filter(|r| r.phase >= 3).all(|r| {
        let c = r.counts(ErrorClass::Quantized);
        c.found > 0 && c.resolved == 0 && c.carried_forward == c.found
    });
    let balanced = reports.iter().all(|r| r.is_consistent());
    let pct = |a: usize, b: usize| if b == 0 { 100.0 } else { 100.0 * a as f64 / b as f64 };
    let pass = pct(spikes, truth.spikes.len()) >= 95.0
        && pct(mui, truth.mui.len()) >= 95.0
        && dups == truth.duplicate_streams.len()
        && resets == truth.resets.len()
        && quantized_ok
        && carried_row
        && balanced
        && took <= Duration::from_secs(300);
    Outcome {
        pass,
        detail: format!(
            "spikes {spikes}/{}, MUI {mui}/{}, duplicate streams {dups}/{}, resets {resets}/{}, quantized carried forward {} ({} streams), ledger balanced {balanced}; ingest..phase 5 {:.1}s / limit 300s",
            truth.spikes.len(),
            truth.mui.len(),
            truth.duplicate_streams.len(),
            truth.resets.len(),
            quantized_ok && carried_row,
            truth.quantized.len(),
            took.as_secs_f64()
        ),
    }
}

fn ranking_distortion(corpus: &Corpus, dirty: &[DataStream], cleaned: &[DataStream]) -> Outcome {
    let range = data_range(&corpus.clean).unwrap();
    let recall = |reference: &Ranking, streams: &[DataStream]| {
        recall_at_k(reference, &peak_ranking(streams, &range, 24, None).unwrap(), 100).unwrap()
    };
    let reference = peak_ranking(&corpus.clean, &range, 24, None).unwrap();
    let before = recall(&reference, dirty);
    let after = recall(&reference, cleaned);
    let only = |c: Corruption| recall(&reference, &generate(&corpus.plan.only(c)).amid);
    let (spikes, mui, resets) = (only(Corruption::Spikes), only(Corruption::Mui), only(Corruption::Resets));
    Outcome {
        pass: before < after && spikes < mui && mui < resets,
        detail: format!(
            "recall@100 dirty {before:.2} < cleaned {after:.2}; single corruption spikes {spikes:.2} < MUI {mui:.2} < resets {resets:.2}"
        ),
    }
}

fn small_plan(seed: u64, streams: usize) -> SyntheticPlan {
    let mut p = SyntheticPlan { seed, stream_count: streams, ..SyntheticPlan::default() };
    p.spikes.isolated = 6;
    p.spikes.bursts = 1;
    p.spikes.burst_meters = 3;
    p.spikes.decoys = 2;
    p.resets.count = 3;
    p.mui.rate = 0.1;
    p.duplicates.equal_records = 8;
    p.duplicates.conflicting_records = 4;
    p.duplicates.stream_fraction = 0.1;
    p.keys.orphans = 2;
    p.keys.ambiguous = 1;
    p
}

fn total_litres(streams: &[DataStream]) -> i64 {
    streams.iter().flat_map(|s| s.readings()).map(|r| r.value.litres()).sum()
}

fn integrity_on(streams: &[DataStream]) -> Vec<String> {
    let mut bad = Vec::new();
    let (once, events) = dedup_streams(streams.to_vec());
    let (twice, again) = dedup_streams(once.clone());
    if once != twice || !again.is_empty() {
        bad.push("dedup_streams not idempotent".to_string());
    }
    let by_key: HashMap<&CompositeKey, &DataStream> = streams.iter().map(|s| (&s.key, s)).collect();
    let removed: i64 = events.iter().map(|e| total_litres(&[by_key[&e.key].clone()])).sum();
    let copies_match = events
        .iter()
        .all(|e| by_key[&e.key].readings() == by_key[e.related_key.as_ref().unwrap()].readings());
    if total_litres(&once) + removed != total_litres(streams) || !copies_match {
        bad.push("dedup_streams changed litres".to_string());
    }

    let mut deduped = Vec::new();
    for s in &once {
        for policy in [ConflictPolicy::KeepFirst, ConflictPolicy::KeepMin, ConflictPolicy::DropBothMarkMissing] {
            let (out, _) = dedup_records(s.clone(), policy);
            let (out2, ev2) = dedup_records(out.clone(), policy);
            if out != out2 || !ev2.is_empty() || !out.has_unique_timestamps() {
                bad.push(format!("{}: dedup_records not idempotent", s.key));
            }
            let mut groups: BTreeMap<HourStamp, Vec<i64>> = BTreeMap::new();
            for r in s.readings() {
                groups.entry(r.at).or_default().push(r.value.litres());
            }
            let got: BTreeMap<HourStamp, i64> = out.readings().iter().map(|r| (r.at, r.value.litres())).collect();
            for (at, vals) in &groups {
                let conflicted = vals.iter().any(|v| *v != vals[0]);
                let want = match (conflicted, policy) {
                    (false, _) => Some(vals[0]),
                    (true, ConflictPolicy::KeepFirst) => Some(vals[0]),
                    (true, ConflictPolicy::KeepMin) => vals.iter().min().copied(),
                    (true, ConflictPolicy::DropBothMarkMissing) => None,
                };
                if got.get(at).copied() != want {
                    bad.push(format!("{} {at}: {policy} kept {:?}, expected {want:?}", s.key, got.get(at)));
                }
            }
            if policy == ConflictPolicy::DropBothMarkMissing {
                deduped.push(out);
            }
        }
    }

    let calendar = Calendar::from_streams(&deduped);
    let grid: Vec<HourStamp> = calendar.iter().collect();
    for s in &deduped {
        let c = gap_census(s, &calendar);
        let present: BTreeSet<HourStamp> =
            s.readings().iter().map(|r| r.at).filter(|t| grid.binary_search(t).is_ok()).collect();
        let missing: BTreeSet<HourStamp> = c.missing_timestamps.iter().copied().collect();
        let union: BTreeSet<HourStamp> = present.union(&missing).copied().collect();
        if !present.is_disjoint(&missing)
            || union.into_iter().collect::<Vec<_>>() != grid
            || c.present_count as usize != present.len()
            || c.expected_count as usize != grid.len()
        {
            bad.push(format!("{}: census is not a partition", s.key));
        }
    }
    bad
}

fn hydroclean(dir: &Path, args: &[&str], crash: Option<&str>) -> (bool, String) {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hydroclean"));
    c.current_dir(dir).arg("--store").arg("store").args(args).env_remove("HYDROCLEAN_CONFIG");
    match crash {
        Some(v) => c.env("HYDROCLEAN_CRASH", v),
        None => c.env_remove("HYDROCLEAN_CRASH"),
    };
    let o = c.output().expect("spawn hydroclean");
    (o.status.success(), String::from_utf8_lossy(&o.stdout).into_owned())
}

fn state_of(stdout: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(stdout).ok()?;
    v["state"].as_str().map(str::to_string)
}

/// Aborts the CLI inside or after one phase, resumes, and returns the final state hash.
fn crashed_run(dir: &Path, crash_at: &str) -> Result<String, String> {
    let truth = dir.join("data").join("truth.json");
    let truth = truth.to_str().unwrap();
    let data = dir.join("data");
    let (ok, _) = hydroclean(dir, &["ingest", "--inputs", data.to_str().unwrap()], None);
    if !ok {
        return Err("ingest failed".into());
    }
    let mut fired = false;
    for step in [&["clean", "--through", "4"][..], &["review", "auto", "--truth", truth], &["clean"]] {
        let (ok, _) = hydroclean(dir, step, Some(crash_at));
        if !ok {
            fired = true;
            break;
        }
    }
    if !fired {
        return Err(format!("{crash_at} never aborted"));
    }
    for step in [&["clean", "--through", "4"][..], &["review", "auto", "--truth", truth]] {
        if !hydroclean(dir, step, None).0 {
            return Err(format!("resume step {step:?} failed"));
        }
    }
    let (ok, out) = hydroclean(dir, &["clean"], None);
    match (ok, state_of(&out)) {
        (true, Some(h)) => Ok(h),
        _ => Err("final clean failed".into()),
    }
}

fn full_run(dir: &Path, truth: &GroundTruth, threads: usize) -> String {
    let (mut p, _) = Pipeline::ingest(config_for(dir, threads)).unwrap();
    p.run_through(4).unwrap();
    p.auto_review(truth, "auto", DateTime::UNIX_EPOCH).unwrap();
    p.run_phase(5).unwrap();
    p.state_hash()
}

fn integrity_properties() -> Outcome {
    let mut bad = Vec::new();
    let mut crashes = 0;
    for seed in 0..50u64 {
        let corpus = generate(&small_plan(1000 + seed, 24));
        for b in integrity_on(&corpus.amid) {
            bad.push(format!("seed {seed}: {b}"));
        }

        let reference = tempfile::tempdir().unwrap();
        corpus.write(&reference.path().join("data")).unwrap();
        let want = full_run(reference.path(), &corpus.truth, 0);

        let crashed = tempfile::tempdir().unwrap();
        corpus.write(&crashed.path().join("data")).unwrap();
        let stage = if seed % 2 == 0 { "after" } else { "before-commit" };
        let crash_at = format!("{stage}:{}", (seed / 2) % 6);
        match crashed_run(crashed.path(), &crash_at) {
            Ok(h) if h == want => crashes += 1,
            Ok(h) => bad.push(format!("seed {seed} {crash_at}: state {h} != {want}")),
            Err(e) => bad.push(format!("seed {seed}: {e}")),
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("50 corpora: idempotence, conservation, census partition; {crashes} aborted runs resumed to the same state")
        } else {
            bad[..bad.len().min(3)].join("; ")
        },
    }
}

fn determinism() -> Outcome {
    let corpus = generate(&small_plan(77, 150));
    let hashes: Vec<(usize, String)> = [1usize, 4, 16]
        .into_iter()
        .map(|t| {
            let dir = tempfile::tempdir().unwrap();
            corpus.write(&dir.path().join("data")).unwrap();
            (t, full_run(dir.path(), &corpus.truth, t))
        })
        .collect();
    let same = hashes.iter().all(|(_, h)| *h == hashes[0].1);
    Outcome {
        pass: same,
        detail: hashes.iter().map(|(t, h)| format!("{t} threads {}", &h[..16])).collect::<Vec<_>>().join(", "),
    }
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    results.push(check("WKT exactness", None, wkt_exactness));
    results.push(check("Peak oracle equivalence", Some(Duration::from_secs(30)), peak_oracle));
    default_corpus(&mut results);
    results.push(check("Integrity properties", None, integrity_properties));
    results.push(check("Determinism", None, determinism));
    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
