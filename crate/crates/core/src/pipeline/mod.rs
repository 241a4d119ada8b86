//! The six progressive cleaning phases over a persistent store, and the
//! review operations that feed manual repair.

mod config;
mod phases;
mod store;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::{classify_mui, monthly_std, std2m, MuiVerdict};
use crate::ingestion::{group_streams, parse_dataset, Dataset, IngestError, JoinTier, Schema};
use crate::integrity::{Calendar, ConflictPolicy};
use crate::model::{
    AnomalyEvent, BillingRecord, CompositeKey, ConsumerCategory, DataStream, ErrorClass, EventId, EventStatus, MeterInfo,
    MonthGrid, PhaseReport, RepairAction,
};
use crate::peaks::data_range;
use crate::repair::{apply_verdict, scale_segment, Decision, MuiProposal, RepairError, Verdict};
use crate::synth::GroundTruth;

pub use config::{Config, Inputs, PeakConfig, ENV_PREFIX};
pub use phases::{
    sweep_stream, JoinSummary, PeakSummary, Screening, SweepOutcome, BILLING_FILE, CALENDAR_FILE, CENSUS_FILE,
    JOIN_FILE, PEAKS_FILE, PROPOSALS_FILE, SCREENING_FILE,
};
pub use store::{
    decode_stream, encode_stream, read_snapshot, write_snapshot, Journal, StoreError, StoreState, EVENTS_FILE,
    REPORTS_FILE, STATE_FILE, VERDICTS_FILE,
};

pub const LAST_PHASE: u8 = 5;
pub const RAW_SNAPSHOT: &str = "raw";
pub const REFERENCE_FILE: &str = "reference.json";
pub const INGEST_FILE: &str = "ingest.json";
pub const SETTINGS_FILE: &str = "settings.json";
/// `after:N` aborts right after phase N commits; `before-commit:N` aborts
/// once phase N has written everything except the state file.
pub const CRASH_ENV: &str = "HYDROCLEAN_CRASH";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("phase {requested} cannot run now (last completed: {})", completed.map_or("none".to_string(), |c| c.to_string()))]
    PhaseOrder { requested: u8, completed: Option<u8> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no store at {0}; run ingest first")]
    NotInitialized(PathBuf),
    #[error("a store already exists at {0}")]
    AlreadyInitialized(PathBuf),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error("unknown event {0}")]
    UnknownEvent(EventId),
    #[error("unknown stream {0}")]
    UnknownStream(CompositeKey),
    #[error("review opens once phase 4 is complete")]
    ReviewClosed,
    #[error("phase {phase}: {reason}")]
    Phase { phase: u8, reason: String },
    #[error("thread pool: {0}")]
    Threads(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::PhaseOrder { .. } => 3,
            PipelineError::Config(_) | PipelineError::Ingest(_) => 2,
            PipelineError::Repair(RepairError::BadVerdict(_)) => 2,
            _ => 1,
        }
    }

    /// Short machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::PhaseOrder { .. } => "phase_order_violation",
            PipelineError::Config(_) => "invalid_config",
            PipelineError::NotInitialized(_) => "not_initialized",
            PipelineError::AlreadyInitialized(_) => "already_initialized",
            PipelineError::Ingest(_) => "ingest_failed",
            PipelineError::Store(_) | PipelineError::Io(_) => "store_error",
            PipelineError::Repair(e) => match e {
                RepairError::AlreadyRepaired(_) => "already_repaired",
                RepairError::NotQueued(..) => "not_queued",
                RepairError::UnknownEvent(_) => "unknown_event",
                RepairError::WrongClass(..) => "wrong_class",
                RepairError::BadVerdict(_) => "bad_verdict",
                _ => "repair_failed",
            },
            PipelineError::UnknownEvent(_) => "unknown_event",
            PipelineError::UnknownStream(_) => "unknown_stream",
            PipelineError::ReviewClosed => "review_closed",
            PipelineError::Phase { .. } => "phase_failed",
            PipelineError::Threads(_) => "threads",
        }
    }
}

/// MIND and BILD as ingested.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub mind: Vec<MeterInfo>,
    pub bild: Vec<BillingRecord>,
}

/// Options fixed per store because they change what phases 1 and 2 produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settings {
    pub join_tier: JoinTier,
    pub conflict_policy: ConflictPolicy,
}

impl Settings {
    fn of(cfg: &Config) -> Self {
        Settings { join_tier: cfg.join_tier, conflict_policy: cfg.conflict_policy }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub amid_rows: usize,
    pub mind_rows: usize,
    pub bild_rows: usize,
    pub rejected_rows: usize,
    pub daily_rows: usize,
    pub streams: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub verdict: Verdict,
    /// The event after the verdict was applied.
    pub event: AnomalyEvent,
}

/// One queued event as a reviewer sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub event: AnomalyEvent,
    pub proposal: Option<MuiProposal>,
    pub std2m: Option<f64>,
    pub verdict: Option<MuiVerdict>,
    pub clean_below: f64,
    pub dirty_above: f64,
    pub category: Option<ConsumerCategory>,
    pub unit: Option<String>,
}

pub struct Pipeline {
    root: PathBuf,
    cfg: Config,
    state: StoreState,
    streams: Vec<DataStream>,
    events: BTreeMap<EventId, AnomalyEvent>,
    reports: Vec<PhaseReport>,
    reference: Reference,
    billing: BTreeMap<CompositeKey, Vec<BillingRecord>>,
    calendar: Option<Calendar>,
    proposals: BTreeMap<CompositeKey, MuiProposal>,
    event_log: Journal,
    verdict_log: Journal,
    report_log: Journal,
    pool: Arc<rayon::ThreadPool>,
}

fn thread_pool(threads: usize) -> Result<Arc<rayon::ThreadPool>, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Arc::new)
        .map_err(|e| PipelineError::Threads(e.to_string()))
}

fn crash_hook(stage: &str, phase: u8) {
    if std::env::var(CRASH_ENV).is_ok_and(|v| v == format!("{stage}:{phase}")) {
        eprintln!("{CRASH_ENV}: aborting {stage} phase {phase}");
        std::process::abort();
    }
}

fn rejected(d: &Dataset) -> usize {
    d.rejected().len()
}

impl Pipeline {
    /// Parses the three inputs named in `cfg` into a fresh store.
    pub fn ingest(cfg: Config) -> Result<(Pipeline, IngestSummary), PipelineError> {
        let root = cfg.store.clone();
        if root.join(STATE_FILE).exists() {
            return Err(PipelineError::AlreadyInitialized(root));
        }
        let pool = thread_pool(cfg.threads)?;
        let (amid, mind, bild) = pool.install(|| {
            let (a, (m, b)) = rayon::join(
                || parse_dataset(&cfg.inputs.amid, Schema::Amid),
                || rayon::join(|| parse_dataset(&cfg.inputs.mind, Schema::Mind), || parse_dataset(&cfg.inputs.bild, Schema::Bild)),
            );
            Ok::<_, IngestError>((a?, m?, b?))
        })?;
        let mut summary = IngestSummary {
            amid_rows: amid.record_count(),
            mind_rows: mind.record_count(),
            bild_rows: bild.record_count(),
            rejected_rows: rejected(&amid) + rejected(&mind) + rejected(&bild),
            ..Default::default()
        };
        for (name, d) in [("amid", &amid), ("mind", &mind), ("bild", &bild)] {
            for r in d.rejected().iter().take(20) {
                tracing::warn!(table = name, line = r.line, reason = %r.reason, "rejected row");
            }
        }
        let (Dataset::Amid(amid), Dataset::Mind(mind), Dataset::Bild(bild)) = (amid, mind, bild) else {
            unreachable!("schemas requested above");
        };
        let (streams, daily) = group_streams(amid.records);
        summary.daily_rows = daily;
        summary.streams = streams.len();

        fs::create_dir_all(&root)?;
        let reference = Reference { mind: mind.records, bild: bild.records };
        store::write_json(&root.join(REFERENCE_FILE), &reference)?;
        store::write_json(&root.join(INGEST_FILE), &summary)?;
        store::write_json(&root.join(SETTINGS_FILE), &Settings::of(&cfg))?;
        pool.install(|| write_snapshot(&root, RAW_SNAPSHOT, &streams, 0))?;
        for f in [EVENTS_FILE, VERDICTS_FILE, REPORTS_FILE] {
            fs::write(root.join(f), b"")?;
        }
        let state = StoreState { snapshot: RAW_SNAPSHOT.into(), ..Default::default() };
        store::write_json(&root.join(STATE_FILE), &state)?;
        Ok((Pipeline::open(cfg)?, summary))
    }

    /// Reopens a store, discarding anything an interrupted run left uncommitted.
    ///
    /// Join tier and conflict policy come from the store, not from `cfg`.
    pub fn open(mut cfg: Config) -> Result<Pipeline, PipelineError> {
        let root = cfg.store.clone();
        let state_path = root.join(STATE_FILE);
        if !state_path.exists() {
            return Err(PipelineError::NotInitialized(root));
        }
        let state: StoreState = store::read_json(&state_path)?;
        if root.join(SETTINGS_FILE).exists() {
            let settings: Settings = store::read_json(&root.join(SETTINGS_FILE))?;
            cfg.join_tier = settings.join_tier;
            cfg.conflict_policy = settings.conflict_policy;
        }
        let pool = thread_pool(cfg.threads)?;
        let (event_log, event_records) = Journal::open::<AnomalyEvent>(&root.join(EVENTS_FILE), state.events)?;
        let (verdict_log, verdicts) = Journal::open::<VerdictRecord>(&root.join(VERDICTS_FILE), state.verdicts)?;
        let (report_log, reports) = Journal::open::<PhaseReport>(&root.join(REPORTS_FILE), state.reports)?;
        let (mut streams, manifest) = pool.install(|| read_snapshot(&root, &state.snapshot))?;
        for rec in verdicts.iter().skip(manifest.verdicts_applied as usize) {
            replay(&mut streams, &rec.event);
        }
        let events = event_records.into_iter().map(|e| (e.id, e)).collect();
        let reference: Reference = store::read_json(&root.join(REFERENCE_FILE))?;
        let optional = |name: &str| root.join(name).exists().then(|| root.join(name));
        let billing_list: Vec<BillingRecord> = match optional(BILLING_FILE) {
            Some(p) if state.phase_completed >= Some(1) => store::read_json(&p)?,
            _ => Vec::new(),
        };
        let calendar = match optional(CALENDAR_FILE) {
            Some(p) if state.phase_completed >= Some(2) => Some(store::read_json(&p)?),
            _ => None,
        };
        let proposals = match optional(PROPOSALS_FILE) {
            Some(p) if state.phase_completed >= Some(4) => store::read_json(&p)?,
            _ => BTreeMap::new(),
        };
        store::prune_snapshots(&root, &[state.snapshot.as_str()])?;
        Ok(Pipeline {
            root,
            cfg,
            state,
            streams,
            events,
            reports,
            reference,
            billing: group_billing(billing_list),
            calendar,
            proposals,
            event_log,
            verdict_log,
            report_log,
            pool,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Changes the conflict policy of a store whose records are not deduplicated yet.
    pub fn set_conflict_policy(&mut self, policy: ConflictPolicy) -> Result<(), PipelineError> {
        if self.cfg.conflict_policy == policy {
            return Ok(());
        }
        if self.state.phase_completed >= Some(2) {
            return Err(PipelineError::Config(format!(
                "conflict policy is fixed once phase 2 has run (this store used {})",
                self.cfg.conflict_policy
            )));
        }
        self.cfg.conflict_policy = policy;
        store::write_json(&self.root.join(SETTINGS_FILE), &Settings::of(&self.cfg))?;
        Ok(())
    }

    pub fn phase_completed(&self) -> Option<u8> {
        self.state.phase_completed
    }

    pub fn streams(&self) -> &[DataStream] {
        &self.streams
    }

    pub fn stream(&self, key: &CompositeKey) -> Option<&DataStream> {
        self.streams.binary_search_by(|s| s.key.cmp(key)).ok().map(|i| &self.streams[i])
    }

    pub fn events(&self) -> impl Iterator<Item = &AnomalyEvent> {
        self.events.values()
    }

    pub fn event(&self, id: EventId) -> Option<&AnomalyEvent> {
        self.events.get(&id)
    }

    pub fn reports(&self) -> &[PhaseReport] {
        &self.reports
    }

    pub fn reference(&self) -> &Reference {
        &self.reference
    }

    pub fn proposal(&self, key: &CompositeKey) -> Option<&MuiProposal> {
        self.proposals.get(key)
    }

    /// Linked billing records of `key`; empty before phase 1.
    pub fn billing_for(&self, key: &CompositeKey) -> &[BillingRecord] {
        self.billing.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The hourly calendar found in phase 2, or the data range before that.
    pub fn calendar(&self) -> Result<Calendar, PipelineError> {
        match &self.calendar {
            Some(c) => Ok(c.clone()),
            None => data_range(&self.streams)
                .map(|r| Calendar::new(r, Vec::new()))
                .ok_or(PipelineError::Phase { phase: 2, reason: "no readings".into() }),
        }
    }

    pub fn month_grid(&self) -> Result<MonthGrid, PipelineError> {
        Ok(MonthGrid::covering(&self.calendar()?.range))
    }

    /// Runs the phases after the last completed one up to `last`.
    pub fn run_through(&mut self, last: u8) -> Result<Vec<PhaseReport>, PipelineError> {
        let first = self.state.phase_completed.map_or(0, |c| c + 1);
        (first..=last).map(|p| self.run_phase(p)).collect()
    }

    /// Runs `phase`, which must follow the last completed one. Asking again for
    /// a completed phase returns its stored report and changes nothing.
    pub fn run_phase(&mut self, phase: u8) -> Result<PhaseReport, PipelineError> {
        let completed = self.state.phase_completed;
        if let Some(c) = completed {
            if phase <= c {
                return Ok(self.reports[phase as usize].clone());
            }
        }
        if phase > LAST_PHASE || phase != completed.map_or(0, |c| c + 1) {
            return Err(PipelineError::PhaseOrder { requested: phase, completed });
        }
        let streams_in = self.streams.len() as u64;
        let pool = Arc::clone(&self.pool);
        let out = pool.install(|| phases::run(self, phase))?;
        tracing::info!(phase, events = out.events.len(), "phase computed");

        for (name, bytes) in &out.artifacts {
            store::write_atomic(&self.root.join(name), bytes)?;
        }
        let snapshot = match &out.streams {
            Some(s) => {
                let name = format!("snap-{phase}");
                pool.install(|| write_snapshot(&self.root, &name, s, self.verdict_log.lines()))?;
                name
            }
            None => self.state.snapshot.clone(),
        };
        let records = self.merge_events(out.events, phase);
        for e in &records {
            self.event_log.append(e)?;
        }
        let streams_out = out.streams.as_ref().map_or(streams_in, |s| s.len() as u64);
        let report = ledger(self.events.values(), phase, streams_in, streams_out);
        self.report_log.append(&report)?;
        self.event_log.sync()?;
        self.report_log.sync()?;
        crash_hook("before-commit", phase);

        self.state.phase_completed = Some(phase);
        self.state.snapshot = snapshot;
        self.commit()?;
        crash_hook("after", phase);

        if let Some(s) = out.streams {
            self.streams = s;
        }
        if let Some(b) = out.billing {
            self.billing = group_billing(b);
        }
        if let Some(c) = out.calendar {
            self.calendar = Some(c);
        }
        if let Some(p) = out.proposals {
            self.proposals = p;
        }
        self.reports.push(report.clone());
        store::prune_snapshots(&self.root, &[self.state.snapshot.as_str()])?;
        Ok(report)
    }

    fn commit(&mut self) -> Result<(), PipelineError> {
        self.state.events = self.event_log.lines();
        self.state.verdicts = self.verdict_log.lines();
        self.state.reports = self.report_log.lines();
        store::write_json(&self.root.join(STATE_FILE), &self.state)?;
        Ok(())
    }

    /// Folds findings into the event set and returns the records to journal.
    ///
    /// A finding with the identity of an earlier event updates it; new ones
    /// are numbered after the largest id in (key, class, span) order.
    fn merge_events(&mut self, mut found: Vec<AnomalyEvent>, phase: u8) -> Vec<AnomalyEvent> {
        let known: BTreeMap<_, EventId> = self.events.values().map(|e| (e.identity(), e.id)).collect();
        found.sort_by(|a, b| a.identity().cmp(&b.identity()));
        let mut next = self.events.keys().next_back().map_or(1, |id| id.0 + 1);
        let mut records = Vec::new();
        for mut e in found {
            match known.get(&e.identity()).and_then(|id| self.events.get(id)) {
                Some(old) => {
                    e.id = old.id;
                    e.detected_phase = old.detected_phase;
                    e.resolved_phase = old.resolved_phase;
                    if old.status.is_resolved() {
                        continue;
                    }
                }
                None => {
                    e.id = EventId(next);
                    next += 1;
                    e.detected_phase = Some(phase);
                }
            }
            if e.status.is_resolved() && e.resolved_phase.is_none() {
                e.resolved_phase = Some(phase);
            }
            if self.events.get(&e.id) != Some(&e) {
                self.events.insert(e.id, e.clone());
                records.push(e);
            }
        }
        records
    }

    /// Events awaiting a reviewer, in id order.
    pub fn queue(&self) -> Vec<QueueItem> {
        let grid = self.month_grid().ok();
        self.events
            .values()
            .filter(|e| e.status == EventStatus::Queued)
            .map(|e| {
                let stream = self.stream(&e.key);
                let score = match (stream, &grid) {
                    (Some(s), Some(g)) => std2m(&s.key, &monthly_std(s, g)).ok(),
                    _ => None,
                };
                QueueItem {
                    event: e.clone(),
                    proposal: self.proposals.get(&e.key).cloned(),
                    std2m: score,
                    verdict: score.map(|v| classify_mui(v, &self.cfg.mui)),
                    clean_below: self.cfg.mui.clean_below,
                    dirty_above: self.cfg.mui.dirty_above,
                    category: stream.and_then(|s| s.category.clone()),
                    unit: stream.and_then(|s| s.unit_label.clone()),
                }
            })
            .collect()
    }

    /// Applies a reviewer's verdict and makes it durable before returning.
    pub fn submit_verdict(&mut self, verdict: Verdict) -> Result<AnomalyEvent, PipelineError> {
        if self.state.phase_completed < Some(4) {
            return Err(PipelineError::ReviewClosed);
        }
        let mut event = self.events.get(&verdict.event_id).cloned().ok_or(PipelineError::UnknownEvent(verdict.event_id))?;
        let idx = self
            .streams
            .binary_search_by(|s| s.key.cmp(&event.key))
            .map_err(|_| PipelineError::UnknownStream(event.key.clone()))?;
        let mut stream = self.streams[idx].clone();
        let proposal = self.proposals.get(&stream.key);
        apply_verdict(&mut stream, &mut event, &verdict, proposal, &self.cfg.search)?;
        event.resolved_phase = Some(LAST_PHASE);
        self.verdict_log.append(&VerdictRecord { verdict, event: event.clone() })?;
        self.event_log.append(&event)?;
        self.verdict_log.sync()?;
        self.event_log.sync()?;
        self.commit()?;
        self.streams[idx] = stream;
        self.events.insert(event.id, event.clone());
        Ok(event)
    }

    /// Decides every queued MUI event from planted truth: accept when the
    /// stream really carries a unit error and a proposal exists, else reject.
    pub fn auto_review(
        &mut self,
        truth: &GroundTruth,
        reviewer: &str,
        at: DateTime<Utc>,
    ) -> Result<Vec<AnomalyEvent>, PipelineError> {
        if self.state.phase_completed < Some(4) {
            return Err(PipelineError::ReviewClosed);
        }
        let planted = truth.mui_keys();
        let queued: Vec<AnomalyEvent> =
            self.queue().into_iter().map(|q| q.event).filter(|e| e.class == ErrorClass::Mui).collect();
        let mut decided = Vec::with_capacity(queued.len());
        for e in queued {
            let accept = planted.contains(&e.key) && self.proposals.contains_key(&e.key);
            let verdict = Verdict {
                key: e.key.clone(),
                event_id: e.id,
                decision: if accept { Decision::Accept } else { Decision::Reject },
                edited_changepoint: None,
                edited_factor: None,
                edited_segment: None,
                reviewer: reviewer.to_string(),
                decided_at: at,
            };
            decided.push(self.submit_verdict(verdict)?);
        }
        Ok(decided)
    }

    /// SHA-256 over every stream and every event, independent of how the
    /// work was scheduled.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.state.phase_completed.map_or(255, |p| p)]);
        for s in &self.streams {
            h.update(s.key.to_string().as_bytes());
            h.update([0]);
            h.update((s.len() as u64).to_le_bytes());
            for r in s.readings() {
                h.update(r.at.hours().to_le_bytes());
                h.update(r.value.litres().to_le_bytes());
            }
        }
        for e in self.events.values() {
            h.update(serde_json::to_vec(e).expect("event serializes"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn read_artifact<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T, PipelineError> {
        Ok(store::read_json(&self.root.join(name))?)
    }
}

fn group_billing(list: Vec<BillingRecord>) -> BTreeMap<CompositeKey, Vec<BillingRecord>> {
    let mut map: BTreeMap<CompositeKey, Vec<BillingRecord>> = BTreeMap::new();
    for b in list {
        map.entry(b.key.clone()).or_default().push(b);
    }
    for v in map.values_mut() {
        v.sort_by_key(|b| b.period_start);
    }
    map
}

fn replay(streams: &mut [DataStream], event: &AnomalyEvent) {
    if event.status != EventStatus::Repaired {
        return;
    }
    if let Some(RepairAction::ScaleSegment { segment, factor }) = &event.proposed_repair {
        if let Ok(i) = streams.binary_search_by(|s| s.key.cmp(&event.key)) {
            scale_segment(&mut streams[i], segment, *factor);
        }
    }
}

/// Found, resolved and carried-forward counts per class for `phase`.
///
/// An event counts as found in every phase from the one that surfaced it up
/// to the one that resolved it.
pub fn ledger<'a>(
    events: impl IntoIterator<Item = &'a AnomalyEvent>,
    phase: u8,
    streams_in: u64,
    streams_out: u64,
) -> PhaseReport {
    let mut report = PhaseReport::new(phase, streams_in, streams_out);
    for e in events {
        let Some(d) = e.detected_phase else { continue };
        if d > phase || e.resolved_phase.is_some_and(|r| r < phase) {
            continue;
        }
        let c = report.classes.entry(e.class).or_default();
        c.found += 1;
        if e.resolved_phase == Some(phase) {
            c.resolved += 1;
        } else {
            c.carried_forward += 1;
        }
    }
    report
}
