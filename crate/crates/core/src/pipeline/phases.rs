//! Bodies of the six phases. Each reads the current state and returns what
//! changed; committing is left to the caller.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{
    classify_mui, detect_quantized, detect_resets, detect_spikes, monthly_std, screen_mui, std2m, MuiVerdict,
};
use crate::ingestion::{attach_billing, drop_unmatched, resolve_keys, JoinReport};
use crate::integrity::{dedup_records, dedup_streams, gap_census, gap_events, Calendar, GapCensus};
use crate::model::{
    AnomalyEvent, BillingRecord, CompositeKey, DataStream, EventStatus, MonthGrid, Ranking, RepairAction, Span,
};
use crate::peaks::{peak_window, top_k_contributors, PeakResult};
use crate::repair::{propose_mui_repair, repair_spike, MuiProposal};

use super::{Config, Pipeline, PipelineError};

pub const JOIN_FILE: &str = "join_report.json";
pub const BILLING_FILE: &str = "billing.json";
pub const CALENDAR_FILE: &str = "calendar.json";
pub const CENSUS_FILE: &str = "gap_census.json";
pub const PEAKS_FILE: &str = "peaks.json";
pub const SCREENING_FILE: &str = "screening.json";
pub const PROPOSALS_FILE: &str = "proposals.json";

#[derive(Default)]
pub(super) struct PhaseOutput {
    pub streams: Option<Vec<DataStream>>,
    pub events: Vec<AnomalyEvent>,
    pub artifacts: Vec<(&'static str, Vec<u8>)>,
    pub billing: Option<Vec<BillingRecord>>,
    pub calendar: Option<Calendar>,
    pub proposals: Option<BTreeMap<CompositeKey, MuiProposal>>,
}

impl PhaseOutput {
    fn artifact<T: Serialize>(&mut self, name: &'static str, value: &T) -> Result<(), PipelineError> {
        let bytes = serde_json::to_vec(value).map_err(|e| PipelineError::Io(std::io::Error::other(e)))?;
        self.artifacts.push((name, bytes));
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinSummary {
    pub report: JoinReport,
    pub dropped: Vec<CompositeKey>,
    pub billing_linked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakSummary {
    pub peak: PeakResult,
    pub ranking: Ranking,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Screening {
    pub std2m: Option<f64>,
    pub verdict: Option<MuiVerdict>,
}

/// Findings of the statistical sweep on one stream.
#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub events: Vec<AnomalyEvent>,
    pub proposal: Option<MuiProposal>,
    pub screening: Option<Screening>,
}

/// Quantization check, reset and spike repair, then MUI screening.
///
/// Spikes are not searched on quantized streams: their coarse steps look like
/// spikes to the neighborhood test. MUI events are queued for review, with a
/// repair proposal when `billing` supports a confident one.
pub fn sweep_stream(stream: &mut DataStream, billing: &[BillingRecord], grid: &MonthGrid, cfg: &Config) -> SweepOutcome {
    let mut out = SweepOutcome::default();
    let quantized = detect_quantized(stream, &cfg.quantized);

    let resets = detect_resets(stream);
    let flagged: Vec<Span> = resets.iter().map(|e| e.span).collect();
    for mut e in resets {
        if let Err(err) = repair_spike(stream, &mut e, cfg.spikes.neighborhood_hours, &flagged) {
            tracing::warn!(key = %stream.key, %err, "reset left unrepaired");
        }
        out.events.push(e);
    }
    if quantized.is_empty() {
        let spikes = detect_spikes(stream, &cfg.spikes);
        let flagged: Vec<Span> = spikes.iter().map(|e| e.span).collect();
        for mut e in spikes {
            if let Err(err) = repair_spike(stream, &mut e, cfg.spikes.neighborhood_hours, &flagged) {
                tracing::warn!(key = %stream.key, %err, "spike left unrepaired");
            }
            out.events.push(e);
        }
    }
    out.events.extend(quantized.into_iter().map(|e| e.with_status(EventStatus::CarriedForward)));

    let score = std2m(&stream.key, &monthly_std(stream, grid)).ok();
    out.screening = Some(Screening { std2m: score, verdict: score.map(|v| classify_mui(v, &cfg.mui)) });
    if let Some(mut e) = screen_mui(stream, grid, &cfg.mui) {
        e.status = EventStatus::Queued;
        if !billing.is_empty() {
            match propose_mui_repair(stream, billing, &cfg.search) {
                Ok(p) => {
                    e.proposed_repair = RepairAction::scale(p.range(stream), p.factor).ok();
                    out.proposal = Some(p);
                }
                Err(err) => tracing::debug!(key = %stream.key, %err, "no MUI proposal"),
            }
        }
        out.events.push(e);
    }
    out
}

pub(super) fn run(p: &Pipeline, phase: u8) -> Result<PhaseOutput, PipelineError> {
    match phase {
        0 => phase0(p),
        1 => phase1(p),
        2 => phase2(p),
        3 => phase3(p),
        4 => phase4(p),
        5 => Ok(PhaseOutput { streams: Some(p.streams.clone()), ..Default::default() }),
        _ => unreachable!("phase checked by caller"),
    }
}

fn phase0(p: &Pipeline) -> Result<PhaseOutput, PipelineError> {
    let (kept, events) = dedup_streams(p.streams.clone());
    Ok(PhaseOutput { streams: Some(kept), events, ..Default::default() })
}

fn phase1(p: &Pipeline) -> Result<PhaseOutput, PipelineError> {
    let keys: BTreeSet<CompositeKey> = p.streams.iter().map(|s| s.key.clone()).collect();
    let r = &p.reference;
    let (mapping, report) = resolve_keys(&keys, &r.mind, &r.bild, p.cfg.join_tier);
    let (kept, dropped) = drop_unmatched(&mapping, &r.mind, p.streams.clone());
    let (billing, _) = attach_billing(&r.mind, &r.bild, p.cfg.join_tier);
    let mut out = PhaseOutput::default();
    out.artifact(JOIN_FILE, &JoinSummary { report, dropped, billing_linked: billing.len() })?;
    out.artifact(BILLING_FILE, &billing)?;
    out.billing = Some(billing);
    out.streams = Some(kept);
    Ok(out)
}

fn phase2(p: &Pipeline) -> Result<PhaseOutput, PipelineError> {
    let policy = p.cfg.conflict_policy;
    let (streams, mut events): (Vec<DataStream>, Vec<Vec<AnomalyEvent>>) =
        p.streams.clone().into_par_iter().map(|s| dedup_records(s, policy)).unzip();
    let calendar = Calendar::from_streams(&streams);
    let census: Vec<GapCensus> = streams.par_iter().map(|s| gap_census(s, &calendar)).collect();
    for c in &census {
        events.push(gap_events(c).into_iter().map(|e| e.with_status(EventStatus::CarriedForward)).collect());
    }
    let mut out = PhaseOutput::default();
    out.artifact(CALENDAR_FILE, &calendar)?;
    let incomplete: Vec<&GapCensus> = census.iter().filter(|c| !c.is_complete()).collect();
    out.artifact(CENSUS_FILE, &incomplete)?;
    out.events = events.into_iter().flatten().collect();
    out.calendar = Some(calendar);
    out.streams = Some(streams);
    Ok(out)
}

fn phase3(p: &Pipeline) -> Result<PhaseOutput, PipelineError> {
    let calendar = p.calendar()?;
    let comp = p.cfg.peaks.compensate_gaps.then_some(&calendar);
    let mut summaries = Vec::new();
    if !p.streams.is_empty() {
        for &w in &p.cfg.peaks.windows {
            let peak = peak_window(&p.streams, &calendar.range, w, comp)
                .map_err(|e| PipelineError::Phase { phase: 3, reason: e.to_string() })?;
            let ranking = top_k_contributors(&p.streams, &peak.window, p.cfg.peaks.top_k, comp)
                .map_err(|e| PipelineError::Phase { phase: 3, reason: e.to_string() })?;
            summaries.push(PeakSummary { peak, ranking });
        }
    }
    // inspect the top contributors on a scratch copy; nothing is changed here
    let top: BTreeSet<&CompositeKey> = summaries.iter().flat_map(|s| s.ranking.keys()).collect();
    let grid = MonthGrid::covering(&calendar.range);
    let events: Vec<AnomalyEvent> = p
        .streams
        .par_iter()
        .filter(|s| top.contains(&s.key))
        .flat_map_iter(|s| {
            let mut scratch = s.clone();
            sweep_stream(&mut scratch, &[], &grid, &p.cfg).events.into_iter().map(|mut e| {
                e.status = EventStatus::Detected;
                e.proposed_repair = None;
                e.originals.clear();
                e
            })
        })
        .collect();
    let mut out = PhaseOutput { events, ..Default::default() };
    out.artifact(PEAKS_FILE, &summaries)?;
    Ok(out)
}

fn phase4(p: &Pipeline) -> Result<PhaseOutput, PipelineError> {
    let calendar = p.calendar()?;
    let grid = MonthGrid::covering(&calendar.range);
    let swept: Vec<(DataStream, SweepOutcome)> = p
        .streams
        .par_iter()
        .map(|s| {
            let billing = p.billing_for(&s.key);
            let mut s = s.clone();
            let o = sweep_stream(&mut s, billing, &grid, &p.cfg);
            (s, o)
        })
        .collect();
    let mut out = PhaseOutput::default();
    let mut proposals = BTreeMap::new();
    let mut screening = BTreeMap::new();
    let mut streams = Vec::with_capacity(swept.len());
    for (s, o) in swept {
        out.events.extend(o.events);
        if let Some(pr) = o.proposal {
            proposals.insert(s.key.clone(), pr);
        }
        if let Some(sc) = o.screening {
            screening.insert(s.key.clone(), sc);
        }
        streams.push(s);
    }
    out.artifact(SCREENING_FILE, &screening)?;
    out.artifact(PROPOSALS_FILE, &proposals)?;
    out.proposals = Some(proposals);
    out.streams = Some(streams);
    Ok(out)
}
