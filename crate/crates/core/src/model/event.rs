use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CompositeKey, HourRange, ModelError, Reading, Span};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    DuplicateStream,
    DuplicateRecord,
    Gap,
    Spike,
    Reset,
    Quantized,
    Mui,
    Conflict,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 8] = [
        ErrorClass::DuplicateStream,
        ErrorClass::DuplicateRecord,
        ErrorClass::Conflict,
        ErrorClass::Gap,
        ErrorClass::Spike,
        ErrorClass::Reset,
        ErrorClass::Quantized,
        ErrorClass::Mui,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::DuplicateStream => "duplicate_stream",
            ErrorClass::DuplicateRecord => "duplicate_record",
            ErrorClass::Gap => "gap",
            ErrorClass::Spike => "spike",
            ErrorClass::Reset => "reset",
            ErrorClass::Quantized => "quantized",
            ErrorClass::Mui => "mui",
            ErrorClass::Conflict => "conflict",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorClass {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        ErrorClass::ALL
            .into_iter()
            .find(|c| c.name() == s || (s == "spikes" && *c == ErrorClass::Spike))
            .ok_or(ModelError::BadClass(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Detected,
    Queued,
    Repaired,
    Rejected,
    CarriedForward,
}

impl EventStatus {
    pub fn can_become(self, next: EventStatus) -> bool {
        use EventStatus::*;
        matches!(
            (self, next),
            (Detected, Queued) | (Detected, Repaired) | (Detected, CarriedForward) | (Queued, Repaired) | (Queued, Rejected)
        )
    }

    pub fn is_resolved(self) -> bool {
        matches!(self, EventStatus::Repaired | EventStatus::Rejected)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepairAction {
    ReplaceWithNeighborhoodMean,
    ScaleSegment { segment: HourRange, factor: f64 },
    DropRecord,
    None,
}

impl RepairAction {
    pub fn scale(segment: HourRange, factor: f64) -> Result<Self, ModelError> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(ModelError::BadFactor(factor));
        }
        if segment.is_empty() {
            return Err(ModelError::EmptySpan);
        }
        Ok(RepairAction::ScaleSegment { segment, factor })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(pub u64);

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A detected error instance travelling from detectors to repair and review.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub id: EventId,
    pub key: CompositeKey,
    pub class: ErrorClass,
    pub span: Span,
    /// Class-specific: STD2M for MUI, step for quantized, peak value (m³) for spikes.
    pub score: f64,
    pub proposed_repair: Option<RepairAction>,
    pub status: EventStatus,
    /// Phase that first surfaced the event.
    pub detected_phase: Option<u8>,
    /// Phase in which it was repaired or rejected.
    pub resolved_phase: Option<u8>,
    /// Survivor of a duplicate-stream group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub related_key: Option<CompositeKey>,
    /// Readings as they were before the applied repair.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub originals: Vec<Reading>,
}

impl AnomalyEvent {
    pub fn new(key: CompositeKey, class: ErrorClass, span: Span, score: f64) -> Self {
        AnomalyEvent {
            id: EventId(0),
            key,
            class,
            span,
            score,
            proposed_repair: None,
            status: EventStatus::Detected,
            detected_phase: None,
            resolved_phase: None,
            related_key: None,
            originals: Vec::new(),
        }
    }

    pub fn with_status(mut self, status: EventStatus) -> Self {
        self.status = status;
        self
    }

    pub fn with_repair(mut self, action: RepairAction) -> Self {
        self.proposed_repair = Some(action);
        self
    }

    pub fn transition(&mut self, next: EventStatus) -> Result<(), ModelError> {
        if !self.status.can_become(next) {
            return Err(ModelError::BadTransition { from: self.status, to: next });
        }
        self.status = next;
        Ok(())
    }

    /// Natural identity used to merge the same finding across phases.
    pub fn identity(&self) -> (CompositeKey, ErrorClass, Span) {
        (self.key.clone(), self.class, self.span)
    }
}
