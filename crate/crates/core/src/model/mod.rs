//! Domain types shared by every stage of the cleaning pipeline.

mod consumption;
mod event;
mod key;
mod ranking;
mod records;
mod report;
mod stream;
mod time;

pub use consumption::{Consumption, LITRES_PER_M3};
pub use event::{AnomalyEvent, ErrorClass, EventId, EventStatus, RepairAction};
pub use key::{normalize_field, CompositeKey};
pub use ranking::{RankEntry, Ranking};
pub use records::{BillingRecord, ConsumerCategory, MainCategory, MeterInfo, MeterReading, ResolutionFlag};
pub use report::{ledger_cell, render_ledger, ClassCounts, PhaseReport, PHASE_NAMES};
pub use stream::{DataStream, Reading};
pub use time::{HourRange, HourStamp, MonthGrid, Span};

use chrono::NaiveDate;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("timestamp {0} is not on an hour boundary")]
    OffHourTimestamp(String),
    #[error("unparseable timestamp {0:?}")]
    BadTimestamp(String),
    #[error("unparseable consumption {0:?}")]
    BadConsumption(String),
    #[error("invalid composite key {0:?}")]
    BadKey(String),
    #[error("unknown consumer category {0:?}")]
    BadCategory(String),
    #[error("unknown resolution flag {0:?}")]
    BadFlag(String),
    #[error("unknown error class {0:?}")]
    BadClass(String),
    #[error("billing period {0} .. {1} is empty")]
    BadBillingPeriod(NaiveDate, NaiveDate),
    #[error("negative billed consumption {0}")]
    NegativeBilling(Consumption),
    #[error("scale factor must be finite and positive, got {0}")]
    BadFactor(f64),
    #[error("empty span")]
    EmptySpan,
    #[error("event cannot move from {from:?} to {to:?}")]
    BadTransition { from: EventStatus, to: EventStatus },
}
