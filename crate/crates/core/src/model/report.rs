use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ErrorClass;

pub const PHASE_NAMES: [&str; 6] = [
    "duplicate stream removal",
    "dataset unification",
    "duplicate record elimination",
    "peak analysis",
    "statistical rule-based filtering",
    "manual repair using ground truth",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub found: u64,
    pub resolved: u64,
    pub carried_forward: u64,
}

impl ClassCounts {
    pub fn balanced(&self) -> bool {
        self.resolved + self.carried_forward == self.found
    }
}

/// Per-phase ledger row set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: u8,
    pub operation_name: String,
    pub streams_in: u64,
    pub streams_out: u64,
    pub classes: BTreeMap<ErrorClass, ClassCounts>,
}

impl PhaseReport {
    pub fn new(phase: u8, streams_in: u64, streams_out: u64) -> Self {
        PhaseReport {
            phase,
            operation_name: PHASE_NAMES.get(phase as usize).copied().unwrap_or("unknown").to_string(),
            streams_in,
            streams_out,
            classes: ErrorClass::ALL.iter().map(|c| (*c, ClassCounts::default())).collect(),
        }
    }

    pub fn counts(&self, class: ErrorClass) -> ClassCounts {
        self.classes.get(&class).copied().unwrap_or_default()
    }

    pub fn is_consistent(&self) -> bool {
        self.streams_out <= self.streams_in && self.classes.values().all(ClassCounts::balanced)
    }
}

/// Status cell for one class after one phase, in the spirit of a cleaning ledger.
pub fn ledger_cell(counts: ClassCounts, class: ErrorClass, final_phase: bool) -> &'static str {
    if counts.found == 0 {
        "-"
    } else if counts.carried_forward == 0 {
        "solved"
    } else if class == ErrorClass::Gap && final_phase {
        "approximable"
    } else if counts.resolved > 0 {
        "some resolved"
    } else {
        "=>"
    }
}

/// Plain-text table with one row per class and one column per phase.
pub fn render_ledger(reports: &[PhaseReport]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<18}", "phase");
    for r in reports {
        let _ = write!(out, "{:>22}", r.phase);
    }
    out.push('\n');
    for class in ErrorClass::ALL {
        let _ = write!(out, "{:<18}", class.name());
        for (i, r) in reports.iter().enumerate() {
            let c = r.counts(class);
            let cell = format!("{} ({}/{})", ledger_cell(c, class, i + 1 == reports.len() && r.phase == 5), c.resolved, c.found);
            let _ = write!(out, "{cell:>22}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<18}", "streams");
    for r in reports {
        let _ = write!(out, "{:>22}", r.streams_out);
    }
    out.push('\n');
    out
}
