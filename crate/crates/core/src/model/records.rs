use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{CompositeKey, Consumption, HourRange, HourStamp, ModelError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MainCategory {
    #[serde(rename = "SFR")]
    SingleFamily,
    #[serde(rename = "MFR")]
    MultiFamily,
    #[serde(rename = "IND")]
    Industrial,
    #[serde(rename = "COM")]
    Commercial,
    #[serde(rename = "INS")]
    Institutional,
    #[serde(rename = "AGR")]
    Agricultural,
}

impl MainCategory {
    pub const ALL: [MainCategory; 6] = [
        MainCategory::SingleFamily,
        MainCategory::MultiFamily,
        MainCategory::Industrial,
        MainCategory::Commercial,
        MainCategory::Institutional,
        MainCategory::Agricultural,
    ];

    pub fn code(self) -> &'static str {
        match self {
            MainCategory::SingleFamily => "SFR",
            MainCategory::MultiFamily => "MFR",
            MainCategory::Industrial => "IND",
            MainCategory::Commercial => "COM",
            MainCategory::Institutional => "INS",
            MainCategory::Agricultural => "AGR",
        }
    }
}

impl fmt::Display for MainCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for MainCategory {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        MainCategory::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::BadCategory(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConsumerCategory {
    pub main: MainCategory,
    pub sub_code: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResolutionFlag {
    #[serde(rename = "H")]
    Hourly,
    #[serde(rename = "D")]
    Daily,
}

impl FromStr for ResolutionFlag {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "H" | "h" => Ok(ResolutionFlag::Hourly),
            "D" | "d" => Ok(ResolutionFlag::Daily),
            other => Err(ModelError::BadFlag(other.to_string())),
        }
    }
}

impl ResolutionFlag {
    pub fn code(self) -> &'static str {
        match self {
            ResolutionFlag::Hourly => "H",
            ResolutionFlag::Daily => "D",
        }
    }
}

/// One AMID row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterReading {
    pub key: CompositeKey,
    pub interval_end: HourStamp,
    pub consumption: Consumption,
    pub resolution: ResolutionFlag,
}

/// One MIND row: time-invariant meter and customer metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeterInfo {
    pub key: CompositeKey,
    pub unit: String,
    pub category: ConsumerCategory,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub postal_code: String,
}

/// One BILD row: a billed register difference over a multi-week period.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillingRecord {
    pub key: CompositeKey,
    pub unit: String,
    pub period_start: NaiveDate,
    pub period_end: NaiveDate,
    pub start_count: i64,
    pub end_count: i64,
    pub consumption: Consumption,
}

impl BillingRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.period_start >= self.period_end {
            return Err(ModelError::BadBillingPeriod(self.period_start, self.period_end));
        }
        if self.consumption.is_negative() {
            return Err(ModelError::NegativeBilling(self.consumption));
        }
        Ok(())
    }

    /// Hourly stamps covered: days `period_start` up to but excluding `period_end`.
    pub fn hours(&self) -> HourRange {
        HourRange::new(HourStamp::first_of_day(self.period_start), HourStamp::first_of_day(self.period_end))
    }
}
