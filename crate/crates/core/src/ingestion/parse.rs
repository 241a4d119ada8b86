//! CSV readers for the three input datasets.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::model::{
    BillingRecord, CompositeKey, ConsumerCategory, Consumption, DataStream, HourStamp, MeterInfo, MeterReading, ModelError,
    Reading, ResolutionFlag,
};

pub const AMID_HEADER: [&str; 6] = ["account_id", "meter_id", "device_id", "interval_end", "consumption_m3", "flag"];
pub const MIND_HEADER: [&str; 9] =
    ["account_id", "meter_id", "device_id", "unit", "category", "sub_code", "latitude", "longitude", "postal_code"];
pub const BILD_HEADER: [&str; 9] = [
    "account_id",
    "meter_id",
    "device_id",
    "unit",
    "period_start",
    "period_end",
    "start_count",
    "end_count",
    "consumption_m3",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schema {
    Amid,
    Mind,
    Bild,
}

impl Schema {
    pub fn header(self) -> &'static [&'static str] {
        match self {
            Schema::Amid => &AMID_HEADER,
            Schema::Mind => &MIND_HEADER,
            Schema::Bild => &BILD_HEADER,
        }
    }
}

/// A line that could not be turned into a record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub rejected: Vec<RejectedLine>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Amid(Parsed<MeterReading>),
    Mind(Parsed<MeterInfo>),
    Bild(Parsed<BillingRecord>),
}

impl Dataset {
    pub fn record_count(&self) -> usize {
        match self {
            Dataset::Amid(p) => p.records.len(),
            Dataset::Mind(p) => p.records.len(),
            Dataset::Bild(p) => p.records.len(),
        }
    }

    pub fn rejected(&self) -> &[RejectedLine] {
        match self {
            Dataset::Amid(p) => &p.rejected,
            Dataset::Mind(p) => &p.rejected,
            Dataset::Bild(p) => &p.rejected,
        }
    }
}

pub fn parse_dataset(path: &Path, schema: Schema) -> Result<Dataset, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::Open(path.display().to_string(), e))?;
    parse_reader(file, schema).map_err(|e| match e {
        IngestError::HeaderMismatch { expected, found, .. } => {
            IngestError::HeaderMismatch { path: path.display().to_string(), expected, found }
        }
        other => other,
    })
}

pub fn parse_reader<R: Read>(reader: R, schema: Schema) -> Result<Dataset, IngestError> {
    Ok(match schema {
        Schema::Amid => Dataset::Amid(parse_rows(reader, schema, amid_row)?),
        Schema::Mind => Dataset::Mind(parse_rows(reader, schema, mind_row)?),
        Schema::Bild => Dataset::Bild(parse_rows(reader, schema, bild_row)?),
    })
}

fn parse_rows<R: Read, T>(
    reader: R,
    schema: Schema,
    row: impl Fn(&csv::StringRecord) -> Result<T, ModelError>,
) -> Result<Parsed<T>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    let mut iter = rdr.records();

    let expected = schema.header();
    let header = match iter.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(IngestError::Csv(e.to_string())),
        None => {
            return Err(IngestError::HeaderMismatch {
                path: String::new(),
                expected: expected.join(","),
                found: String::new(),
            })
        }
    };
    let found: Vec<String> =
        header.iter().enumerate().map(|(i, f)| if i == 0 { f.trim_start_matches('\u{feff}') } else { f }.trim().to_string()).collect();
    if found.len() != expected.len() || found.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(IngestError::HeaderMismatch { path: String::new(), expected: expected.join(","), found: found.join(",") });
    }

    for result in iter {
        match result {
            Ok(rec) => {
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                if rec.len() != expected.len() {
                    rejected.push(RejectedLine {
                        line,
                        reason: format!("expected {} fields, found {}", expected.len(), rec.len()),
                    });
                    continue;
                }
                match row(&rec) {
                    Ok(r) => records.push(r),
                    Err(e) => rejected.push(RejectedLine { line, reason: e.to_string() }),
                }
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                rejected.push(RejectedLine { line, reason: e.to_string() });
            }
        }
    }
    Ok(Parsed { records, rejected })
}

fn key_of(rec: &csv::StringRecord) -> Result<CompositeKey, ModelError> {
    CompositeKey::new(&rec[0], &rec[1], &rec[2])
}

fn amid_row(rec: &csv::StringRecord) -> Result<MeterReading, ModelError> {
    Ok(MeterReading {
        key: key_of(rec)?,
        interval_end: HourStamp::parse(&rec[3])?,
        consumption: Consumption::parse_m3(&rec[4])?,
        resolution: rec[5].parse()?,
    })
}

fn optional_f64(s: &str) -> Result<Option<f64>, ModelError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| ModelError::BadConsumption(s.to_string()))
}

fn mind_row(rec: &csv::StringRecord) -> Result<MeterInfo, ModelError> {
    Ok(MeterInfo {
        key: key_of(rec)?,
        unit: rec[3].trim().to_string(),
        category: ConsumerCategory { main: rec[4].parse()?, sub_code: rec[5].trim().to_string() },
        latitude: optional_f64(&rec[6])?,
        longitude: optional_f64(&rec[7])?,
        postal_code: rec[8].trim().to_string(),
    })
}

fn date(s: &str) -> Result<NaiveDate, ModelError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| ModelError::BadTimestamp(s.to_string()))
}

fn count(s: &str) -> Result<i64, ModelError> {
    s.trim().parse().map_err(|_| ModelError::BadConsumption(s.to_string()))
}

fn bild_row(rec: &csv::StringRecord) -> Result<BillingRecord, ModelError> {
    let record = BillingRecord {
        key: key_of(rec)?,
        unit: rec[3].trim().to_string(),
        period_start: date(&rec[4])?,
        period_end: date(&rec[5])?,
        start_count: count(&rec[6])?,
        end_count: count(&rec[7])?,
        consumption: Consumption::parse_m3(&rec[8])?,
    };
    record.validate()?;
    Ok(record)
}

/// Groups hourly AMID rows into one stream per key, in key order.
///
/// Daily-resolution rows are not part of the hourly analysis and are counted
/// separately.
pub fn group_streams(readings: Vec<MeterReading>) -> (Vec<DataStream>, usize) {
    let mut by_key: BTreeMap<CompositeKey, Vec<Reading>> = BTreeMap::new();
    let mut daily = 0;
    for r in readings {
        if r.resolution == ResolutionFlag::Daily {
            daily += 1;
            continue;
        }
        by_key.entry(r.key).or_default().push(Reading::new(r.interval_end, r.consumption));
    }
    (by_key.into_iter().map(|(k, v)| DataStream::new(k, v)).collect(), daily)
}

pub fn write_amid<W: Write>(out: W, rows: impl IntoIterator<Item = MeterReading>) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AMID_HEADER)?;
    for r in rows {
        let [a, m, d] = r.key.fields();
        w.write_record([a, m, d, &r.interval_end.to_string(), &r.consumption.to_string(), r.resolution.code()])?;
    }
    w.flush()
}

/// Writes every reading of every stream as an hourly AMID row.
pub fn write_amid_streams<W: Write>(out: W, streams: &[DataStream]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(io::BufWriter::with_capacity(1 << 20, out));
    w.write_record(AMID_HEADER)?;
    let mut line = String::with_capacity(128);
    for s in streams {
        let [a, m, d] = s.key.fields();
        for r in s.readings() {
            line.clear();
            use std::fmt::Write as _;
            let _ = write!(line, "{}", r.value);
            w.write_record([a, m, d, &r.at.to_string(), &line, "H"])?;
        }
    }
    w.flush()
}

pub fn write_mind<W: Write>(out: W, rows: &[MeterInfo]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MIND_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let [a, m, d] = r.key.fields();
        w.write_record([
            a,
            m,
            d,
            &r.unit,
            r.category.main.code(),
            &r.category.sub_code,
            &opt(r.latitude),
            &opt(r.longitude),
            &r.postal_code,
        ])?;
    }
    w.flush()
}

pub fn write_bild<W: Write>(out: W, rows: &[BillingRecord]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BILD_HEADER)?;
    for r in rows {
        let [a, m, d] = r.key.fields();
        w.write_record([
            a,
            m,
            d,
            &r.unit,
            &r.period_start.format("%Y-%m-%d").to_string(),
            &r.period_end.format("%Y-%m-%d").to_string(),
            &r.start_count.to_string(),
            &r.end_count.to_string(),
            &r.consumption.to_string(),
        ])?;
    }
    w.flush()
}
