//! Progressive cleaning of interval smart-meter data.
//!
//! The crate ingests hourly consumption (AMID), meter metadata (MIND) and
//! billing records (BILD), reconstructs a composite key across them, removes
//! duplicate streams and records, detects and repairs context-dependent errors
//! (spikes, counter resets, quantized meters, meter-unit inconsistencies), and
//! measures how much each error class distorts peak-contributor rankings.
//!
//! Stages are orchestrated by [`pipeline`] as six ordered phases whose state
//! is persisted to an on-disk store between runs.

pub mod detect;
pub mod ingestion;
pub mod integrity;
pub mod metrics;
pub mod model;
pub mod peaks;
pub mod pipeline;
pub mod repair;
pub mod synth;

pub use model::*;
