//! Reading the three input tables and reconstructing the composite key.

mod join;
mod parse;

pub use join::{
    attach_billing, drop_unmatched, field_match, key_match, resolve_keys, FieldMatch, JoinReport, JoinTier, KeyMapping,
    MIN_OVERLAP,
};
pub use parse::{
    group_streams, parse_dataset, parse_reader, write_amid, write_amid_streams, write_bild, write_mind, Dataset, Parsed,
    RejectedLine, Schema, AMID_HEADER, BILD_HEADER, MIND_HEADER,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {0}: {1}")]
    Open(String, #[source] std::io::Error),
    #[error("{path}: header mismatch, expected `{expected}`, found `{found}`")]
    HeaderMismatch { path: String, expected: String, found: String },
    #[error("csv: {0}")]
    Csv(String),
}
