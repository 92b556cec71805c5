//! Stays, events, vocabularies and the on-disk event format.

mod manifest;
mod parse;
mod types;
mod vocab;

use std::path::Path;

pub use manifest::{
    load_dataset, write_dataset, Dataset, DatasetManifest, VariableBounds, MANIFEST_FILE,
    SCHEMA_VERSION,
};
pub use parse::{parse_stay_file, parse_stay_file_with, serialize_stay, ParseOptions, HEADER_TAG};
pub use types::{age_bucket, ClinicalEvent, SourceType, StayRecord, UNKNOWN_AGE_BUCKET};
pub use vocab::{
    build_vocabulary, decode_event, encode_stay, Attribute, EncodedEvent, EncodedStay, TokenTable,
    Vocabulary, CLS, MASK, PAD, RESERVED, UNK,
};

#[derive(Debug, thiserror::Error)]
pub enum EventDataError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: unknown source_type `{value}` (expected chart, input or procedure)")]
    UnknownSourceType { line: usize, value: String },
    #[error("line {line}: negative offset_days {offset}")]
    NegativeOffset { line: usize, offset: f64 },
    #[error("{file}: {source}")]
    InFile {
        file: String,
        #[source]
        source: Box<EventDataError>,
    },
    #[error("duplicate stay_id `{0}`")]
    DuplicateStay(String),
    #[error("no cleaning bounds for numeric variable `{0}`")]
    MissingBounds(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EventDataError {
    fn in_file(self, file: &Path) -> Self {
        EventDataError::InFile {
            file: file.display().to_string(),
            source: Box::new(self),
        }
    }
}
