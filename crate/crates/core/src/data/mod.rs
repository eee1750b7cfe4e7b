//! Bid logs: the canonical text format, the iPinYou adapter and a seeded
//! synthetic generator.

mod canonical;
mod ipinyou;
mod synthetic;

pub use canonical::{
    format_probability, parse_canonical, read_canonical_file, write_canonical, CanonicalReader, CanonicalWriter, HEADER,
};
pub use ipinyou::{convert_ipinyou, ColumnMap, IpinyouOptions, TimestampFormat};
pub use synthetic::{generate_synthetic, SynthConfig, SyntheticLog};

use crate::types::RecordViolation;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: timestamp earlier than previous row")]
    NonMonotonicTimestamp { line: u64 },
    #[error("line {line}: conversion without click")]
    LabelViolation { line: u64 },
    #[error("line {line}: {violation}")]
    InvalidRecord { line: u64, violation: RecordViolation },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    pub fn line(&self) -> Option<u64> {
        match self {
            DataError::MalformedRow { line, .. }
            | DataError::NonMonotonicTimestamp { line }
            | DataError::LabelViolation { line }
            | DataError::InvalidRecord { line, .. } => Some(*line),
            _ => None,
        }
    }

    pub(crate) fn from_violation(line: u64, violation: RecordViolation) -> Self {
        match violation {
            RecordViolation::ConversionWithoutClick => DataError::LabelViolation { line },
            v => DataError::InvalidRecord { line, violation: v },
        }
    }

    pub(crate) fn from_csv(err: csv::Error, line: u64) -> Self {
        if err.is_io_error() {
            match err.into_kind() {
                csv::ErrorKind::Io(e) => DataError::Io(e),
                _ => unreachable!(),
            }
        } else {
            let line = err.position().map_or(line, |p| p.line());
            DataError::MalformedRow {
                line,
                reason: err.to_string(),
            }
        }
    }
}
