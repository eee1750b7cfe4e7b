//! `ts,pctr,pcvr,market_price,click,conversion`, comma separated, one header
//! line, no quoting.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use super::DataError;
use crate::types::BidRecord;

pub const HEADER: [&str; 6] = ["ts", "pctr", "pcvr", "market_price", "click", "conversion"];

/// Streaming reader; holds one row at a time. Stops after the first error.
pub struct CanonicalReader<R: Read> {
    inner: csv::Reader<R>,
    row: csv::StringRecord,
    last_ts: Option<i64>,
    header_checked: bool,
    failed: bool,
}

impl<R: Read> CanonicalReader<R> {
    pub fn new(reader: R) -> Self {
        let inner = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(reader);
        Self {
            inner,
            row: csv::StringRecord::new(),
            last_ts: None,
            header_checked: false,
            failed: false,
        }
    }

    fn check_header(&mut self) -> Result<(), DataError> {
        let header = self.inner.headers().map_err(|e| DataError::from_csv(e, 1))?;
        if header.iter().ne(HEADER) {
            return Err(DataError::MalformedRow {
                line: 1,
                reason: format!("expected header `{}`", HEADER.join(",")),
            });
        }
        Ok(())
    }

    fn next_record(&mut self) -> Result<Option<BidRecord>, DataError> {
        if !self.header_checked {
            self.header_checked = true;
            self.check_header()?;
        }
        let line_guess = self.inner.position().line() + 1;
        if !self.inner.read_record(&mut self.row).map_err(|e| DataError::from_csv(e, line_guess))? {
            return Ok(None);
        }
        let line = self.row.position().map_or(line_guess, |p| p.line());
        let record = parse_row(&self.row, line)?;
        if self.last_ts.is_some_and(|prev| record.ts < prev) {
            return Err(DataError::NonMonotonicTimestamp { line });
        }
        self.last_ts = Some(record.ts);
        Ok(Some(record))
    }
}

impl<R: Read> Iterator for CanonicalReader<R> {
    type Item = Result<BidRecord, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.next_record() {
            Ok(r) => r.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T, DataError> {
    row[idx].parse().map_err(|_| DataError::MalformedRow {
        line,
        reason: format!("bad {name} `{}`", &row[idx]),
    })
}

fn flag(row: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<bool, DataError> {
    match &row[idx] {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(DataError::MalformedRow {
            line,
            reason: format!("{name} must be 0 or 1, got `{other}`"),
        }),
    }
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<BidRecord, DataError> {
    let record = BidRecord {
        ts: field(row, 0, "ts", line)?,
        pctr: field(row, 1, "pctr", line)?,
        pcvr: field(row, 2, "pcvr", line)?,
        market_price: field(row, 3, "market_price", line)?,
        click: flag(row, 4, "click", line)?,
        conversion: flag(row, 5, "conversion", line)?,
    };
    record.validate().map_err(|v| DataError::from_violation(line, v))?;
    Ok(record)
}

pub fn parse_canonical<R: Read>(reader: R) -> CanonicalReader<R> {
    CanonicalReader::new(reader)
}

/// Loads a whole canonical file into memory.
pub fn read_canonical_file(path: impl AsRef<Path>) -> Result<Vec<BidRecord>, DataError> {
    let file = File::open(path)?;
    parse_canonical(BufReader::new(file)).collect()
}

/// Rounds to six decimals and prints the shortest representation.
pub fn format_probability(p: f64) -> String {
    let q = (p * 1e6).round() / 1e6;
    format!("{q}")
}

/// Streaming writer: header on construction, one line per record.
/// Probabilities are rounded to six decimals.
pub struct CanonicalWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> CanonicalWriter<W> {
    pub fn new(writer: W) -> Result<Self, DataError> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        inner.write_record(HEADER).map_err(|e| DataError::from_csv(e, 0))?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &BidRecord) -> Result<(), DataError> {
        self.inner
            .write_record([
                r.ts.to_string(),
                format_probability(r.pctr),
                format_probability(r.pcvr),
                r.market_price.to_string(),
                u8::from(r.click).to_string(),
                u8::from(r.conversion).to_string(),
            ])
            .map_err(|e| DataError::from_csv(e, 0))
    }

    pub fn finish(mut self) -> Result<(), DataError> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_canonical<'a, W: Write>(
    writer: W,
    records: impl IntoIterator<Item = &'a BidRecord>,
) -> Result<(), DataError> {
    let mut out = CanonicalWriter::new(writer)?;
    for r in records {
        out.write(r)?;
    }
    out.finish()
}
