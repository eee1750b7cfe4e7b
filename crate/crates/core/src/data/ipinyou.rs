//! Adapter from iPinYou-style delimited logs to the canonical format.
//!
//! The raw season logs carry no predictions; the caller is expected to have
//! joined pCTR/pCVR columns (scored offline) and click/conversion labels onto
//! each bid row. The paying price is passed through unchanged.

use std::io::{Read, Write};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::canonical::CanonicalWriter;
use super::DataError;
use crate::types::BidRecord;

/// Zero-based column positions in the raw rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub ts: usize,
    pub pctr: usize,
    pub pcvr: usize,
    pub market_price: usize,
    pub click: usize,
    pub conversion: usize,
}

impl ColumnMap {
    /// Positions of the canonical layout.
    pub const IDENTITY: ColumnMap = ColumnMap {
        ts: 0,
        pctr: 1,
        pcvr: 2,
        market_price: 3,
        click: 4,
        conversion: 5,
    };

    fn entries(&self) -> [(&'static str, usize); 6] {
        [
            ("ts", self.ts),
            ("pctr", self.pctr),
            ("pcvr", self.pcvr),
            ("market_price", self.market_price),
            ("click", self.click),
            ("conversion", self.conversion),
        ]
    }

    /// Parses `ts=0,pctr=5,...`; every column must be given.
    pub fn parse(spec: &str) -> Result<Self, DataError> {
        let mut slots: [Option<usize>; 6] = [None; 6];
        let names = ["ts", "pctr", "pcvr", "market_price", "click", "conversion"];
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, idx) = part
                .split_once('=')
                .ok_or_else(|| DataError::Config(format!("column map entry `{part}` is not name=index")))?;
            let pos = names
                .iter()
                .position(|n| *n == name.trim())
                .ok_or_else(|| DataError::Config(format!("unknown column `{name}`")))?;
            let idx = idx
                .trim()
                .parse()
                .map_err(|_| DataError::Config(format!("bad column index `{idx}`")))?;
            slots[pos] = Some(idx);
        }
        let get = |i: usize| slots[i].ok_or_else(|| DataError::Config(format!("column map lacks `{}`", names[i])));
        Ok(ColumnMap {
            ts: get(0)?,
            pctr: get(1)?,
            pcvr: get(2)?,
            market_price: get(3)?,
            click: get(4)?,
            conversion: get(5)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    /// Integer milliseconds since epoch.
    #[default]
    EpochMillis,
    /// `yyyyMMddHHmmssSSS` as in the iPinYou logs, read as UTC.
    IpinyouDigits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpinyouOptions {
    pub columns: ColumnMap,
    pub delimiter: u8,
    pub has_header: bool,
    pub ts_format: TimestampFormat,
}

impl Default for IpinyouOptions {
    fn default() -> Self {
        Self {
            columns: ColumnMap::IDENTITY,
            delimiter: b'\t',
            has_header: false,
            ts_format: TimestampFormat::IpinyouDigits,
        }
    }
}

fn parse_ts(raw: &str, format: TimestampFormat, line: u64) -> Result<i64, DataError> {
    let bad = || DataError::MalformedRow {
        line,
        reason: format!("bad timestamp `{raw}`"),
    };
    match format {
        TimestampFormat::EpochMillis => raw.parse().map_err(|_| bad()),
        TimestampFormat::IpinyouDigits => {
            if raw.len() != 17 || !raw.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let dt = NaiveDateTime::parse_from_str(&raw[..14], "%Y%m%d%H%M%S").map_err(|_| bad())?;
            let millis: i64 = raw[14..].parse().map_err(|_| bad())?;
            Ok(dt.and_utc().timestamp_millis() + millis)
        }
    }
}

/// Nonzero counts are treated as a positive label.
fn parse_label(raw: &str, name: &str, line: u64) -> Result<bool, DataError> {
    raw.trim().parse::<u64>().map(|v| v > 0).map_err(|_| DataError::MalformedRow {
        line,
        reason: format!("bad {name} `{raw}`"),
    })
}

fn num<T: std::str::FromStr>(raw: &str, name: &str, line: u64) -> Result<T, DataError> {
    raw.trim().parse().map_err(|_| DataError::MalformedRow {
        line,
        reason: format!("bad {name} `{raw}`"),
    })
}

/// Streams `raw` through the column map and writes canonical rows. Returns
/// the number of records written.
pub fn convert_ipinyou<R: Read, W: Write>(raw: R, out: W, options: &IpinyouOptions) -> Result<u64, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(options.has_header)
        .flexible(true)
        .quoting(false)
        .from_reader(raw);
    let cols = options.columns;
    let needed = cols.entries().iter().map(|(_, i)| *i).max().unwrap_or(0) + 1;
    if options.has_header {
        let width = reader.headers().map_err(|e| DataError::from_csv(e, 1))?.len();
        check_width(&cols, width)?;
    }

    let mut out = CanonicalWriter::new(out)?;
    let mut row = csv::StringRecord::new();
    let mut last_ts: Option<i64> = None;
    let mut count = 0u64;
    loop {
        let guess = reader.position().line() + 1;
        if !reader.read_record(&mut row).map_err(|e| DataError::from_csv(e, guess))? {
            break;
        }
        let line = row.position().map_or(guess, |p| p.line());
        if row.len() < needed {
            check_width(&cols, row.len())?;
        }
        let record = BidRecord {
            ts: parse_ts(row[cols.ts].trim(), options.ts_format, line)?,
            pctr: num(&row[cols.pctr], "pctr", line)?,
            pcvr: num(&row[cols.pcvr], "pcvr", line)?,
            market_price: num(&row[cols.market_price], "market_price", line)?,
            click: parse_label(&row[cols.click], "click", line)?,
            conversion: parse_label(&row[cols.conversion], "conversion", line)?,
        };
        record.validate().map_err(|v| DataError::from_violation(line, v))?;
        if last_ts.is_some_and(|p| record.ts < p) {
            return Err(DataError::NonMonotonicTimestamp { line });
        }
        last_ts = Some(record.ts);
        out.write(&record)?;
        count += 1;
    }
    out.finish()?;
    Ok(count)
}

fn check_width(cols: &ColumnMap, width: usize) -> Result<(), DataError> {
    for (name, idx) in cols.entries() {
        if idx >= width {
            return Err(DataError::Config(format!(
                "column `{name}` mapped to index {idx} but rows have {width} fields"
            )));
        }
    }
    Ok(())
}
