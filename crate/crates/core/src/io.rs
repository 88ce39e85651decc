//! Plot-ready CSV exchange format: `time_us,site,nbar,sem`.
//!
//! Times are microseconds on disk and seconds in memory. Values round-trip
//! losslessly (shortest-representation float formatting).

use std::io::{Read, Write};

use thiserror::Error;

use crate::estimation::{EstimationError, Sample, TimeSeries};
use crate::protocol::DetectionRecord;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema violation at row {row}: {message}")]
    Schema { row: usize, message: String },
    #[error(transparent)]
    Series(#[from] EstimationError),
}

pub const SERIES_HEADER: [&str; 4] = ["time_us", "site", "nbar", "sem"];

/// Write one row per sample, series in the given order.
pub fn write_series_csv<W: Write>(writer: W, series: &[TimeSeries]) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(SERIES_HEADER)?;
    for s in series {
        for sample in s.samples() {
            out.write_record(&[
                format_float(sample.time * 1e6),
                s.site.to_string(),
                format_float(sample.nbar),
                format_float(sample.sem),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Detection records as CSV rows, with the time column taken from `times`
/// (one value per record, e.g. the swept coupling duration).
pub fn write_records_csv<W: Write>(
    writer: W,
    records: &[DetectionRecord],
    times: &[f64],
) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(SERIES_HEADER)?;
    for (record, &time) in records.iter().zip(times) {
        out.write_record(&[
            format_float(time * 1e6),
            record.site.to_string(),
            format_float(record.nbar),
            format_float(record.sem),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Parse a series CSV, grouping rows by site (ascending site order).
/// Rows of one site must be time-ordered.
pub fn read_series_csv<R: Read>(reader: R) -> Result<Vec<TimeSeries>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = rdr.headers()?;
        if headers.len() != 4
            || headers
                .iter()
                .zip(SERIES_HEADER)
                .any(|(a, b)| !a.eq_ignore_ascii_case(b))
        {
            return Err(IoError::Schema {
                row: 1,
                message: format!(
                    "expected header {}, got {}",
                    SERIES_HEADER.join(","),
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
    }
    let mut by_site: std::collections::BTreeMap<usize, Vec<Sample>> =
        std::collections::BTreeMap::new();
    for (idx, row) in rdr.records().enumerate() {
        let row_no = idx + 2; // header is row 1
        let record = row?;
        if record.len() != 4 {
            return Err(IoError::Schema {
                row: row_no,
                message: format!("expected 4 columns, got {}", record.len()),
            });
        }
        let parse_f64 = |field: usize, name: &str| -> Result<f64, IoError> {
            record[field].parse::<f64>().map_err(|_| IoError::Schema {
                row: row_no,
                message: format!("column {name} is not a number: {:?}", &record[field]),
            })
        };
        let time_us = parse_f64(0, "time_us")?;
        let site = record[1].parse::<usize>().map_err(|_| IoError::Schema {
            row: row_no,
            message: format!("column site is not an index: {:?}", &record[1]),
        })?;
        let nbar = parse_f64(2, "nbar")?;
        let sem = parse_f64(3, "sem")?;
        if sem < 0.0 {
            return Err(IoError::Schema {
                row: row_no,
                message: "sem must be non-negative".into(),
            });
        }
        by_site.entry(site).or_default().push(Sample {
            time: time_us * 1e-6,
            nbar,
            sem,
        });
    }
    if by_site.is_empty() {
        return Err(IoError::Schema {
            row: 2,
            message: "no data rows".into(),
        });
    }
    let mut series = Vec::with_capacity(by_site.len());
    for (site, samples) in by_site {
        series.push(TimeSeries::new(site, samples)?);
    }
    Ok(series)
}

/// Shortest representation that parses back to the same f64.
pub fn format_float(x: f64) -> String {
    let mut s = format!("{x}");
    if s.parse::<f64>() != Ok(x) {
        s = format!("{x:e}");
    }
    s
}
