//! CSV tables. The header row names every column with its unit suffix
//! (`x_meters`, `b_tesla`, ...); readers check it before parsing.

use std::path::Path;

use crate::circuit::ComparisonRow;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_file};

/// Header of a field line cut.
pub const LINE_CUT_HEADER: [&str; 2] = ["x_meters", "b_tesla"];
/// Header of a current-density profile along a transect.
pub const PROFILE_HEADER: [&str; 2] = ["s_meters", "k_normal_ampere_per_meter"];
/// Header of the comparison report.
pub const REPORT_HEADER: [&str; 7] = [
    "tap",
    "expected_ampere",
    "reference_ampere",
    "conventional_ampere",
    "qdm_ampere",
    "error_vs_conventional_percent",
    "error_vs_expected_percent",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Encodes rows of string cells under `header`.
pub fn encode_rows<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Format {
        path: "<csv>".into(),
        message: e.to_string(),
    };
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(row.iter().map(|c| c.as_ref())).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::Format {
        path: "<csv>".into(),
        message: e.to_string(),
    })
}

/// Writes numeric columns of equal length; values use shortest round-trip
/// formatting.
pub fn write_columns(path: &Path, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    if header.len() != columns.len() {
        return Err(Error::InvalidParam("header and column counts differ".into()));
    }
    let n = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidParam("columns have different lengths".into()));
    }
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| columns.iter().map(|c| c[i].to_string()).collect())
        .collect();
    atomic_write(path, &encode_rows(header, &rows)?)
}

/// Reads numeric columns, requiring the exact `header`.
pub fn read_columns(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let bytes = read_file(path)?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let found: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(Error::format(
            path,
            format!("header must be `{}`, found `{}`", header.join(","), found.join(",")),
        ));
    }
    let mut cols = vec![Vec::new(); header.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: bad number `{cell}`", line + 2)))?;
            cols[c].push(v);
        }
    }
    Ok(cols)
}

pub fn write_line_cut(path: &Path, samples: &[(f64, f64)]) -> Result<()> {
    let x: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let b: Vec<f64> = samples.iter().map(|s| s.1).collect();
    write_columns(path, &LINE_CUT_HEADER, &[&x, &b])
}

pub fn read_line_cut(path: &Path) -> Result<Vec<(f64, f64)>> {
    let cols = read_columns(path, &LINE_CUT_HEADER)?;
    Ok(cols[0].iter().copied().zip(cols[1].iter().copied()).collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Report rows in SI units at full precision; missing values are empty.
pub fn encode_report(rows: &[ComparisonRow]) -> Result<Vec<u8>> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.tap.clone(),
                r.expected.to_string(),
                opt(r.reference),
                opt(r.conventional),
                r.qdm.to_string(),
                opt(r.pct_error_vs_conventional),
                opt(r.pct_error_vs_expected),
            ]
        })
        .collect();
    encode_rows(&REPORT_HEADER, &cells)
}
