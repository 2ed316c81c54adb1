//! Headered CSV series: one row per time step, columns `<prefix>_1..<prefix>_N`.

use std::io::Read;
use std::path::Path;

use nalgebra::DVector;

use crate::CliError;

/// One parsed row, or the reason it was rejected.
pub type Row = Result<DVector<f64>, CliError>;

/// Reads a series whose header must be exactly `prefix_1, ..., prefix_N`.
/// Returns every row in order so callers can decide how far to trust a
/// partially corrupt file; use [`read_series`] to fail on the first bad row.
pub fn read_rows<R: Read>(reader: R, prefix: &str) -> Result<Vec<Row>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| CliError::data(format!("line 1: {e}")))?
        .clone();
    let width = header.len();
    let expected: Vec<String> = (1..=width).map(|i| format!("{prefix}_{i}")).collect();
    if width == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(CliError::data(format!(
            "line 1: header must be {prefix}_1..{prefix}_N, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let row = match record {
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Err(CliError::data(format!("line {line}: {e}")))
            }
            Ok(rec) => {
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                parse_record(&rec, width, line)
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

fn parse_record(rec: &csv::StringRecord, width: usize, line: u64) -> Row {
    if rec.len() != width {
        return Err(CliError::data(format!(
            "line {line}: expected {width} fields, found {}",
            rec.len()
        )));
    }
    let mut v = DVector::zeros(width);
    for (j, field) in rec.iter().enumerate() {
        let x: f64 = field
            .parse()
            .map_err(|_| CliError::data(format!("line {line}, column {}: `{field}` is not a number", j + 1)))?;
        if !x.is_finite() {
            return Err(CliError::data(format!("line {line}, column {}: non-finite value", j + 1)));
        }
        v[j] = x;
    }
    Ok(v)
}

pub fn read_series<R: Read>(reader: R, prefix: &str) -> Result<Vec<DVector<f64>>, CliError> {
    read_rows(reader, prefix)?.into_iter().collect()
}

pub fn read_series_file(path: &Path, prefix: &str) -> Result<Vec<DVector<f64>>, CliError> {
    read_series(open(path)?, prefix)
}

pub fn open(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))
}

/// Writes a headered table. Values use the shortest representation that
/// parses back to the same `f64`.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}
