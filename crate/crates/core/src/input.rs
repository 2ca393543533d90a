//! CSV readers for historical and future data.
//!
//! All files need a header row. Binomial data has two columns (successes,
//! failures), count data a single column, and mixed-model data a response
//! column plus one column per factor.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::data::{FactorColumn, MixedModelData};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

struct Table {
    header: Vec<String>,
    /// Records with their 1-based line numbers.
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table<R: Read>(reader: R, source: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::InvalidData(format!("{source}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::InvalidData(format!("{source}: missing header row")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::InvalidData(format!("{source}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(Error::InvalidData(format!("{source}: no data rows")));
    }
    Ok(Table { header, rows })
}

fn parse_count(source: &str, line: u64, column: &str, text: &str) -> Result<u64> {
    text.parse().map_err(|_| {
        Error::InvalidData(format!(
            "{source}, line {line}: column `{column}` needs a nonnegative integer, got `{text}`"
        ))
    })
}

fn expect_columns(table: &Table, source: &str, n: usize, what: &str) -> Result<()> {
    if table.header.len() != n {
        return Err(Error::InvalidData(format!(
            "{source}: {what} data needs exactly {n} column(s), found {}",
            table.header.len()
        )));
    }
    Ok(())
}

/// `(successes, failures)` pairs.
pub fn read_binomial<R: Read>(reader: R, source: &str) -> Result<Vec<(u64, u64)>> {
    let t = read_table(reader, source)?;
    expect_columns(&t, source, 2, "binomial")?;
    t.rows
        .iter()
        .map(|(line, r)| {
            Ok((
                parse_count(source, *line, &t.header[0], &r[0])?,
                parse_count(source, *line, &t.header[1], &r[1])?,
            ))
        })
        .collect()
}

/// Column name and counts.
pub fn read_counts<R: Read>(reader: R, source: &str) -> Result<(String, Vec<u64>)> {
    let t = read_table(reader, source)?;
    expect_columns(&t, source, 1, "count")?;
    let values = t
        .rows
        .iter()
        .map(|(line, r)| parse_count(source, *line, &t.header[0], &r[0]))
        .collect::<Result<_>>()?;
    Ok((t.header[0].clone(), values))
}

/// Mixed-model data; every column other than `response` is a factor.
pub fn read_mixed<R: Read>(reader: R, source: &str, response: &str) -> Result<MixedModelData> {
    let t = read_table(reader, source)?;
    let ycol = t.header.iter().position(|h| h == response).ok_or_else(|| {
        Error::InvalidData(format!("{source}: response column `{response}` not found"))
    })?;
    let mut y = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let v: f64 = r[ycol].parse().map_err(|_| {
            Error::InvalidData(format!(
                "{source}, line {line}: response `{response}` needs a number, got `{}`",
                r[ycol]
            ))
        })?;
        if !v.is_finite() {
            return Err(Error::InvalidData(format!(
                "{source}, line {line}: response `{response}` is not finite"
            )));
        }
        y.push(v);
    }
    let factors = t
        .header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != ycol)
        .map(|(j, name)| FactorColumn {
            name: name.clone(),
            labels: t.rows.iter().map(|(_, r)| r[j].clone()).collect(),
        })
        .collect();
    MixedModelData::new(response, y, factors)
        .map_err(|e| Error::InvalidData(format!("{source}: {e}")))
}

pub fn read_binomial_file(path: &Path) -> Result<Vec<(u64, u64)>> {
    read_binomial(open(path)?, &path.display().to_string())
}

pub fn read_counts_file(path: &Path) -> Result<(String, Vec<u64>)> {
    read_counts(open(path)?, &path.display().to_string())
}

pub fn read_mixed_file(path: &Path, response: &str) -> Result<MixedModelData> {
    read_mixed(open(path)?, &path.display().to_string(), response)
}
