//! Fixed-schema CSV persistence for replication and summary tables.
//! Floats are written with 17 significant digits; non-finite values as
//! `inf`, `-inf` or `nan`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use super::summary::SummaryRecord;
use super::ReplicationRecord;
use crate::datamodel::Regime;
use crate::diagnostics::ext_f64;
use crate::error::{CcrError, Result};

pub const REPLICATION_HEADER: [&str; 17] = [
    "regime", "n", "p", "p_w", "delta", "estimator", "rep", "seed", "dataset_hash", "mse", "term_row",
    "term_null", "term_perp", "nsr_x", "nsr_w", "runtime_ms", "error",
];

pub const SUMMARY_HEADER: [&str; 8] =
    ["regime", "n", "delta", "estimator", "rep_count", "mean_mse", "q025", "q975"];

pub(crate) fn fmt_f64(v: f64) -> String {
    match ext_f64::to_text(v) {
        Some(t) => t.to_string(),
        None => format!("{v:.16e}"),
    }
}

/// Grid values such as `delta` keep their shortest round-trip form.
fn fmt_grid(v: f64) -> String {
    match ext_f64::to_text(v) {
        Some(t) => t.to_string(),
        None => format!("{v}"),
    }
}

fn write_table<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let file = File::create(path).map_err(|e| CcrError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => CcrError::io(path, io),
        other => CcrError::format(path.display().to_string(), format!("{other:?}")),
    };
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    let mut inner = w.into_inner().map_err(|e| CcrError::io(path, e.into_error()))?;
    inner.flush().map_err(|e| CcrError::io(path, e))
}

pub fn write_replications(records: &[ReplicationRecord], path: impl AsRef<Path>) -> Result<()> {
    let rows = records.iter().map(|r| {
        [
            r.regime.as_str().to_string(),
            r.n.to_string(),
            r.p.to_string(),
            r.p_w.to_string(),
            fmt_grid(r.delta),
            r.estimator.clone(),
            r.rep.to_string(),
            r.seed.to_string(),
            r.dataset_hash.clone(),
            fmt_f64(r.mse),
            fmt_f64(r.term_row),
            fmt_f64(r.term_null),
            fmt_f64(r.term_perp),
            fmt_f64(r.nsr_x),
            fmt_f64(r.nsr_w),
            fmt_f64(r.runtime_ms),
            r.error.clone().unwrap_or_default(),
        ]
    });
    write_table(path.as_ref(), REPLICATION_HEADER, rows)
}

pub fn write_summaries(records: &[SummaryRecord], path: impl AsRef<Path>) -> Result<()> {
    let rows = records.iter().map(|r| {
        [
            r.regime.as_str().to_string(),
            r.n.to_string(),
            fmt_grid(r.delta),
            r.estimator.clone(),
            r.rep_count.to_string(),
            fmt_f64(r.mean_mse),
            fmt_f64(r.q025),
            fmt_f64(r.q975),
        ]
    });
    write_table(path.as_ref(), SUMMARY_HEADER, rows)
}

/// One data row with column-aware parsing errors.
struct Row<'a> {
    record: &'a csv::StringRecord,
    header: &'a [&'a str],
    line: u64,
}

impl Row<'_> {
    fn raw(&self, i: usize) -> &str {
        self.record.get(i).unwrap_or("")
    }

    fn parse<T: FromStr>(&self, i: usize) -> Result<T> {
        self.raw(i).parse().map_err(|_| {
            CcrError::schema(self.header[i], format!("line {}: cannot parse `{}`", self.line, self.raw(i)))
        })
    }

    fn float(&self, i: usize) -> Result<f64> {
        let s = self.raw(i);
        ext_f64::from_text(s)
            .map(Ok)
            .unwrap_or_else(|| self.parse(i))
    }

    fn regime(&self, i: usize) -> Result<Regime> {
        Regime::from_str(self.raw(i))
            .map_err(|_| CcrError::schema(self.header[i], format!("line {}: unknown regime `{}`", self.line, self.raw(i))))
    }
}

fn read_table<T, const N: usize>(
    path: &Path,
    header: [&str; N],
    mut convert: impl FnMut(&Row) -> Result<T>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| CcrError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let wrap = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => CcrError::io(path, io),
        other => CcrError::format(path.display().to_string(), format!("{other:?}")),
    };
    let found = r.headers().map_err(wrap)?.clone();
    for (i, expected) in header.iter().enumerate() {
        match found.get(i) {
            Some(col) if col == *expected => {}
            Some(col) => {
                return Err(CcrError::schema(col, format!("column {} should be `{expected}`", i + 1)))
            }
            None => return Err(CcrError::schema(*expected, "missing column")),
        }
    }
    if let Some(extra) = found.get(N) {
        return Err(CcrError::schema(extra, "unexpected extra column"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(wrap)?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push(convert(&Row { record: &rec, header: &header, line })?);
    }
    Ok(out)
}

pub fn read_replications(path: impl AsRef<Path>) -> Result<Vec<ReplicationRecord>> {
    read_table(path.as_ref(), REPLICATION_HEADER, |row| {
        let error = row.raw(16);
        Ok(ReplicationRecord {
            regime: row.regime(0)?,
            n: row.parse(1)?,
            p: row.parse(2)?,
            p_w: row.parse(3)?,
            delta: row.float(4)?,
            estimator: row.raw(5).to_string(),
            rep: row.parse(6)?,
            seed: row.parse(7)?,
            dataset_hash: row.raw(8).to_string(),
            mse: row.float(9)?,
            term_row: row.float(10)?,
            term_null: row.float(11)?,
            term_perp: row.float(12)?,
            nsr_x: row.float(13)?,
            nsr_w: row.float(14)?,
            runtime_ms: row.float(15)?,
            error: (!error.is_empty()).then(|| error.to_string()),
        })
    })
}

pub fn read_summaries(path: impl AsRef<Path>) -> Result<Vec<SummaryRecord>> {
    read_table(path.as_ref(), SUMMARY_HEADER, |row| {
        Ok(SummaryRecord {
            regime: row.regime(0)?,
            n: row.parse(1)?,
            delta: row.float(2)?,
            estimator: row.raw(3).to_string(),
            rep_count: row.parse(4)?,
            mean_mse: row.float(5)?,
            q025: row.float(6)?,
            q975: row.float(7)?,
        })
    })
}
