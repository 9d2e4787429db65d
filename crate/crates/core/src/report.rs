//! Aggregation of per-method metric CSVs into a Markdown comparison table.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use thiserror::Error;

use crate::metrics::MetricReport;

/// Leading column of a metrics CSV, before the `MetricReport` columns.
pub const METHOD_COLUMN: &str = "method";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: expected header {expected:?}, found {found:?}")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: bad value {value:?} in column {column}")]
    Value {
        path: PathBuf,
        column: String,
        value: String,
    },
    #[error("no metric rows found")]
    Empty,
}

pub fn csv_header() -> String {
    format!("{METHOD_COLUMN},{}", MetricReport::CSV_HEADER)
}

pub fn to_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = csv_header();
    out.push('\n');
    for (method, r) in rows {
        out.push_str(&format!("{method},{}\n", r.to_csv_line()));
    }
    out
}

pub fn read_csv(path: &Path) -> Result<Vec<(String, MetricReport)>, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let found = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if found != csv_header() {
        return Err(ReportError::Header {
            path: path.to_path_buf(),
            expected: csv_header(),
            found,
        });
    }
    let columns: Vec<&str> = MetricReport::CSV_HEADER.split(',').collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let field = |i: usize| -> Result<f64, ReportError> {
            let raw = &record[i + 1];
            raw.parse().map_err(|_| ReportError::Value {
                path: path.to_path_buf(),
                column: columns[i].to_string(),
                value: raw.to_string(),
            })
        };
        let report = MetricReport {
            delta1: field(0)?,
            delta2: field(1)?,
            delta3: field(2)?,
            rmse: field(3)?,
            rmse_log: field(4)?,
            abs_rel: field(5)?,
            sq_rel: field(6)?,
            n_valid: field(7)? as usize,
        };
        rows.push((record[0].to_string(), report));
    }
    Ok(rows)
}

/// Per-method means over every row with that method name, in first-seen order.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean: MetricReport,
}

pub fn aggregate(rows: &[(String, MetricReport)]) -> Result<Vec<MethodSummary>, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut groups: IndexMap<&str, Vec<&MetricReport>> = IndexMap::new();
    for (method, r) in rows {
        groups.entry(method).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(method, rs)| {
            let n = rs.len() as f64;
            let mean = |f: fn(&MetricReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            MethodSummary {
                method: method.to_string(),
                runs: rs.len(),
                mean: MetricReport {
                    delta1: mean(|r| r.delta1),
                    delta2: mean(|r| r.delta2),
                    delta3: mean(|r| r.delta3),
                    rmse: mean(|r| r.rmse),
                    rmse_log: mean(|r| r.rmse_log),
                    abs_rel: mean(|r| r.abs_rel),
                    sq_rel: mean(|r| r.sq_rel),
                    n_valid: rs.iter().map(|r| r.n_valid).sum(),
                },
            }
        })
        .collect())
}

/// Accuracy columns as percentages, errors to three decimals. Bold marks the
/// best value per column (highest δ, lowest error).
pub fn markdown_table(summaries: &[MethodSummary]) -> String {
    let cols: [(fn(&MetricReport) -> f64, bool); 7] = [
        (|r| r.delta1, true),
        (|r| r.delta2, true),
        (|r| r.delta3, true),
        (|r| r.rmse, false),
        (|r| r.rmse_log, false),
        (|r| r.abs_rel, false),
        (|r| r.sq_rel, false),
    ];
    let best: Vec<f64> = cols
        .iter()
        .map(|&(f, higher)| {
            let vals = summaries.iter().map(|s| f(&s.mean));
            if higher {
                vals.fold(f64::NEG_INFINITY, f64::max)
            } else {
                vals.fold(f64::INFINITY, f64::min)
            }
        })
        .collect();
    let mut out = String::from(
        "| Method | Runs | δ1 | δ2 | δ3 | RMSE | RMSE(log) | AbsRel | SqRel |\n\
         |---|---:|---:|---:|---:|---:|---:|---:|---:|\n",
    );
    for s in summaries {
        out.push_str(&format!("| {} | {} |", s.method, s.runs));
        for (&(f, higher), &b) in cols.iter().zip(&best) {
            let v = f(&s.mean);
            let text = if higher {
                format!("{:.1}%", 100.0 * v)
            } else {
                format!("{v:.3}")
            };
            if summaries.len() > 1 && v == b {
                out.push_str(&format!(" **{text}** |"));
            } else {
                out.push_str(&format!(" {text} |"));
            }
        }
        out.push('\n');
    }
    out
}
