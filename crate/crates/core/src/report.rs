//! Text and CSV tables built from a results directory's `summary.csv`.
//!
//! Two layouts are produced: method × batch size for each (backbone,
//! imbalance) pair, and method × imbalance for each (backbone, batch size)
//! pair. Cells missing from the summary print as `—` and are counted as
//! warnings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{read_summary, SummaryRow};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub column_axis: &'static str,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[row][col]` = `(mean, std)`.
    pub cells: Vec<Vec<Option<(f64, f64)>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub tables: Vec<Table>,
    pub warnings: usize,
}

/// Long-format CSV record, one per table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub table: String,
    pub method: String,
    pub column: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub fn build_report(rows: &[SummaryRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("summary has no rows".into()));
    }
    let mut tables = Vec::new();
    let mut warnings = 0;

    let mut by_imbalance: BTreeMap<(String, String), Vec<&SummaryRow>> = BTreeMap::new();
    let mut by_batch: BTreeMap<(String, usize), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        by_imbalance
            .entry((r.norm.to_string(), r.imbalance.to_string()))
            .or_default()
            .push(r);
        by_batch
            .entry((r.norm.to_string(), r.batch_size))
            .or_default()
            .push(r);
    }

    for ((norm, imb), group) in &by_imbalance {
        let mut sizes: Vec<usize> = group.iter().map(|r| r.batch_size).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes.dedup();
        let (t, w) = grid(
            format!("{norm} / imbalance {imb}"),
            "batch size",
            group,
            sizes.iter().map(|s| s.to_string()).collect(),
            |r| r.batch_size.to_string(),
        );
        tables.push(t);
        warnings += w;
    }
    for ((norm, bs), group) in &by_batch {
        let mut imbs: Vec<_> = group.iter().map(|r| r.imbalance).collect();
        imbs.sort_by(|a, b| a.0.total_cmp(&b.0));
        imbs.dedup();
        let (t, w) = grid(
            format!("{norm} / batch size {bs}"),
            "imbalance",
            group,
            imbs.iter().map(|i| i.to_string()).collect(),
            |r| r.imbalance.to_string(),
        );
        tables.push(t);
        warnings += w;
    }
    Ok(Report { tables, warnings })
}

fn grid(
    title: String,
    column_axis: &'static str,
    group: &[&SummaryRow],
    columns: Vec<String>,
    key: impl Fn(&SummaryRow) -> String,
) -> (Table, usize) {
    let mut methods: Vec<_> = group.iter().map(|r| r.preset).collect();
    methods.sort();
    methods.dedup();
    let mut warnings = 0;
    let cells: Vec<Vec<Option<(f64, f64)>>> = methods
        .iter()
        .map(|&m| {
            columns
                .iter()
                .map(|c| {
                    let hit = group
                        .iter()
                        .find(|r| r.preset == m && &key(r) == c)
                        .map(|r| (r.mean, r.std));
                    if hit.is_none() {
                        warnings += 1;
                    }
                    hit
                })
                .collect()
        })
        .collect();
    (
        Table {
            title,
            column_axis,
            rows: methods.iter().map(|m| m.to_string()).collect(),
            columns,
            cells,
        },
        warnings,
    )
}

impl Report {
    /// Fixed-width text rendering; accuracies in percent as `mean±std`.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            let _ = writeln!(out, "## {} (columns: {})", t.title, t.column_axis);
            let w0 = t.rows.iter().map(String::len).chain([6]).max().unwrap_or(6);
            let cell = |c: &Option<(f64, f64)>| match c {
                Some((m, s)) => format!("{:.2}±{:.2}", m * 100.0, s * 100.0),
                None => "—".to_string(),
            };
            let w = t
                .cells
                .iter()
                .flatten()
                .map(|c| cell(c).chars().count())
                .chain(t.columns.iter().map(String::len))
                .max()
                .unwrap_or(1);
            let _ = write!(out, "{:<w0$}", "method");
            for c in &t.columns {
                let _ = write!(out, " | {c:>w$}");
            }
            out.push('\n');
            for (name, row) in t.rows.iter().zip(&t.cells) {
                let _ = write!(out, "{name:<w0$}");
                for c in row {
                    let s = cell(c);
                    let pad = w.saturating_sub(s.chars().count());
                    let _ = write!(out, " | {}{s}", " ".repeat(pad));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        if self.warnings > 0 {
            let _ = writeln!(out, "warnings: {} missing cell(s)", self.warnings);
        }
        out
    }

    pub fn records(&self) -> Vec<ReportRecord> {
        let mut out = Vec::new();
        for t in &self.tables {
            for (m, row) in t.rows.iter().zip(&t.cells) {
                for (c, v) in t.columns.iter().zip(row) {
                    out.push(ReportRecord {
                        table: t.title.clone(),
                        method: m.clone(),
                        column: c.clone(),
                        mean: v.map(|x| x.0),
                        std: v.map(|x| x.1),
                    });
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.records() {
            w.serialize(r).map_err(|e| Error::InvalidState(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidState(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::InvalidArgument(e.to_string())))
        .collect()
}

/// Reads `dir/summary.csv`, writes `report.txt` and `report.csv` next to
/// it and returns the report.
pub fn report(dir: &Path) -> Result<(Report, PathBuf, PathBuf)> {
    let summary = dir.join("summary.csv");
    if !summary.exists() {
        return Err(Error::InvalidArgument(format!(
            "no summary.csv in {}",
            dir.display()
        )));
    }
    let rows = read_summary(&summary)?;
    let rep = build_report(&rows)?;
    let txt = dir.join("report.txt");
    let csv = dir.join("report.csv");
    fs::write(&txt, rep.render_text())?;
    fs::write(&csv, rep.to_csv()?)?;
    Ok((rep, txt, csv))
}
