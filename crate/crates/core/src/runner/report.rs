//! Result matrices and the files written from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, RunError};

/// Metrics recorded for every cell, in CSV order.
pub const METRICS: [&str; 4] = ["acc", "bleu", "len_ratio", "len_ratio_corpus"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub col: String,
    /// Metric name to value; empty for failed cells.
    pub values: BTreeMap<String, f64>,
    pub status: CellStatus,
}

impl Cell {
    pub fn value(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied()
    }
}

/// Rows are trained models (tasks or training buckets), columns test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Cell>,
}

impl ResultMatrix {
    pub fn cell(&self, row: &str, col: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    pub fn value(&self, row: &str, col: &str, metric: &str) -> Option<f64> {
        self.cell(row, col).and_then(|c| c.value(metric))
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| self.cols.iter().all(|c| self.cell(r, c).is_some()))
    }

    /// Every metric that appears in some cell, standard ones first.
    pub fn metrics(&self) -> Vec<String> {
        let mut extra: Vec<String> = self
            .cells
            .iter()
            .flat_map(|c| c.values.keys())
            .filter(|k| !METRICS.contains(&k.as_str()))
            .cloned()
            .collect();
        extra.sort();
        extra.dedup();
        METRICS.iter().map(|m| m.to_string()).chain(extra).collect()
    }

    /// Long format, one line per cell and metric. Failed cells keep their
    /// lines with an empty value and status `failed`.
    pub fn to_csv(&self) -> String {
        let metrics = self.metrics();
        let mut out = String::from("train_bucket,test_bucket,metric,value,status\n");
        for row in &self.rows {
            for col in &self.cols {
                let cell = self.cell(row, col);
                for m in &metrics {
                    let (value, status) = match cell {
                        Some(Cell { status: CellStatus::Ok, values, .. }) => match values.get(m) {
                            Some(v) => (v.to_string(), "ok"),
                            None => continue,
                        },
                        _ => (String::new(), "failed"),
                    };
                    let _ = writeln!(out, "{row},{col},{m},{value},{status}");
                }
            }
        }
        out
    }

    /// Inverse of [`to_csv`](Self::to_csv); failure messages are not kept.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some("train_bucket,test_bucket,metric,value,status") {
            return Err(RunError::Report("missing matrix.csv header".into()));
        }
        let mut m = ResultMatrix { rows: Vec::new(), cols: Vec::new(), cells: Vec::new() };
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let [row, col, metric, value, status] = f[..] else {
                return Err(RunError::Report(format!("bad line {line:?}")));
            };
            if !m.rows.iter().any(|r| r == row) {
                m.rows.push(row.to_string());
            }
            if !m.cols.iter().any(|c| c == col) {
                m.cols.push(col.to_string());
            }
            let idx = match m.cells.iter().position(|c| c.row == row && c.col == col) {
                Some(i) => i,
                None => {
                    let status = if status == "ok" { CellStatus::Ok } else { CellStatus::Failed(String::new()) };
                    m.cells.push(Cell { row: row.into(), col: col.into(), values: BTreeMap::new(), status });
                    m.cells.len() - 1
                }
            };
            if status == "ok" {
                let v: f64 = value.parse().map_err(|_| RunError::Report(format!("bad value in {line:?}")))?;
                m.cells[idx].values.insert(metric.to_string(), v);
            }
        }
        Ok(m)
    }

    /// Wide table of one metric: rows as lines, columns as fields.
    pub fn wide_csv(&self, metric: &str) -> String {
        let mut out = format!("train\\test,{}\n", self.cols.join(","));
        for row in &self.rows {
            let fields: Vec<String> = self
                .cols
                .iter()
                .map(|c| self.value(row, c, metric).map(|v| v.to_string()).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{row},{}", fields.join(","));
        }
        out
    }

    /// gnuplot data: one block per row (separated by two blank lines), each
    /// line `column_index column_label value`.
    pub fn series(&self, metric: &str) -> String {
        let mut out = String::new();
        for (i, row) in self.rows.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            let _ = writeln!(out, "# {row}");
            for (j, col) in self.cols.iter().enumerate() {
                match self.value(row, col, metric) {
                    Some(v) => {
                        let _ = writeln!(out, "{j} {col} {v}");
                    }
                    None => {
                        let _ = writeln!(out, "{j} {col} NaN");
                    }
                }
            }
        }
        out
    }

    /// For each column, the row with the highest value of `metric`.
    pub fn best_rows(&self, metric: &str) -> Vec<(String, Option<String>)> {
        self.cols
            .iter()
            .map(|c| {
                let best = self
                    .rows
                    .iter()
                    .filter_map(|r| self.value(r, c, metric).map(|v| (r, v)))
                    .fold(None::<(&String, f64)>, |acc, (r, v)| match acc {
                        Some((_, bv)) if bv >= v => acc,
                        _ => Some((r, v)),
                    });
                (c.clone(), best.map(|(r, _)| r.clone()))
            })
            .collect()
    }
}

/// gnuplot script drawing every `.dat` series of a run.
pub fn gnuplot_script(title: &str, metrics: &[String], rows: &[String], cols: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# gnuplot -p plot.gp");
    let _ = writeln!(s, "set terminal pngcairo size 900,{}", 350 * metrics.len());
    let _ = writeln!(s, "set output 'plot.png'");
    let _ = writeln!(s, "set multiplot layout {},1 title '{title}'", metrics.len());
    let tics: Vec<String> = cols.iter().enumerate().map(|(i, c)| format!("\"{c}\" {i}")).collect();
    let _ = writeln!(s, "set xtics ({})", tics.join(", "));
    let _ = writeln!(s, "set key outside right");
    for m in metrics {
        let _ = writeln!(s, "set ylabel '{m}'");
        if m.starts_with("len_ratio") {
            let _ = writeln!(s, "set arrow 1 from graph 0, first 1 to graph 1, first 1 nohead dashtype 2");
        } else {
            let _ = writeln!(s, "unset arrow 1");
        }
        let plots: Vec<String> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| format!("'{m}.dat' index {i} using 1:3 with linespoints title '{r}'"))
            .collect();
        let _ = writeln!(s, "plot {}", plots.join(", \\\n     "));
    }
    let _ = writeln!(s, "unset multiplot");
    s
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| RunError::Io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ResultMatrix {
        let mut cells = Vec::new();
        for (i, row) in ["copy", "push"].iter().enumerate() {
            for (j, col) in ["1-10", "11-15"].iter().enumerate() {
                let values = METRICS.iter().enumerate().map(|(k, m)| (m.to_string(), 0.1 * (i + j + k) as f64 + 1.0 / 3.0)).collect();
                cells.push(Cell { row: row.to_string(), col: col.to_string(), values, status: CellStatus::Ok });
            }
        }
        cells[3] = Cell { row: "push".into(), col: "11-15".into(), values: BTreeMap::new(), status: CellStatus::Failed("boom".into()) };
        ResultMatrix { rows: vec!["copy".into(), "push".into()], cols: vec!["1-10".into(), "11-15".into()], cells }
    }

    #[test]
    fn csv_round_trip() {
        let m = sample();
        let csv = m.to_csv();
        assert_eq!(csv.lines().count() - 1, 4 * METRICS.len());
        assert_eq!(csv.lines().filter(|l| l.ends_with(",failed")).count(), METRICS.len());
        let back = ResultMatrix::from_csv(&csv).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.cols, m.cols);
        for (a, b) in back.cells.iter().zip(&m.cells) {
            assert_eq!(a.values, b.values);
            assert_eq!(matches!(a.status, CellStatus::Ok), matches!(b.status, CellStatus::Ok));
        }
        assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn best_rows_and_series() {
        let m = sample();
        let best = m.best_rows("acc");
        assert_eq!(best[0], ("1-10".to_string(), Some("push".to_string())));
        assert_eq!(best[1], ("11-15".to_string(), Some("copy".to_string())));
        let dat = m.series("acc");
        assert_eq!(dat.matches("\n\n\n").count(), 1);
        assert!(dat.contains("1 11-15 NaN"));
    }
}
