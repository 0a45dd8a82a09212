//! Semicolon-separated training metrics, one row per optimizer step.
//!
//! A single-run file carries every logged series plus a 10-step moving
//! average of the margin. A merged file carries one `Step` column and one
//! margin column per run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use humanlike_core::train::{MetricsLog, MetricsRow};

use crate::error::{Error, Result};

pub const SEPARATOR: char = ';';
pub const MARGIN_SERIES: &str = "train/rewards/margins";
/// Window of the smoothed margin column.
pub const MOVING_AVERAGE_WINDOW: usize = 10;

const SERIES: [&str; 6] = [
    MARGIN_SERIES,
    "train/loss",
    "train/rewards/chosen",
    "train/rewards/rejected",
    "train/rewards/accuracies",
    "train/learning_rate",
];
const SMOOTHED: &str = "train/rewards/margins_ma10";

fn column(run: &str, series: &str) -> String {
    format!("{run} - {series}")
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        message: message.into(),
    }
}

fn check_run_name(run: &str) -> Result<()> {
    if run.is_empty() || run.contains(SEPARATOR) || run.contains('\n') {
        return Err(Error::Config(format!(
            "run name `{run}` must be non-empty without `;` or newlines"
        )));
    }
    Ok(())
}

pub fn render_metrics(log: &MetricsLog) -> Result<String> {
    check_run_name(&log.run)?;
    if log.rows.is_empty() {
        return Err(humanlike_core::Error::Empty("metrics log").into());
    }
    let mut header = vec!["Step".to_string()];
    header.extend(SERIES.iter().map(|s| column(&log.run, s)));
    header.push(column(&log.run, SMOOTHED));
    let mut out = header.join(";");
    out.push('\n');
    let smoothed = log.margin_moving_average(MOVING_AVERAGE_WINDOW);
    for (r, ma) in log.rows.iter().zip(smoothed) {
        let cells = [
            r.step.to_string(),
            r.margin.to_string(),
            r.loss.to_string(),
            r.chosen_reward.to_string(),
            r.rejected_reward.to_string(),
            r.accuracy.to_string(),
            r.lr.to_string(),
            ma.to_string(),
        ];
        out.push_str(&cells.join(";"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics(log: &MetricsLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_metrics(log)?).map_err(Error::io(path))
}

fn parse_f64(path: &Path, line: usize, cell: &str) -> Result<f64> {
    cell.parse().map_err(|_| Error::Line {
        path: path.into(),
        line,
        message: format!("`{cell}` is not a number"),
    })
}

fn parse_step(path: &Path, line: usize, cell: &str) -> Result<usize> {
    cell.parse().map_err(|_| Error::Line {
        path: path.into(),
        line,
        message: format!("`{cell}` is not a step number"),
    })
}

/// Reads a single-run file written by [`write_metrics`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<MetricsLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| format_error(path, "empty file"))?
        .split(SEPARATOR)
        .collect();
    let suffix = format!(" - {MARGIN_SERIES}");
    let run = header
        .get(1)
        .and_then(|h| h.strip_suffix(&suffix))
        .ok_or_else(|| format_error(path, "second column is not a margin series"))?;
    let mut expected = vec!["Step".to_string()];
    expected.extend(SERIES.iter().map(|s| column(run, s)));
    expected.push(column(run, SMOOTHED));
    if header != expected {
        return Err(format_error(path, "header does not describe a single-run metrics file"));
    }
    let mut log = MetricsLog::new(run);
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let cells: Vec<&str> = line.split(SEPARATOR).collect();
        if cells.len() != expected.len() {
            return Err(Error::Line {
                path: path.into(),
                line: n,
                message: format!("expected {} cells, found {}", expected.len(), cells.len()),
            });
        }
        let f = |k: usize| parse_f64(path, n, cells[k]);
        let row = MetricsRow {
            step: parse_step(path, n, cells[0])?,
            margin: f(1)?,
            loss: f(2)?,
            chosen_reward: f(3)?,
            rejected_reward: f(4)?,
            accuracy: f(5)?,
            lr: f(6)?,
        };
        log.push(row).map_err(|e| Error::Line {
            path: path.into(),
            line: n,
            message: e.to_string(),
        })?;
    }
    Ok(log)
}

/// Margin series of several runs over the union of their steps. A run
/// without a row at some step leaves that cell empty.
pub fn render_merged(logs: &[MetricsLog]) -> Result<String> {
    if logs.is_empty() {
        return Err(humanlike_core::Error::Empty("run list").into());
    }
    let mut names = std::collections::BTreeSet::new();
    for log in logs {
        check_run_name(&log.run)?;
        if !names.insert(log.run.as_str()) {
            return Err(Error::Config(format!("run `{}` appears twice", log.run)));
        }
    }
    let mut table: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
    for (k, log) in logs.iter().enumerate() {
        for r in &log.rows {
            table.entry(r.step).or_insert_with(|| vec![None; logs.len()])[k] = Some(r.margin);
        }
    }
    let mut out = String::from("Step");
    for log in logs {
        out.push(SEPARATOR);
        out.push_str(&column(&log.run, MARGIN_SERIES));
    }
    out.push('\n');
    for (step, cells) in table {
        out.push_str(&step.to_string());
        for c in cells {
            out.push(SEPARATOR);
            if let Some(v) = c {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_merged(logs: &[MetricsLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_merged(logs)?).map_err(Error::io(path))
}

/// `(run, [(step, margin)])`
pub type MarginSeries = (String, Vec<(usize, f64)>);

/// Margin series per run from a merged file.
pub fn read_merged(path: impl AsRef<Path>) -> Result<Vec<MarginSeries>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| format_error(path, "empty file"))?
        .split(SEPARATOR)
        .collect();
    if header.first() != Some(&"Step") {
        return Err(format_error(path, "first column must be `Step`"));
    }
    let suffix = format!(" - {MARGIN_SERIES}");
    let mut runs: Vec<(String, Vec<(usize, f64)>)> = header[1..]
        .iter()
        .map(|h| {
            h.strip_suffix(&suffix)
                .map(|r| (r.to_string(), Vec::new()))
                .ok_or_else(|| format_error(path, format!("column `{h}` is not a margin series")))
        })
        .collect::<Result<_>>()?;
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let cells: Vec<&str> = line.split(SEPARATOR).collect();
        if cells.len() != header.len() {
            return Err(Error::Line {
                path: path.into(),
                line: n,
                message: format!("expected {} cells, found {}", header.len(), cells.len()),
            });
        }
        let step = parse_step(path, n, cells[0])?;
        for (k, cell) in cells[1..].iter().enumerate() {
            if !cell.is_empty() {
                runs[k].1.push((step, parse_f64(path, n, cell)?));
            }
        }
    }
    Ok(runs)
}
