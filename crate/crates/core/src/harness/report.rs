//! Report emission.
//!
//! CSV columns, in order:
//!
//! | column           | meaning                                              |
//! |------------------|------------------------------------------------------|
//! | `method`         | method preset name                                   |
//! | `scenario`       | `is+cb`, `ds+cb`, `is+ci` or `ds+ci`                 |
//! | `rho`            | Dirichlet concentration (empty for independent)      |
//! | `pi`             | imbalance ratio (empty for balanced)                 |
//! | `B`              | mini-batch size                                      |
//! | `alpha`          | test-time EMA coefficient                            |
//! | `lambda`         | class-frequency momentum                             |
//! | `seed`           | seed of task, model and stream                       |
//! | `acc_mean_class` | mean per-class recall of the online predictions      |
//! | `acc_overall`    | overall online accuracy                              |
//! | `pred_std`       | population STD of per-class prediction counts        |
//! | `pred_range`     | max minus min of per-class prediction counts         |
//! | `duration_ms`    | wall-clock time of the episode                       |
//!
//! Floats are written as the shortest decimal that parses back to the same value.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::compare::SummaryRow;
use super::episode::EpisodeReport;
use crate::{Error, Result};

pub const CSV_HEADER: &str =
    "method,scenario,rho,pi,B,alpha,lambda,seed,acc_mean_class,acc_overall,pred_std,pred_range,duration_ms";

pub const SUMMARY_HEADER: &str = "method,scenario,rho,pi,episodes,failures,seeds,acc_mean,acc_std,acc_median,\
overall_mean,pred_std_mean,pred_std_median";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    JsonLines,
    Csv,
}

impl ReportFormat {
    /// `.csv` selects CSV; anything else is JSON lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::JsonLines,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json-lines" | "jsonl" => Ok(ReportFormat::JsonLines),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Parse(format!("unknown report format `{other}` (json-lines, csv)"))),
        }
    }
}

/// The flat per-episode record written to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub method: String,
    pub scenario: String,
    pub rho: Option<f64>,
    pub pi: Option<f64>,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    pub acc_mean_class: f64,
    pub acc_overall: f64,
    pub pred_std: f64,
    pub pred_range: usize,
    pub duration_ms: f64,
}

impl From<&EpisodeReport> for ReportRecord {
    fn from(r: &EpisodeReport) -> Self {
        Self {
            method: r.method.clone(),
            scenario: r.scenario.clone(),
            rho: r.rho,
            pi: r.pi,
            batch_size: r.batch_size,
            alpha: r.alpha,
            lambda: r.lambda,
            seed: r.seed,
            acc_mean_class: r.acc_mean_class,
            acc_overall: r.acc_overall,
            pred_std: r.pred_std,
            pred_range: r.pred_range,
            duration_ms: r.duration_ms,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_line(r: &ReportRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.method,
        r.scenario,
        opt(r.rho),
        opt(r.pi),
        r.batch_size,
        r.alpha,
        r.lambda,
        r.seed,
        r.acc_mean_class,
        r.acc_overall,
        r.pred_std,
        r.pred_range,
        r.duration_ms
    )
}

pub fn emit_report<W: Write>(reports: &[EpisodeReport], format: ReportFormat, mut out: W) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            writeln!(out, "{CSV_HEADER}")?;
            for r in reports {
                writeln!(out, "{}", csv_line(&ReportRecord::from(r)))?;
            }
        }
        ReportFormat::JsonLines => {
            for r in reports {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_report_file(path: &Path, reports: &[EpisodeReport], format: ReportFormat) -> Result<()> {
    let file = File::create(path)?;
    emit_report(reports, format, BufWriter::new(file))
}

pub fn parse_csv_report(text: &str) -> Result<Vec<ReportRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        other => return Err(Error::Parse(format!("unexpected CSV header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| parse_csv_line(line).map_err(|e| Error::Parse(format!("CSV row {}: {e}", i + 1))))
        .collect()
}

fn parse_csv_line(line: &str) -> Result<ReportRecord> {
    let f: Vec<&str> = line.trim_end().split(',').collect();
    if f.len() != 13 {
        return Err(Error::Parse(format!("expected 13 fields, got {}", f.len())));
    }
    fn num<T: FromStr>(s: &str) -> Result<T> {
        s.parse().map_err(|_| Error::Parse(format!("bad number `{s}`")))
    }
    fn opt_num(s: &str) -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    }
    Ok(ReportRecord {
        method: f[0].to_owned(),
        scenario: f[1].to_owned(),
        rho: opt_num(f[2])?,
        pi: opt_num(f[3])?,
        batch_size: num(f[4])?,
        alpha: num(f[5])?,
        lambda: num(f[6])?,
        seed: num(f[7])?,
        acc_mean_class: num(f[8])?,
        acc_overall: num(f[9])?,
        pred_std: num(f[10])?,
        pred_range: num(f[11])?,
        duration_ms: num(f[12])?,
    })
}

pub fn parse_json_lines(text: &str) -> Result<Vec<EpisodeReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn emit_summary<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.scenario,
            opt(r.rho),
            opt(r.pi),
            r.episodes,
            r.failures,
            seeds.join(" "),
            r.acc_mean,
            r.acc_std,
            r.acc_median,
            r.overall_mean,
            r.pred_std_mean,
            r.pred_std_median
        )?;
    }
    out.flush()?;
    Ok(())
}
