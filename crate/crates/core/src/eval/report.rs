use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::EvalReport;
use crate::error::{Error, Result};
use crate::pipeline::Arm;

pub const CSV_HEADER: &str = "class,arm,trial,auc,mean,std";
const FAILED: &str = "failed";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::Config(format!("unknown report format `{s}`"))),
        }
    }
}

/// One CSV line: a single trial of one class and arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub class: u8,
    pub arm: Arm,
    pub trial: usize,
    pub auc: Option<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn report_rows(reports: &[EvalReport]) -> Vec<ReportRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.trials.iter().map(move |t| ReportRow {
                class: r.class,
                arm: r.arm,
                trial: t.trial,
                auc: t.auc,
                mean: r.mean,
                std: r.std,
            })
        })
        .collect()
}

pub fn render_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in report_rows(reports) {
        let auc = row
            .auc
            .map_or_else(|| FAILED.to_string(), |a| a.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.class, row.arm, row.trial, auc, row.mean, row.std
        );
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data(format!(
            "report must start with `{CSV_HEADER}`"
        )));
    }
    let bad = |line: &str| Error::Data(format!("malformed report row `{line}`"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            Ok(ReportRow {
                class: f[0].parse().map_err(|_| bad(line))?,
                arm: f[1].parse()?,
                trial: f[2].parse().map_err(|_| bad(line))?,
                auc: if f[3] == FAILED {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad(line))?)
                },
                mean: f[4].parse().map_err(|_| bad(line))?,
                std: f[5].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

/// Table of `mean (std)` cells in percent with one decimal.
pub fn render_markdown(reports: &[EvalReport]) -> String {
    let mut out =
        String::from("| class | arm | trials | failed | AUC mean (std) |\n|---|---|---|---|---|\n");
    for r in reports {
        let cell = if r.mean.is_nan() {
            "n/a".to_string()
        } else {
            format!("{:.1} ({:.1})", 100.0 * r.mean, 100.0 * r.std)
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.class,
            r.arm.label(),
            r.trials.len(),
            r.failed(),
            cell
        );
    }
    let mut configs: Vec<&str> = reports.iter().map(|r| r.config.as_str()).collect();
    configs.dedup();
    if !configs.is_empty() {
        out.push_str("\nConfigurations:\n\n");
        for c in configs {
            let _ = writeln!(out, "- `{c}`");
        }
    }
    out
}

pub fn emit_report(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => render_csv(reports),
        ReportFormat::Markdown => render_markdown(reports),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `sample_index,true_label,is_positive,score` per test sample.
pub fn write_score_dump<W: Write>(
    labels: &[u8],
    is_positive: &[bool],
    scores: &[f64],
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "sample_index,true_label,is_positive,score")?;
    for (i, ((l, p), s)) in labels.iter().zip(is_positive).zip(scores).enumerate() {
        writeln!(out, "{i},{l},{},{s}", u8::from(*p))?;
    }
    Ok(())
}
