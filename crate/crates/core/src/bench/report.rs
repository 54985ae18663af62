use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskResult {
    pub id: usize,
    pub successes: usize,
    pub rollouts: usize,
    /// Percent.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model: String,
    pub category: String,
    pub tasks: Vec<TaskResult>,
    /// Percent, mean over tasks.
    pub average_rate: f64,
    pub seeds: Vec<u64>,
    pub mean_episode_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRow {
    pub category: String,
    pub geo_rate: f64,
    pub pixel_rate: f64,
    /// geo / pixel; 1.0 when both are zero, absent when only pixel is zero.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareReport {
    pub schema_version: u32,
    pub geo_model: String,
    pub pixel_model: String,
    pub rows: Vec<CompareRow>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub mode: String,
    pub label: String,
    pub default: bool,
    pub seen: EvalReport,
    pub novel: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub schema_version: u32,
    pub novel_category: String,
    pub rows: Vec<AblationRow>,
}

/// Any of the report kinds, told apart by their fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Report {
    Eval(EvalReport),
    Compare(CompareReport),
    Ablation(AblationReport),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "md" | "markdown" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

pub fn success_rate(successes: usize, rollouts: usize) -> f64 {
    if rollouts == 0 {
        0.0
    } else {
        100.0 * successes as f64 / rollouts as f64
    }
}

/// geo / pixel with 0/0 read as parity.
pub fn rate_ratio(geo: f64, pixel: f64) -> Option<f64> {
    if pixel > 0.0 {
        Some(geo / pixel)
    } else if geo == 0.0 {
        Some(1.0)
    } else {
        None
    }
}

impl Report {
    pub fn schema_version(&self) -> u32 {
        match self {
            Report::Eval(r) => r.schema_version,
            Report::Compare(r) => r.schema_version,
            Report::Ablation(r) => r.schema_version,
        }
    }

    /// Parses report JSON, rejecting unknown schema versions and shapes.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("report is not JSON: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(REPORT_SCHEMA_VERSION) => {}
            Some(v) => return Err(Error::Schema(format!("unsupported report schema_version {v}"))),
            None => return Err(Error::Schema("report has no schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Schema(format!("report does not match any schema: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_markdown(&self) -> String {
        match self {
            Report::Eval(r) => eval_markdown(r),
            Report::Compare(r) => compare_markdown(r),
            Report::Ablation(r) => ablation_markdown(r),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            Report::Eval(r) => {
                out.push_str("task,successes,rollouts,rate\n");
                for t in &r.tasks {
                    let _ = writeln!(out, "{},{},{},{}", t.id, t.successes, t.rollouts, t.rate);
                }
                let (s, n) = totals(r);
                let _ = writeln!(out, "average,{s},{n},{}", r.average_rate);
            }
            Report::Compare(r) => {
                out.push_str("category,geo_rate,pixel_rate,ratio\n");
                for row in &r.rows {
                    let ratio = row.ratio.map(|v| v.to_string()).unwrap_or_default();
                    let _ = writeln!(out, "{},{},{},{ratio}", row.category, row.geo_rate, row.pixel_rate);
                }
            }
            Report::Ablation(r) => {
                out.push_str("mode,label,seen_rate,novel_rate\n");
                for row in &r.rows {
                    let _ = writeln!(
                        out,
                        "{},{},{},{}",
                        row.mode, row.label, row.seen.average_rate, row.novel.average_rate
                    );
                }
            }
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        Ok(match format {
            ReportFormat::Json => self.to_json()?,
            ReportFormat::Markdown => self.to_markdown(),
            ReportFormat::Csv => self.to_csv(),
        })
    }
}

fn totals(r: &EvalReport) -> (usize, usize) {
    (
        r.tasks.iter().map(|t| t.successes).sum(),
        r.tasks.iter().map(|t| t.rollouts).sum(),
    )
}

fn eval_markdown(r: &EvalReport) -> String {
    let mut out = format!("**{}** on **{}** views\n\n", r.model, r.category);
    out.push_str("| Task | Successes | Rollouts | Success (%) |\n|---|---:|---:|---:|\n");
    for t in &r.tasks {
        let _ = writeln!(out, "| {} | {} | {} | {:.1} |", t.id, t.successes, t.rollouts, t.rate);
    }
    let (s, n) = totals(r);
    let _ = writeln!(out, "| Average | {s} | {n} | {:.1} |", r.average_rate);
    out
}

fn compare_markdown(r: &CompareReport) -> String {
    let mut out = format!("**{}** vs **{}**\n\n", r.geo_model, r.pixel_model);
    out.push_str("| Views | GeoAware (%) | Baseline (%) | Ratio |\n|---|---:|---:|---:|\n");
    for row in &r.rows {
        let label = row
            .category
            .parse::<crate::deskworld::ViewCategory>()
            .map(|c| c.label().to_string())
            .unwrap_or_else(|_| row.category.clone());
        let ratio = row.ratio.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(out, "| {label} | {:.1} | {:.1} | {ratio} |", row.geo_rate, row.pixel_rate);
    }
    out
}

fn ablation_markdown(r: &AblationReport) -> String {
    let novel = r
        .novel_category
        .parse::<crate::deskworld::ViewCategory>()
        .map(|c| format!("Novel ({})", c.label()))
        .unwrap_or_else(|_| r.novel_category.clone());
    let mut rows: Vec<[String; 3]> = vec![[
        "Layer Selection".into(),
        "Original (%)".into(),
        format!("{novel} (%)"),
    ]];
    for row in &r.rows {
        rows.push([
            row.label.clone(),
            format!("{:.1}", row.seen.average_rate),
            format!("{:.1}", row.novel.average_rate),
        ]);
    }
    let widths: Vec<usize> = (0..3).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "| {:<w0$} | {:>w1$} | {:>w2$} |",
            r[0],
            r[1],
            r[2],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        );
        if i == 0 {
            let _ = writeln!(
                out,
                "|{}|{}:|{}:|",
                "-".repeat(widths[0] + 2),
                "-".repeat(widths[1] + 1),
                "-".repeat(widths[2] + 1)
            );
        }
    }
    out
}

pub fn write_report(report: &Report, format: ReportFormat, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, report.render(format)?.as_bytes())
}

/// Parses the CSV emitted for an evaluation report back into rows of
/// `(task, successes, rollouts, rate)`.
pub fn parse_eval_csv(text: &str) -> Result<Vec<(String, usize, usize, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("task,successes,rollouts,rate") {
        return Err(Error::Schema("unexpected CSV header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Schema(format!("bad CSV row {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok((
                f[0].to_string(),
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}
