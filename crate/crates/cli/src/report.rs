//! Metric reports: a tab-separated text table and a JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use crossfuse_core::metrics::{MetricReport, PairMetrics};

use crate::{CliError, CliResult};

const HEADER: &str = "# name\tpsnr_db\tfmi\tqcv";

/// Text form: one record per pair, then a `mean` line. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn to_text(report: &MetricReport) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for p in &report.per_pair {
        let flag = if p.psnr_identical { "\tidentical" } else { "" };
        out.push_str(&format!("{}\t{:?}\t{:?}\t{:?}{flag}\n", p.name, p.psnr, p.fmi, p.qcv));
    }
    out.push_str(&format!("mean\t{:?}\t{:?}\t{:?}\n", report.psnr, report.fmi, report.qcv));
    out
}

pub fn parse_text(text: &str) -> CliResult<MetricReport> {
    let bad = |line: &str| CliError::data(anyhow::anyhow!("malformed report line `{line}`"));
    let num = |s: Option<&str>, line: &str| s.and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(line));
    let mut per_pair = Vec::new();
    let mut means = None;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let mut parts = line.split('\t');
        let name = parts.next().ok_or_else(|| bad(line))?;
        let (psnr, fmi, qcv) = (num(parts.next(), line)?, num(parts.next(), line)?, num(parts.next(), line)?);
        if name == "mean" {
            means = Some((psnr, fmi, qcv));
            continue;
        }
        per_pair.push(PairMetrics {
            name: name.to_string(),
            psnr,
            psnr_identical: parts.next() == Some("identical"),
            fmi,
            qcv,
        });
    }
    let (psnr, fmi, qcv) = means.ok_or_else(|| CliError::data(anyhow::anyhow!("report has no mean line")))?;
    Ok(MetricReport {
        psnr,
        fmi,
        qcv,
        per_pair,
    })
}

/// JSON sibling of a text report path (`report.txt` -> `report.json`).
pub fn json_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the text report to `path` and the JSON document next to it.
pub fn write(path: &Path, report: &MetricReport) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, to_text(report))?;
    let json = json_path(path);
    if json != path {
        fs::write(json, serde_json::to_string_pretty(report)?)?;
    }
    Ok(())
}

pub fn read_json(path: &Path) -> CliResult<MetricReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn read_text(path: &Path) -> CliResult<MetricReport> {
    parse_text(&fs::read_to_string(path)?)
}
