//! Consolidated accuracy / size table across keep ratios.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cost::measured_cost;
use crate::error::{Error, Result};
use crate::pipeline::evaluate_split;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    /// Checkpoint file stem.
    pub model: String,
    pub stage: String,
    pub rho: f64,
    /// Top-1 on the test split, in `[0, 1]`.
    pub accuracy: f64,
    pub loss: f64,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

const COLUMNS: [&str; 7] = ["model", "stage", "rho", "acc(%)", "loss", "params(M)", "flops(G)"];

impl Report {
    pub fn render_table(&self) -> String {
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    r.stage.clone(),
                    format!("{:.2}", r.rho),
                    format!("{:.2}", 100.0 * r.accuracy),
                    format!("{:.4}", r.loss),
                    format!("{:.6}", r.params as f64 / 1e6),
                    format!("{:.9}", r.flops as f64 / 1e9),
                ]
            })
            .collect();
        let mut widths = COLUMNS.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &COLUMNS);
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("report line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        Ok(Report { rows })
    }

    /// Reads back [`Self::render_table`], at its printed precision.
    pub fn parse_table(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().map(|l| l.split_whitespace().collect()).unwrap_or_default();
        if header != COLUMNS {
            return Err(Error::Format(format!("unexpected report header {header:?}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("report cell '{s}': {e}")))
        };
        let mut rows = Vec::new();
        for l in lines {
            let c: Vec<&str> = l.split_whitespace().collect();
            if c.len() != COLUMNS.len() {
                return Err(Error::Format(format!("report row has {} cells: '{l}'", c.len())));
            }
            rows.push(ReportRow {
                model: c[0].into(),
                stage: c[1].into(),
                rho: num(c[2])?,
                accuracy: num(c[3])? / 100.0,
                loss: num(c[4])?,
                params: (num(c[5])? * 1e6).round() as u64,
                flops: (num(c[6])? * 1e9).round() as u64,
            });
        }
        Ok(Report { rows })
    }
}

/// One row per search or fine-tune checkpoint in `dir`, evaluated on the
/// test split of the data the checkpoint was trained on. Sorted by
/// decreasing keep ratio, then name.
pub fn build_report(dir: &Path, batch_size: usize) -> Result<Report> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ckpt") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut rows = Vec::new();
    for path in paths {
        let ck = Checkpoint::load(&path)?;
        let (rho, scores) = match &ck {
            Checkpoint::Scored(c) if c.stage == "search" => (1.0, Some(&c.model.scores)),
            Checkpoint::Plain(c) if c.stage == "finetune" => (c.rho.unwrap_or(1.0), None),
            _ => continue,
        };
        let data = ck
            .data()
            .ok_or_else(|| Error::Format(format!("{}: no dataset recorded", path.display())))?;
        let eval = evaluate_split(ck.backbone(), scores, data, "test", batch_size)?;
        let cost = measured_cost(ck.backbone())?;
        rows.push(ReportRow {
            model: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            stage: ck.stage().to_string(),
            rho,
            accuracy: eval.accuracy,
            loss: eval.loss,
            params: cost.total.params,
            flops: cost.total.flops,
        });
    }
    rows.sort_by(|a, b| b.rho.total_cmp(&a.rho).then_with(|| a.model.cmp(&b.model)));
    Ok(Report { rows })
}
