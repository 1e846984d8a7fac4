//! Line-delimited JSON run reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Record {
    Run {
        command: String,
        profile: String,
        seed: u64,
        config: serde_json::Value,
    },
    Epoch {
        phase: Phase,
        iteration: usize,
        epoch: usize,
        loss: f64,
    },
    Labels {
        iteration: usize,
        mu: f64,
        sigma: f64,
        thresholds: Vec<f64>,
        label_pixels: Vec<usize>,
    },
    Iteration {
        iteration: usize,
        final_loss: Option<f64>,
        auroc: Option<f64>,
        aupro: Option<f64>,
        auroc_filtered: Option<f64>,
        aupro_filtered: Option<f64>,
    },
    Checkpoint {
        iteration: usize,
        file: String,
    },
    Threshold {
        mu: f64,
        sigma: f64,
        value: f64,
        postprocess: bool,
    },
    Metric {
        name: String,
        value: f64,
        fpr_limit: Option<f64>,
        pixels: usize,
        positives: usize,
        negatives: usize,
    },
    Region {
        rank: usize,
        pixels: usize,
        raw: BTreeMap<String, f64>,
        standardized: BTreeMap<String, f64>,
        rule_grades: Vec<f64>,
        grade: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Contrastive,
}

pub fn to_line(record: &Record) -> Result<String> {
    Ok(serde_json::to_string(record)?)
}

/// Parses a whole report; blank lines are skipped.
pub fn parse_report(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("report line {}", i + 1)))
        .collect()
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_report(&text)
}

pub struct ReportWriter {
    out: BufWriter<File>,
}

impl ReportWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn emit(&mut self, record: &Record) -> Result<()> {
        writeln!(self.out, "{}", to_line(record)?)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Fixed-width text table.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}
