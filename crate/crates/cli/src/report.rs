//! CSV outputs. Every real number is written with six decimals.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{Context, Result};
use narco::solver::{AblationRow, SearchTrace};
use serde::Serialize;

pub fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Clone, Debug, Serialize)]
pub struct ResultRow {
    pub instance_id: String,
    pub solver: String,
    pub objective: String,
    pub gap: String,
    pub feasible: bool,
    pub steps: usize,
    pub elapsed_ms: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    loss: String,
    best_objective: String,
    elapsed_ms: String,
}

#[derive(Serialize)]
struct AblationCsvRow<'a> {
    variant: &'a str,
    mean_gap: String,
    instances: usize,
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: String,
}

/// Standard output when `path` is `None`.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_all<T: Serialize>(out: Box<dyn Write>, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results(path: Option<&Path>, rows: &[ResultRow]) -> Result<()> {
    write_all(sink(path)?, rows)
}

/// `elapsed_ms` is left empty unless `timing` is set, so that repeated runs
/// give identical files.
pub fn write_trace(path: &Path, trace: &SearchTrace, timing: bool) -> Result<()> {
    let rows = trace.records.iter().map(|r| TraceRow {
        step: r.step,
        loss: fixed(r.loss),
        best_objective: fixed(r.best_objective),
        elapsed_ms: if timing { fixed(r.elapsed_ms) } else { String::new() },
    });
    write_all(sink(Some(path))?, rows)
}

pub fn write_ablation(path: Option<&Path>, rows: &[AblationRow]) -> Result<()> {
    let rows = rows.iter().map(|r| AblationCsvRow {
        variant: &r.variant,
        mean_gap: fixed(r.mean_gap),
        instances: r.gaps.len(),
    });
    write_all(sink(path)?, rows)
}

pub fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let rows = losses.iter().enumerate().map(|(epoch, &l)| LossRow { epoch, loss: fixed(l) });
    write_all(sink(Some(path))?, rows)
}
