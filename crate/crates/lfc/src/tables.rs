//! CSV outputs. Dice is written in percent, ASD in pixels.

use std::path::Path;

use lfc_core::adapt::{EpochLog, StepLog};
use lfc_core::metrics::{format_mean_std, mean_std, Metric, MetricReport, FOREGROUND};
use lfc_core::train::SourceEpochLog;

use crate::error::{CliError, CliResult};

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Value as reported: Dice in percent, ASD unchanged.
pub fn display_value(metric: Metric, v: f64) -> f64 {
    match metric {
        Metric::Dice => v * 100.0,
        Metric::Asd => v,
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let to_io = |e: csv::Error| std::io::Error::other(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::output(path)(to_io(e)))?;
    w.write_record(header).map_err(|e| CliError::output(path)(to_io(e)))?;
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::output(path)(to_io(e)))?;
    }
    w.flush().map_err(CliError::output(path))
}

pub fn write_report(path: &Path, report: &MetricReport) -> CliResult<()> {
    write_rows(
        path,
        &["class", "metric", "mean", "std", "n", "excluded"],
        report.rows.iter().map(|r| {
            vec![
                r.class.clone(),
                r.metric.as_str().into(),
                num(display_value(r.metric, r.mean)),
                num(display_value(r.metric, r.std)),
                r.n.to_string(),
                r.excluded.to_string(),
            ]
        }),
    )
}

/// Human-readable `class metric mean±std` lines.
pub fn report_lines(report: &MetricReport) -> Vec<String> {
    report
        .rows
        .iter()
        .map(|r| {
            let unit = match r.metric {
                Metric::Dice => "Dice (%)",
                Metric::Asd => "ASD (pixel)",
            };
            format!(
                "{:<5} {:<12} {}",
                r.class,
                unit,
                format_mean_std(display_value(r.metric, r.mean), display_value(r.metric, r.std))
            )
        })
        .collect()
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> CliResult<()> {
    write_rows(
        path,
        &["epoch", "alpha", "mean_omega", "l_fix", "l_sl", "l_total", "dice_val"],
        logs.iter().map(|l| {
            vec![
                l.epoch.to_string(),
                num(l.alpha),
                num(l.mean_omega),
                num(l.l_fix),
                opt(l.l_sl),
                num(l.l_total),
                opt(l.dice_val.map(|d| d * 100.0)),
            ]
        }),
    )
}

fn joined<T: ToString>(values: impl IntoIterator<Item = T>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_step_log(path: &Path, steps: &[StepLog]) -> CliResult<()> {
    write_rows(
        path,
        &["epoch", "step", "sample_ids", "transforms", "alpha", "omega", "l_fix", "l_sl", "l_total"],
        steps.iter().map(|s| {
            vec![
                s.epoch.to_string(),
                s.step.to_string(),
                joined(&s.sample_ids),
                joined(s.transforms.iter().map(|t| t.kind())),
                num(s.loss.alpha),
                joined(&s.loss.omega),
                joined(&s.loss.l_fix),
                joined(&s.loss.l_sl),
                num(s.loss.l_total),
            ]
        }),
    )
}

pub fn write_source_log(path: &Path, logs: &[SourceEpochLog]) -> CliResult<()> {
    write_rows(
        path,
        &["epoch", "loss", "dice_val"],
        logs.iter()
            .map(|l| vec![l.epoch.to_string(), num(l.loss), opt(l.dice_val.map(|d| d * 100.0))]),
    )
}

pub fn write_ranking(path: &Path, ranked: &[lfc_core::curriculum::Ranked]) -> CliResult<()> {
    write_rows(
        path,
        &["sample_id", "difficulty"],
        ranked.iter().map(|r| vec![r.sample_id.to_string(), num(r.difficulty)]),
    )
}

/// One ablation mode across seeds.
#[derive(Debug, Clone)]
pub struct ModeResult {
    pub mode: String,
    /// Per seed, in seed order.
    pub reports: Vec<MetricReport>,
}

impl ModeResult {
    /// Per-seed means of one (class, metric) cell, in display units.
    pub fn cell(&self, class: &str, metric: Metric) -> Vec<f64> {
        self.reports
            .iter()
            .filter_map(|r| r.row(class, metric).map(|row| display_value(metric, row.mean)))
            .collect()
    }

    /// Per-seed mean foreground Dice in percent.
    pub fn mean_dice(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.mean_dice() * 100.0).collect()
    }
}

fn ablation_columns() -> Vec<(String, Option<(&'static str, Metric)>)> {
    let mut cols = Vec::new();
    for (_, class) in FOREGROUND {
        for metric in [Metric::Dice, Metric::Asd] {
            cols.push((format!("{class}_{}", metric.as_str()), Some((class, metric))));
        }
    }
    cols.push(("mean_dice".into(), None));
    cols
}

/// Rows are modes; cells are `mean±std` over seeds.
pub fn write_ablation(path: &Path, results: &[ModeResult]) -> CliResult<()> {
    let cols = ablation_columns();
    let mut header = vec!["mode", "seeds"];
    header.extend(cols.iter().map(|(n, _)| n.as_str()));
    write_rows(
        path,
        &header,
        results.iter().map(|m| {
            let mut row = vec![m.mode.clone(), m.reports.len().to_string()];
            for (_, cell) in &cols {
                let values = match cell {
                    Some((class, metric)) => m.cell(class, *metric),
                    None => m.mean_dice(),
                };
                let (mean, std) = mean_std(&values);
                row.push(format_mean_std(mean, std));
            }
            row
        }),
    )
}

/// Unrounded per-seed values behind [`write_ablation`].
pub fn write_ablation_raw(path: &Path, results: &[ModeResult], seeds: &[u64]) -> CliResult<()> {
    let cols = ablation_columns();
    let mut rows = Vec::new();
    for m in results {
        for (i, seed) in seeds.iter().enumerate().take(m.reports.len()) {
            for (name, cell) in &cols {
                let values = match cell {
                    Some((class, metric)) => m.cell(class, *metric),
                    None => m.mean_dice(),
                };
                if let Some(v) = values.get(i) {
                    rows.push(vec![m.mode.clone(), seed.to_string(), name.clone(), num(*v)]);
                }
            }
        }
    }
    write_rows(path, &["mode", "seed", "column", "value"], rows)
}
