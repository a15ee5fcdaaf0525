//! CSV I/O for metrics and histories, and the cross-run report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bea_core::detector::{EpochRecord, History};
use bea_core::metrics::RetentionCurve;

use crate::error::{io_err, Result};
use crate::evaluate::MetricsRow;
use crate::experiment::{load_evaluation, HISTORY_FILE, METRICS_FILE};
use crate::plots;

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Merges `rows` into the CSV at `path`, replacing rows with the same
/// `(config_id, seed)`; the file stays sorted by that key.
pub fn upsert_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut merged: BTreeMap<(String, u64), MetricsRow> = BTreeMap::new();
    if path.exists() {
        for r in read_metrics(path)? {
            merged.insert((r.config_id.clone(), r.seed), r);
        }
    }
    for r in rows {
        merged.insert((r.config_id.clone(), r.seed), r.clone());
    }
    let all: Vec<MetricsRow> = merged.into_values().collect();
    write_metrics(path, &all)
}

pub fn write_history(path: &Path, history: &History) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &history.epochs {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_history(path: &Path) -> Result<History> {
    let mut r = csv::Reader::from_path(path)?;
    let epochs: Vec<EpochRecord> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(History { epochs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub rows: Vec<MetricsRow>,
    pub metrics_csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

fn mean_curve(curves: &[RetentionCurve]) -> RetentionCurve {
    let n = curves.len() as f64;
    let first = &curves[0];
    let ap50_values: Vec<f64> = (0..first.fractions.len())
        .map(|i| curves.iter().map(|c| c.ap50_values[i]).sum::<f64>() / n)
        .collect();
    RetentionCurve {
        fractions: first.fractions.clone(),
        ap50_values,
        auc: curves.iter().map(|c| c.auc).sum::<f64>() / n,
    }
}

fn mean_history(histories: &[History]) -> History {
    let epochs = histories.iter().map(|h| h.epochs.len()).min().unwrap_or(0);
    let avg = |pick: &dyn Fn(&EpochRecord) -> Option<f64>, e: usize| -> Option<f64> {
        let vals: Option<Vec<f64>> = histories.iter().map(|h| pick(&h.epochs[e])).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    History {
        epochs: (0..epochs)
            .map(|e| EpochRecord {
                epoch: e,
                l_ta_conf: avg(&|r| r.l_ta_conf, e),
                l_tq_conf: avg(&|r| r.l_tq_conf, e),
                mse_alpha_beta: avg(&|r| r.mse_alpha_beta, e),
                l_conv: avg(&|r| Some(r.l_conv), e).unwrap_or(0.0),
                l_tandem: avg(&|r| r.l_tandem, e),
                l_div: avg(&|r| Some(r.l_div), e).unwrap_or(0.0),
                l_total: avg(&|r| Some(r.l_total), e).unwrap_or(0.0),
                dropped_gt: histories.iter().map(|h| h.epochs[e].dropped_gt).sum(),
                learning_rate: histories[0].epochs[e].learning_rate,
            })
            .collect(),
    }
}

struct RunData {
    row: MetricsRow,
    retention: RetentionCurve,
    roc_near: Vec<(f64, f64)>,
    roc_far: Vec<(f64, f64)>,
    history: Option<History>,
}

fn load_run(dir: &Path) -> Result<Option<RunData>> {
    let metrics = dir.join(METRICS_FILE);
    if !metrics.exists() {
        return Ok(None);
    }
    let row = match read_metrics(&metrics)?.into_iter().next() {
        Some(r) => r,
        None => return Ok(None),
    };
    let ev = load_evaluation(dir)?;
    let history_path = dir.join(HISTORY_FILE);
    let history = if history_path.exists() {
        Some(read_history(&history_path)?)
    } else {
        None
    };
    Ok(Some(RunData {
        row,
        retention: ev.retention,
        roc_near: ev.roc_near,
        roc_far: ev.roc_far,
        history,
    }))
}

/// Merges the metrics of `run_dirs` into `<out>/metrics.csv` and draws one
/// curve per config: retention averaged over seeds, ROC of the lowest seed,
/// monitors averaged over seeds. Runs without a metrics file are skipped.
pub fn emit_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    crate::experiment::ensure_writable(out)?;
    let mut by_config: BTreeMap<String, Vec<RunData>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for dir in run_dirs {
        match load_run(dir)? {
            Some(run) => by_config
                .entry(run.row.config_id.clone())
                .or_default()
                .push(run),
            None => {
                log::warn!("{}: no {METRICS_FILE}, skipping", dir.display());
                skipped.push(dir.clone());
            }
        }
    }
    for runs in by_config.values_mut() {
        runs.sort_by_key(|r| r.row.seed);
    }
    let mut rows: Vec<MetricsRow> = by_config
        .values()
        .flatten()
        .map(|r| r.row.clone())
        .collect();
    rows.sort_by(|a, b| (&a.config_id, a.seed).cmp(&(&b.config_id, b.seed)));
    let metrics_csv = out.join("metrics.csv");
    write_metrics(&metrics_csv, &rows)?;

    let mut written = Vec::new();
    if !by_config.is_empty() {
        let curves: Vec<(String, RetentionCurve)> = by_config
            .iter()
            .map(|(id, runs)| {
                let c: Vec<RetentionCurve> = runs.iter().map(|r| r.retention.clone()).collect();
                (id.clone(), mean_curve(&c))
            })
            .collect();
        let refs: Vec<(String, &RetentionCurve)> =
            curves.iter().map(|(l, c)| (l.clone(), c)).collect();
        let p = out.join("retention.svg");
        plots::plot_retention(&p, &refs)?;
        written.push(p);

        for (name, title, pick) in [
            (
                "roc_near.svg",
                "near-OOD ROC",
                (|r: &RunData| r.roc_near.clone()) as fn(&RunData) -> Vec<(f64, f64)>,
            ),
            ("roc_far.svg", "far-OOD ROC", |r: &RunData| {
                r.roc_far.clone()
            }),
        ] {
            let series: Vec<(String, Vec<(f64, f64)>)> = by_config
                .iter()
                .map(|(id, runs)| (format!("{id} (seed {})", runs[0].row.seed), pick(&runs[0])))
                .filter(|(_, pts)| !pts.is_empty())
                .collect();
            let refs: Vec<(String, &[(f64, f64)])> = series
                .iter()
                .map(|(l, p)| (l.clone(), p.as_slice()))
                .collect();
            let p = out.join(name);
            plots::plot_roc(&p, title, &refs)?;
            written.push(p);
        }

        let histories: Vec<(String, History)> = by_config
            .iter()
            .filter_map(|(id, runs)| {
                let hs: Option<Vec<History>> = runs.iter().map(|r| r.history.clone()).collect();
                hs.map(|hs| (id.clone(), mean_history(&hs)))
            })
            .collect();
        let refs: Vec<(String, &History)> = histories.iter().map(|(l, h)| (l.clone(), h)).collect();
        written.extend(plots::plot_monitors(out, "", &refs)?);
    }
    Ok(ReportSummary {
        rows,
        metrics_csv,
        plots: written,
        skipped,
    })
}
