//! Static report: per-epoch comparison of a self-calibrated run against a
//! baseline run, line plots, and a strip of label snapshots across epochs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use selfcal_core::calibration::{read_log, LogRow};
use selfcal_core::datasets::load_gray_map;
use selfcal_core::lock::DirLock;

use crate::config::RunConfig;
use crate::plot::{line_plot, strip, Series, BASELINE_COLOR, SC_COLOR};
use crate::UsageError;

/// Ids shown in the progress strip.
pub const STRIP_ROWS: usize = 4;
const STRIP_CELL: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean batch loss.
    pub loss: f64,
    pub val_mae: Option<f64>,
}

/// Collapses batch rows into one row per epoch.
pub fn summarize(rows: &[LogRow]) -> Vec<EpochSummary> {
    let mut by_epoch: BTreeMap<usize, Vec<&LogRow>> = BTreeMap::new();
    for r in rows {
        by_epoch.entry(r.epoch).or_default().push(r);
    }
    by_epoch
        .into_iter()
        .map(|(epoch, rs)| EpochSummary {
            epoch,
            lambda: rs.last().map(|r| r.lambda).unwrap_or(0.0),
            loss: rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64,
            val_mae: rs.iter().rev().find_map(|r| r.val_mae),
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Full outer join on epoch. With no baseline the comparison columns are
/// omitted.
pub fn comparison_csv(sc: &[EpochSummary], baseline: Option<&[EpochSummary]>) -> String {
    let Some(base) = baseline else {
        let mut out = String::from("epoch,lambda,loss,val_mae\n");
        for s in sc {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                s.epoch,
                s.lambda,
                s.loss,
                opt(s.val_mae)
            ));
        }
        return out;
    };
    let mut joined: BTreeMap<usize, (Option<&EpochSummary>, Option<&EpochSummary>)> = BTreeMap::new();
    for s in sc {
        joined.entry(s.epoch).or_default().0 = Some(s);
    }
    for b in base {
        joined.entry(b.epoch).or_default().1 = Some(b);
    }
    let mut out = String::from("epoch,sc_lambda,sc_loss,sc_val_mae,baseline_lambda,baseline_loss,baseline_val_mae\n");
    for (epoch, (s, b)) in joined {
        out.push_str(&format!(
            "{epoch},{},{},{},{},{},{}\n",
            opt(s.map(|s| s.lambda)),
            opt(s.map(|s| s.loss)),
            opt(s.and_then(|s| s.val_mae)),
            opt(b.map(|b| b.lambda)),
            opt(b.map(|b| b.loss)),
            opt(b.and_then(|b| b.val_mae)),
        ));
    }
    out
}

fn series(name: &str, rows: &[EpochSummary], color: [u8; 3], f: impl Fn(&EpochSummary) -> Option<f64>) -> Series {
    Series {
        name: name.into(),
        points: rows.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect(),
        color,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotInfo {
    pub file: String,
    pub series: Vec<(String, [u8; 3])>,
    /// `(x_min, x_max, y_min, y_max)`.
    pub bounds: Option<(f64, f64, f64, f64)>,
}

/// `report.json`: what was drawn and from which runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub run: PathBuf,
    pub baseline: Option<PathBuf>,
    pub comparison: bool,
    pub plots: Vec<PlotInfo>,
    /// Label ids in the progress strip (rows), columns being Y₁ then epochs.
    pub strip_ids: Vec<String>,
    pub strip_epochs: Vec<usize>,
}

fn write_plot(dir: &Path, file: &str, series: Vec<Series>) -> Result<PlotInfo> {
    let img = line_plot(&series, 480, 320);
    let p = dir.join(file);
    img.save(&p).with_context(|| format!("writing {}", p.display()))?;
    Ok(PlotInfo {
        file: file.into(),
        bounds: crate::plot::bounds(&series),
        series: series.into_iter().map(|s| (s.name, s.color)).collect(),
    })
}

fn snapshot_epochs(labels_dir: &Path) -> Vec<usize> {
    let mut epochs: Vec<usize> = fs::read_dir(labels_dir)
        .into_iter()
        .flatten()
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("Y_epoch")?.parse().ok()
        })
        .collect();
    epochs.sort_unstable();
    epochs
}

fn progress_strip(store_dir: &Path, labels_dir: &Path, out: &Path) -> Result<(Vec<String>, Vec<usize>)> {
    let y1 = store_dir.join("Y1");
    let mut ids: Vec<String> = fs::read_dir(&y1)
        .with_context(|| format!("reading {}", y1.display()))?
        .filter_map(|e| {
            let p = e.ok()?.path();
            if p.extension()? != "png" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    ids.truncate(STRIP_ROWS);
    let epochs = snapshot_epochs(labels_dir);
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let mut row = vec![load_gray_map(&y1.join(format!("{id}.png")))?];
        for n in &epochs {
            let p = labels_dir.join(format!("Y_epoch{n}")).join(format!("{id}.png"));
            row.push(load_gray_map(&p)?);
        }
        rows.push(row);
    }
    let p = out.join("progress.png");
    strip(&rows, STRIP_CELL)
        .save(&p)
        .with_context(|| format!("writing {}", p.display()))?;
    Ok((ids, epochs))
}

pub fn report(cfg: &RunConfig) -> Result<ReportIndex> {
    let run = &cfg.paths.saliency_dir;
    let log_path = run.join("train_log.csv");
    if !log_path.is_file() {
        bail!(UsageError(format!("no training log at {}", log_path.display())));
    }
    let sc = summarize(&read_log(&log_path)?);
    let baseline = match &cfg.paths.baseline_dir {
        Some(b) if b.join("train_log.csv").is_file() => Some(summarize(&read_log(&b.join("train_log.csv"))?)),
        Some(b) => {
            warn!(
                "baseline run {} has no training log; omitting the comparison",
                b.display()
            );
            None
        }
        None => None,
    };
    let dir = &cfg.paths.report_dir;
    let _lock = DirLock::acquire(dir)?;
    fs::write(dir.join("comparison.csv"), comparison_csv(&sc, baseline.as_deref()))?;
    let mut plots = Vec::new();
    let pick = |rows: &[EpochSummary], f: fn(&EpochSummary) -> Option<f64>| {
        let mut s = vec![series("self-calibrated", rows, SC_COLOR, f)];
        if let Some(b) = &baseline {
            s.push(series("baseline", b, BASELINE_COLOR, f));
        }
        s
    };
    plots.push(write_plot(dir, "loss.png", pick(&sc, |r| Some(r.loss)))?);
    let has_val = sc.iter().any(|r| r.val_mae.is_some()) || baseline.iter().flatten().any(|r| r.val_mae.is_some());
    if has_val {
        plots.push(write_plot(dir, "val_mae.png", pick(&sc, |r| r.val_mae))?);
    }
    let (strip_ids, strip_epochs) = if cfg.paths.store_dir.join("Y1").is_dir() {
        progress_strip(&cfg.paths.store_dir, &run.join("labels"), dir)?
    } else {
        warn!(
            "no Y1 labels in {}; skipping the progress strip",
            cfg.paths.store_dir.display()
        );
        (Vec::new(), Vec::new())
    };
    let index = ReportIndex {
        run: run.clone(),
        comparison: baseline.is_some(),
        baseline: baseline.as_ref().and(cfg.paths.baseline_dir.clone()),
        plots,
        strip_ids,
        strip_epochs,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&index)? + "\n")?;
    cfg.write_to(dir)?;
    info!("report written to {}", dir.display());
    Ok(index)
}
