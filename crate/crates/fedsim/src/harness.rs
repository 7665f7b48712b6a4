//! Experiment driver: evaluation, mask-overlap analysis, and the file
//! outputs a run leaves behind.
//!
//! A run directory contains `history.jsonl` (one round report per line),
//! `summary.csv` (final per-client accuracy and sparsity), `curve.csv`
//! (mean accuracy per round), the two mask-overlap matrices, and optional
//! periodic snapshots with full parameters and run-length encoded masks.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{FLConfig, SweepSpec};
use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::mask::{self, BinaryMask};
use crate::model::{self, Layout, ParamVector};
use crate::report::RoundReport;
use crate::server::{self, ClientState, FederationRun};

/// Fraction of test samples the model labels correctly.
pub fn evaluate_client(theta: &ParamVector, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(FedError::Input(
            "cannot evaluate on an empty test set".into(),
        ));
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        if model::predict(theta, test.row(i)) == test.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Pairwise overlap of personalized positions, as intersection over union.
/// Symmetric with unit diagonal. All-empty masks overlap perfectly by
/// convention; a warning flags that degenerate case.
pub fn iou_matrix(masks: &[BinaryMask]) -> Vec<Vec<f64>> {
    if masks.iter().all(|m| m.popcount() == 0) {
        log::warn!("all masks are empty; overlap matrix is vacuously 1");
    }
    masks
        .iter()
        .map(|a| masks.iter().map(|b| mask::iou(a, b)).collect())
        .collect()
}

/// Overlap matrix restricted to the final layer, where personalization is
/// expected to concentrate.
pub fn final_layer_iou_matrix(masks: &[BinaryMask], layout: &Layout) -> Result<Vec<Vec<f64>>> {
    let last = mask::layer_mask(layout, layout.layer_count() - 1)?;
    let restricted: Vec<BinaryMask> = masks.iter().map(|m| m.and(&last)).collect();
    Ok(iou_matrix(&restricted))
}

fn write_matrix_csv(path: &Path, matrix: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in matrix {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SnapshotClient {
    id: usize,
    mask_rle: String,
    theta: Vec<f64>,
}

#[derive(Serialize)]
struct Snapshot {
    round: usize,
    clients: Vec<SnapshotClient>,
}

fn write_snapshot(dir: &Path, round: usize, clients: &[ClientState]) -> Result<()> {
    let snap = Snapshot {
        round,
        clients: clients
            .iter()
            .map(|c| SnapshotClient {
                id: c.id,
                mask_rle: c.mask.to_rle(),
                theta: c.theta.values().to_vec(),
            })
            .collect(),
    };
    let path = dir.join(format!("snapshot_round{round:04}.json"));
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer(file, &snap)
        .map_err(|e| FedError::Internal(format!("snapshot serialization failed: {e}")))?;
    Ok(())
}

/// Run one configured experiment and write its artifacts under the config's
/// output directory. Returns the in-memory run for further inspection.
pub fn run_experiment(cfg: &FLConfig) -> Result<FederationRun> {
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;

    let history_file = File::create(dir.join("history.jsonl"))?;
    let mut history = BufWriter::new(history_file);
    let interval = cfg.federation.snapshot_interval;

    let mut observer = |round: usize, clients: &[ClientState], report: &RoundReport| {
        serde_json::to_writer(&mut history, report)
            .map_err(|e| FedError::Internal(format!("history serialization failed: {e}")))?;
        history.write_all(b"\n")?;
        if interval > 0 && (round + 1).is_multiple_of(interval) {
            write_snapshot(dir, round, clients)?;
        }
        Ok(())
    };
    let run = server::run_federation(cfg, Some(&mut observer))?;
    history.flush()?;

    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    summary.write_record(["client_id", "accuracy", "sparsity"])?;
    for (c, &acc) in run.clients.iter().zip(&run.final_accuracy) {
        summary.write_record([
            c.id.to_string(),
            acc.to_string(),
            c.mask.personalized_fraction().to_string(),
        ])?;
    }
    summary.flush()?;

    let mut curve = csv::Writer::from_path(dir.join("curve.csv"))?;
    curve.write_record(["round", "mean_accuracy"])?;
    for report in &run.reports {
        curve.write_record([report.round.to_string(), report.mean_accuracy.to_string()])?;
    }
    curve.flush()?;

    let masks: Vec<BinaryMask> = run.clients.iter().map(|c| c.mask.clone()).collect();
    write_matrix_csv(&dir.join("iou.csv"), &iou_matrix(&masks))?;
    let layout = run.clients[0].theta.layout();
    write_matrix_csv(
        &dir.join("iou_final_layer.csv"),
        &final_layer_iou_matrix(&masks, layout)?,
    )?;

    Ok(run)
}

/// Aggregated outcome of one sweep cell.
#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub cell_index: usize,
    pub p: f64,
    pub alpha: f64,
    pub train_size: usize,
    pub master_seed: u64,
    pub mean_accuracy: f64,
    pub mean_sparsity: f64,
}

/// Run every cell of a sweep (cells in parallel) and write `grid.csv` under
/// the base config's output directory.
pub fn run_grid(base: &FLConfig, sweep: &SweepSpec) -> Result<Vec<GridRow>> {
    let cells = sweep.cells(base);
    let rows: Vec<GridRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| -> Result<GridRow> {
            let cfg = cell.apply(base, i);
            let run = server::run_federation(&cfg, None)?;
            let mean_accuracy = crate::report::mean(&run.final_accuracy);
            let sparsities: Vec<f64> = run
                .clients
                .iter()
                .map(|c| c.mask.personalized_fraction())
                .collect();
            Ok(GridRow {
                cell_index: i,
                p: cell.p,
                alpha: cell.alpha,
                train_size: cell.train_size,
                master_seed: cfg.federation.master_seed,
                mean_accuracy,
                mean_sparsity: crate::report::mean(&sparsities),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&base.output.dir)?;
    let mut w = csv::Writer::from_path(base.output.dir.join("grid.csv"))?;
    w.write_record([
        "cell",
        "p",
        "alpha",
        "train_size",
        "master_seed",
        "mean_accuracy",
        "mean_sparsity",
    ])?;
    for row in &rows {
        w.write_record([
            row.cell_index.to_string(),
            row.p.to_string(),
            row.alpha.to_string(),
            row.train_size.to_string(),
            row.master_seed.to_string(),
            row.mean_accuracy.to_string(),
            row.mean_sparsity.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
