//! Data loading, windowing, training, evaluation and benchmarking.

mod bench;
mod config;
mod data;
mod metrics;
mod train;
mod windows;

pub use bench::{
    alloc_stats, alloc_tracking_enabled, bench_scaling, reset_alloc_peak, scaling_ratios,
    write_bench_csv, AllocStats, BenchConfig, BenchRow, CountingAlloc,
};
pub use config::RunConfig;
pub use data::{
    load_csv_dataset, read_csv_table, split_sizes, CsvTable, Dataset, DatasetSpec, Split,
    Standardizer,
};
pub use metrics::{
    accuracy, detect, evaluate, mae, mse, point_adjust, precision_recall_f1, Detection, Metrics,
};
pub use train::{
    mean_loss, prepare_split, sample_loss, shared_priors, spread, train, train_model, Adam,
    EpochLog, Prepared, TrainReport,
};
pub use windows::{
    apply_mask, class_ids, make_windows, make_windows_with_step, window_count, Sample, Target,
    Windows,
};

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Write metrics as a flat JSON object.
pub fn write_metrics(metrics: &Metrics, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, metrics)?;
    writeln!(f)?;
    Ok(())
}

/// Write per-epoch losses as `epoch,train_loss,val_loss`.
pub fn write_train_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write a series as one row per step and one column per variate, with a
/// leading `step` column numbered from `first_step`.
pub fn write_series_csv(
    series: &crate::SeriesWindow,
    columns: &[String],
    first_step: usize,
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for s in 0..series.len() {
        let mut rec = vec![(first_step + s).to_string()];
        rec.extend((0..series.n_vars()).map(|i| series.get(i, s).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
