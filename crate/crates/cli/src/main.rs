//! Command-line front end for training, evaluating and running the model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dema_core::delay::delay_matrix;
use dema_core::model::{load_checkpoint, Model, Task};
use dema_core::pipeline::{
    apply_mask, bench_scaling, detect, evaluate, load_csv_dataset, make_windows_with_step, train,
    write_bench_csv, write_metrics, write_series_csv, write_train_log, BenchConfig, CountingAlloc,
    Dataset, DatasetSpec, Metrics, RunConfig, Standardizer,
};
use dema_core::spectral::decompose;
use dema_core::SeriesWindow;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

const CHECKPOINT_FILE: &str = "model.ckpt.json";

#[derive(Parser)]
#[command(
    name = "dema",
    version,
    about = "Dual-path delay-aware state-space models for multivariate time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// CSV with a header row; first column is a timestamp.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Checkpoint to load; defaults to `<out>/model.ckpt.json`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and keep the best-validation checkpoint.
    Train,
    /// Score a checkpoint on the test split.
    Evaluate,
    /// Forecast the steps after the end of the data.
    Forecast,
    /// Hide points of the last window and fill them in.
    Impute,
    /// Flag anomalous steps in the test split.
    Detect,
    /// Classify every window of the test split.
    Classify,
    /// Split the series into its dominant-frequency and residual parts.
    Decompose,
    /// Estimate pairwise lags, strengths and token shifts.
    Priors,
    /// Time and measure inference across lookback lengths.
    Bench,
}

struct Run {
    cfg: RunConfig,
    common: Common,
}

impl Run {
    fn new(common: Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => {
                RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        for kv in &common.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override `{kv}` is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        fs::create_dir_all(&common.out)
            .with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Self { cfg, common })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.common.out.join(name)
    }

    fn data_path(&self) -> Result<&Path> {
        self.common
            .data
            .as_deref()
            .context("this command needs --data")
    }

    /// Dataset z-scored with statistics from its training split.
    fn dataset(&self) -> Result<(Dataset, Standardizer)> {
        let spec = DatasetSpec {
            path: self.data_path()?.to_path_buf(),
            train_ratio: self.cfg.train_ratio,
            val_ratio: self.cfg.val_ratio,
            test_ratio: self.cfg.test_ratio,
            label_column: self.cfg.label_column.clone(),
        };
        let mut data =
            load_csv_dataset(&spec).with_context(|| format!("loading {}", spec.path.display()))?;
        let scaler = data.standardize();
        Ok((data, scaler))
    }

    /// The checkpoint, with the run's task taken from it.
    fn model(&mut self) -> Result<Model> {
        let path = self
            .common
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out(CHECKPOINT_FILE));
        let model =
            load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        self.cfg.task = model.config().task;
        Ok(model)
    }

    fn last_window(&self, data: &Dataset, model: &Model) -> Result<(SeriesWindow, usize)> {
        let t = model.config().seq_len;
        let len = data.series.len();
        if len < t {
            bail!("data has {len} steps, the model needs {t}");
        }
        Ok((data.series.slice_time(len - t, len)?, len - t))
    }

    fn write_metrics(&self, metrics: &Metrics) -> Result<()> {
        write_metrics(metrics, &self.out("metrics.json"))?;
        println!("{}", serde_json::to_string(metrics)?);
        Ok(())
    }
}

fn inverted(mut w: SeriesWindow, scaler: &Standardizer) -> SeriesWindow {
    scaler.invert(&mut w);
    w
}

fn cmd_train(run: Run) -> Result<()> {
    let (data, _) = run.dataset()?;
    let ckpt = run.out(CHECKPOINT_FILE);
    fs::write(run.out("config.txt"), run.cfg.to_text())?;
    let report = train(&run.cfg, &data, Some(&ckpt))?;
    write_train_log(&report.log, &run.out("train_log.csv"))?;
    let mut metrics = evaluate(&report.model, &run.cfg, &data)?;
    metrics.insert("best_epoch".into(), report.best_epoch as f64);
    if let Some(best) = report.log.get(report.best_epoch.saturating_sub(1)) {
        metrics.insert("best_val_loss".into(), best.val_loss);
    }
    run.write_metrics(&metrics)?;
    eprintln!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn cmd_evaluate(mut run: Run) -> Result<()> {
    let model = run.model()?;
    let (data, _) = run.dataset()?;
    let metrics = evaluate(&model, &run.cfg, &data)?;
    run.write_metrics(&metrics)
}

fn cmd_forecast(mut run: Run) -> Result<()> {
    let model = run.model()?;
    if model.config().task != Task::Forecast {
        bail!(
            "checkpoint was trained for {}, not forecast",
            model.config().task
        );
    }
    let (data, scaler) = run.dataset()?;
    let (window, _) = run.last_window(&data, &model)?;
    let y = model.predict(&window, None, &model.priors(&window)?)?;
    let pred = SeriesWindow::new(data.n_vars(), model.config().horizon, y.into_data())?;
    write_series_csv(
        &inverted(pred, &scaler),
        &data.columns,
        data.series.len(),
        &run.out("predictions.csv"),
    )?;
    Ok(())
}

fn cmd_impute(mut run: Run) -> Result<()> {
    let model = run.model()?;
    if model.config().task != Task::Impute {
        bail!(
            "checkpoint was trained for {}, not impute",
            model.config().task
        );
    }
    let (data, scaler) = run.dataset()?;
    let (clean, start) = run.last_window(&data, &model)?;
    let (masked, mask) = apply_mask(&clean, run.cfg.mask_ratio, run.cfg.seed);
    let y = model.predict(&masked, Some(&mask), &model.priors(&masked)?)?;
    let mut filled = clean.clone();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (k, &m) in mask.data().iter().enumerate() {
        if m != 0.0 {
            filled.data_mut()[k] = y.data()[k];
            pred.push(y.data()[k]);
            truth.push(clean.data()[k]);
        }
    }
    write_series_csv(
        &inverted(filled, &scaler),
        &data.columns,
        start,
        &run.out("predictions.csv"),
    )?;
    write_series_csv(&mask, &data.columns, start, &run.out("mask.csv"))?;
    let mut metrics = Metrics::new();
    metrics.insert("mse".into(), dema_core::pipeline::mse(&pred, &truth));
    metrics.insert("mae".into(), dema_core::pipeline::mae(&pred, &truth));
    metrics.insert("points".into(), pred.len() as f64);
    run.write_metrics(&metrics)
}

fn cmd_detect(mut run: Run) -> Result<()> {
    let model = run.model()?;
    let (data, scaler) = run.dataset()?;
    let det = detect(&model, &run.cfg, &data)?;
    write_series_csv(
        &inverted(det.reconstruction.clone(), &scaler),
        &data.columns,
        det.start,
        &run.out("predictions.csv"),
    )?;
    let mut w = csv::Writer::from_path(run.out("anomalies.csv"))?;
    w.write_record(["step", "score", "anomaly"])?;
    for (k, (s, f)) in det.scores.iter().zip(&det.flags).enumerate() {
        w.write_record([
            (det.start + k).to_string(),
            s.to_string(),
            u8::from(*f).to_string(),
        ])?;
    }
    w.flush()?;
    run.write_metrics(&det.metrics)
}

fn cmd_classify(mut run: Run) -> Result<()> {
    let model = run.model()?;
    if model.config().task != Task::Classify {
        bail!(
            "checkpoint was trained for {}, not classify",
            model.config().task
        );
    }
    let (data, _) = run.dataset()?;
    let t = model.config().seq_len;
    let (series, labels, offset) = data.segment(dema_core::pipeline::Split::Test, t)?;
    let classes = model.config().num_classes;
    let mut w = csv::Writer::from_path(run.out("predictions.csv"))?;
    let mut header = vec!["step".to_string(), "class".to_string()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for s in make_windows_with_step(&series, None, t, 0, Task::Anomaly, 1)? {
        let p = model.predict(&s.input, None, &model.priors(&s.input)?)?;
        let class = p
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(c, _)| c);
        let end = s.start + t - 1;
        if let Some(l) = &labels {
            hits += usize::from(l[end] == class as f64);
            total += 1;
        }
        let mut rec = vec![(offset + end).to_string(), class.to_string()];
        rec.extend(p.data().iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    if total > 0 {
        let mut metrics = Metrics::new();
        metrics.insert("accuracy".into(), hits as f64 / total as f64);
        metrics.insert("windows".into(), total as f64);
        run.write_metrics(&metrics)?;
    }
    Ok(())
}

fn cmd_decompose(run: Run) -> Result<()> {
    let (data, scaler) = run.dataset()?;
    let split = decompose(&data.series, run.cfg.theta)?;
    let mut time = split.cross_time.clone();
    scaler.invert(&mut time);
    write_series_csv(&time, &data.columns, 0, &run.out("cross_time.csv"))?;
    // the residual carries no mean, so only the scale is undone
    let mut var = split.cross_variate.clone();
    for i in 0..var.n_vars() {
        var.row_mut(i).iter_mut().for_each(|x| *x *= scaler.std[i]);
    }
    write_series_csv(&var, &data.columns, 0, &run.out("cross_variate.csv"))?;
    fs::write(
        run.out("selection.json"),
        serde_json::to_string_pretty(&split.record())?,
    )?;
    Ok(())
}

fn cmd_priors(run: Run) -> Result<()> {
    let (data, _) = run.dataset()?;
    let max_lag = if run.cfg.max_lag == 0 {
        dema_core::delay::default_max_lag(data.series.len())
    } else {
        run.cfg.max_lag
    };
    let priors = delay_matrix(&data.series, max_lag, run.cfg.stride)?;
    let mut doc = BTreeMap::new();
    doc.insert("columns", serde_json::to_value(&data.columns)?);
    doc.insert("priors", serde_json::to_value(&priors)?);
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(run.out("priors.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_bench(run: Run) -> Result<()> {
    let rows = bench_scaling(&run.cfg.bench_lengths, &BenchConfig::from_run(&run.cfg))?;
    write_bench_csv(&rows, &run.out("bench.csv"))?;
    println!("T,ms,bytes");
    for r in &rows {
        println!("{},{:.4},{}", r.seq_len, r.ms, r.bytes);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = Run::new(cli.common)?;
    match cli.command {
        Command::Train => cmd_train(run),
        Command::Evaluate => cmd_evaluate(run),
        Command::Forecast => cmd_forecast(run),
        Command::Impute => cmd_impute(run),
        Command::Detect => cmd_detect(run),
        Command::Classify => cmd_classify(run),
        Command::Decompose => cmd_decompose(run),
        Command::Priors => cmd_priors(run),
        Command::Bench => cmd_bench(run),
    }
}
