use std::collections::BTreeMap;

use rayon::prelude::*;

use super::config::RunConfig;
use super::data::{Dataset, Split};
use super::train::{prepare_split, shared_priors, Prepared};
use super::windows::make_windows_with_step;
use crate::error::{DemaError, Result};
use crate::model::{anomaly_score, select_threshold, Model, Task};
use crate::SeriesWindow;

/// Flat metric name to value map, serialised as `metrics.json`.
pub type Metrics = BTreeMap<String, f64>;

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len().max(1) as f64
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len().max(1) as f64
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len().max(1) as f64
}

/// `(precision, recall, f1)`; each is 0 when its denominator is.
pub fn precision_recall_f1(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p && t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p && !t).count() as f64;
    let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| !p && t).count() as f64;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    (p, r, ratio(2.0 * p * r, p + r))
}

/// Mark a whole true anomaly segment as detected when any point in it is.
pub fn point_adjust(pred: &[bool], truth: &[bool]) -> Vec<bool> {
    let mut out = pred.to_vec();
    let mut s = 0;
    while s < truth.len() {
        if !truth[s] {
            s += 1;
            continue;
        }
        let e = (s..truth.len()).find(|&k| !truth[k]).unwrap_or(truth.len());
        if out[s..e].iter().any(|&p| p) {
            out[s..e].iter_mut().for_each(|p| *p = true);
        }
        s = e;
    }
    out
}

fn check_compatible(model: &Model, cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let m = model.config();
    if m.task != cfg.task {
        return Err(DemaError::Contract(format!(
            "checkpoint was trained for {}, run asks for {}",
            m.task, cfg.task
        )));
    }
    if m.n_vars != data.n_vars() {
        return Err(DemaError::Contract(format!(
            "checkpoint expects {} variates, data has {}",
            m.n_vars,
            data.n_vars()
        )));
    }
    Ok(())
}

fn predict_all(model: &Model, samples: &[Prepared]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| {
            model
                .predict(&s.input, s.missing.as_ref(), &s.priors)
                .map(|t| t.into_data())
        })
        .collect()
}

/// Test-split metrics for the run's task.
pub fn evaluate(model: &Model, cfg: &RunConfig, data: &Dataset) -> Result<Metrics> {
    check_compatible(model, cfg, data)?;
    if cfg.task == Task::Anomaly {
        if data.labels.is_none() {
            return Err(DemaError::Contract(
                "anomaly evaluation needs a label column".into(),
            ));
        }
        return Ok(detect(model, cfg, data)?.metrics);
    }
    let shared = shared_priors(cfg, model.config(), data)?;
    let samples = prepare_split(
        cfg,
        model,
        data,
        Split::Test,
        shared.as_ref(),
        cfg.max_eval_windows,
    )?;
    if samples.is_empty() {
        return Err(DemaError::Config(
            "test split has no complete window".into(),
        ));
    }
    let preds = predict_all(model, &samples)?;
    let mut m = Metrics::new();
    m.insert("windows".into(), samples.len() as f64);
    match cfg.task {
        Task::Forecast | Task::Impute => {
            let (mut p, mut t) = (Vec::new(), Vec::new());
            for (s, y) in samples.iter().zip(&preds) {
                for (k, (&yk, &tk)) in y.iter().zip(s.target.data()).enumerate() {
                    if s.loss_mask
                        .as_ref()
                        .is_none_or(|mask| mask.data()[k] != 0.0)
                    {
                        p.push(yk);
                        t.push(tk);
                    }
                }
            }
            m.insert("mse".into(), mse(&p, &t));
            m.insert("mae".into(), mae(&p, &t));
            m.insert("points".into(), p.len() as f64);
        }
        Task::Classify => {
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(k, _)| k)
            };
            let p: Vec<usize> = preds.iter().map(|y| argmax(y)).collect();
            let t: Vec<usize> = samples.iter().map(|s| argmax(s.target.data())).collect();
            m.insert("accuracy".into(), accuracy(&p, &t));
        }
        Task::Anomaly => unreachable!("handled above"),
    }
    Ok(m)
}

/// Per-step anomaly output over the test split.
#[derive(Clone, Debug)]
pub struct Detection {
    /// Absolute index of the first scored step.
    pub start: usize,
    pub reconstruction: SeriesWindow,
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub threshold: f64,
    pub metrics: Metrics,
}

/// Reconstruct non-overlapping windows and return per-step scores plus
/// the input segment the windows cover.
fn score_split(
    model: &Model,
    cfg: &RunConfig,
    data: &Dataset,
    split: Split,
) -> Result<(usize, SeriesWindow, Vec<f64>, SeriesWindow)> {
    let m = model.config();
    let (series, _, offset) = data.segment(split, 0)?;
    let windows: Vec<_> =
        make_windows_with_step(&series, None, m.seq_len, 0, Task::Anomaly, m.seq_len)?.collect();
    let shared = shared_priors(cfg, m, data)?;
    let recon = windows
        .par_iter()
        .map(|w| {
            let priors = match &shared {
                Some(p) => p.clone(),
                None => model.priors(&w.input)?,
            };
            let y = model.predict(&w.input, None, &priors)?;
            SeriesWindow::new(m.n_vars, m.seq_len, y.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    let covered = windows.len() * m.seq_len;
    let mut rows = vec![Vec::with_capacity(covered); m.n_vars];
    let mut scores = Vec::with_capacity(covered);
    for (w, r) in windows.iter().zip(&recon) {
        scores.extend(anomaly_score(&w.input, r)?);
        for (i, row) in rows.iter_mut().enumerate() {
            row.extend_from_slice(r.row(i));
        }
    }
    let input = series.slice_time(0, covered)?;
    let recon = if covered == 0 {
        SeriesWindow::zeros(m.n_vars, 0)
    } else {
        SeriesWindow::from_rows(rows)?
    };
    Ok((offset, input, scores, recon))
}

/// Threshold on pooled train and test scores at the `anomaly_ratio`
/// quantile. With labels, test flags are also scored against them.
pub fn detect(model: &Model, cfg: &RunConfig, data: &Dataset) -> Result<Detection> {
    check_compatible(model, cfg, data)?;
    let (_, _, train_scores, _) = score_split(model, cfg, data, Split::Train)?;
    let (start, _, scores, reconstruction) = score_split(model, cfg, data, Split::Test)?;
    if scores.is_empty() {
        return Err(DemaError::Config(
            "test split is shorter than one window".into(),
        ));
    }
    let pooled: Vec<f64> = train_scores.iter().chain(&scores).copied().collect();
    let threshold = select_threshold(&pooled, cfg.anomaly_ratio)?;
    let mut flags: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
    let mut metrics = Metrics::new();
    if let Some(labels) = &data.labels {
        let truth: Vec<bool> = labels[start..start + scores.len()]
            .iter()
            .map(|&l| l != 0.0)
            .collect();
        if cfg.point_adjust {
            flags = point_adjust(&flags, &truth);
        }
        let (p, r, f1) = precision_recall_f1(&flags, &truth);
        metrics.insert("precision".into(), p);
        metrics.insert("recall".into(), r);
        metrics.insert("f1".into(), f1);
        metrics.insert("accuracy".into(), accuracy(&flags, &truth));
    }
    metrics.insert("threshold".into(), threshold);
    metrics.insert("points".into(), scores.len() as f64);
    Ok(Detection {
        start,
        reconstruction,
        scores,
        flags,
        threshold,
        metrics,
    })
}
