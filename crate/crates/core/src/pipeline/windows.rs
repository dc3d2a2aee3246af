use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DemaError, Result};
use crate::model::Task;
use crate::SeriesWindow;

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Future steps (forecast) or the input itself (impute, anomaly).
    Series(SeriesWindow),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Offset of the input's first step within the source series.
    pub start: usize,
    pub input: SeriesWindow,
    pub target: Target,
}

/// Windows that fit in `len` steps when advancing by `step`.
pub fn window_count(len: usize, seq_len: usize, horizon: usize, task: Task, step: usize) -> usize {
    let need = seq_len + if task == Task::Forecast { horizon } else { 0 };
    if len < need || step == 0 {
        0
    } else {
        (len - need) / step + 1
    }
}

/// Random-access sliding windows over a series.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    series: &'a SeriesWindow,
    classes: Option<Vec<usize>>,
    seq_len: usize,
    horizon: usize,
    task: Task,
    step: usize,
    count: usize,
    next: usize,
}

/// Stride-1 windows for `task`. Classification reads its class from the
/// label at the window's last step.
pub fn make_windows<'a>(
    series: &'a SeriesWindow,
    labels: Option<&[f64]>,
    seq_len: usize,
    horizon: usize,
    task: Task,
) -> Result<Windows<'a>> {
    make_windows_with_step(series, labels, seq_len, horizon, task, 1)
}

pub fn make_windows_with_step<'a>(
    series: &'a SeriesWindow,
    labels: Option<&[f64]>,
    seq_len: usize,
    horizon: usize,
    task: Task,
    step: usize,
) -> Result<Windows<'a>> {
    let classes = if task == Task::Classify {
        let labels = labels
            .ok_or_else(|| DemaError::Contract("classification needs a label column".into()))?;
        Some(class_ids(labels)?)
    } else {
        None
    };
    let count = window_count(series.len(), seq_len, horizon, task, step);
    if count == 0 {
        log::warn!(
            "series of length {} is too short for {task} windows (lookback {seq_len})",
            series.len()
        );
    }
    Ok(Windows {
        series,
        classes,
        seq_len,
        horizon,
        task,
        step,
        count,
        next: 0,
    })
}

/// Labels as class indices; each must be a non-negative integer.
pub fn class_ids(labels: &[f64]) -> Result<Vec<usize>> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &v)| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(DemaError::Format {
                    row: r + 1,
                    col: 0,
                    msg: format!("label {v} is not a class index"),
                })
            }
        })
        .collect()
}

impl Windows<'_> {
    pub fn get(&self, i: usize) -> Option<Sample> {
        if i >= self.count {
            return None;
        }
        let start = i * self.step;
        let end = start + self.seq_len;
        let input = self.series.slice_time(start, end).expect("window in range");
        let target = match self.task {
            Task::Forecast => Target::Series(
                self.series
                    .slice_time(end, end + self.horizon)
                    .expect("horizon in range"),
            ),
            Task::Impute | Task::Anomaly => Target::Series(input.clone()),
            Task::Classify => Target::Class(self.classes.as_ref().expect("classes")[end - 1]),
        };
        Some(Sample {
            start,
            input,
            target,
        })
    }
}

impl Iterator for Windows<'_> {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        let s = self.get(self.next)?;
        self.next += 1;
        Some(s)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.count - self.next.min(self.count);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Windows<'_> {}

/// Hide exactly `floor(ratio * N * T)` uniformly chosen points. Returns the
/// window with those points zeroed and a mask holding 1 where hidden.
pub fn apply_mask(window: &SeriesWindow, ratio: f64, seed: u64) -> (SeriesWindow, SeriesWindow) {
    let total = window.data().len();
    let count = ((ratio.clamp(0.0, 1.0) * total as f64) + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = window.clone();
    let mut mask = SeriesWindow::zeros(window.n_vars(), window.len());
    for idx in sample(&mut rng, total, count.min(total)) {
        masked.data_mut()[idx] = 0.0;
        mask.data_mut()[idx] = 1.0;
    }
    (masked, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize, t: usize) -> SeriesWindow {
        SeriesWindow::from_fn(n, t, |i, s| (i * 1000 + s) as f64)
    }

    #[test]
    fn forecast_window_counts() {
        let s = ramp(1, 100);
        assert_eq!(
            make_windows(&s, None, 96, 4, Task::Forecast).unwrap().len(),
            1
        );
        let s = ramp(1, 200);
        let w: Vec<_> = make_windows(&s, None, 96, 96, Task::Forecast)
            .unwrap()
            .collect();
        assert_eq!(w.len(), 9);
        let Target::Series(y) = &w[8].target else {
            panic!()
        };
        assert_eq!(
            (w[8].input.get(0, 0), y.get(0, 0), y.len()),
            (8.0, 104.0, 96)
        );
    }

    #[test]
    fn reconstruction_targets_are_inputs() {
        let s = ramp(2, 40);
        for task in [Task::Anomaly, Task::Impute] {
            let w = make_windows(&s, None, 32, 99, task).unwrap();
            assert_eq!(w.len(), 9);
            for sample in w {
                assert_eq!(sample.target, Target::Series(sample.input.clone()));
            }
        }
    }

    #[test]
    fn short_series_gives_no_windows() {
        let s = ramp(1, 10);
        assert_eq!(
            make_windows(&s, None, 8, 4, Task::Forecast)
                .unwrap()
                .count(),
            0
        );
        assert_eq!(window_count(10, 8, 0, Task::Anomaly, 4), 1);
        assert_eq!(window_count(16, 8, 0, Task::Anomaly, 8), 2);
    }

    #[test]
    fn classes_come_from_last_step() {
        let s = ramp(1, 6);
        let labels = [0.0, 0.0, 1.0, 2.0, 1.0, 0.0];
        let classes: Vec<_> = make_windows(&s, Some(&labels), 3, 0, Task::Classify)
            .unwrap()
            .map(|w| w.target)
            .collect();
        assert_eq!(classes, [1, 2, 1, 0].map(Target::Class));
        assert!(matches!(
            make_windows(&s, None, 3, 0, Task::Classify),
            Err(DemaError::Contract(_))
        ));
        assert!(make_windows(&s, Some(&[0.5; 6]), 3, 0, Task::Classify).is_err());
    }

    #[test]
    fn mask_count_and_determinism() {
        let w = SeriesWindow::from_fn(2, 96, |i, s| 1.0 + (i + s) as f64);
        let (masked, mask) = apply_mask(&w, 0.5, 7);
        assert_eq!(mask.data().iter().filter(|&&m| m == 1.0).count(), 96);
        for (k, &m) in mask.data().iter().enumerate() {
            let expect = if m == 1.0 { 0.0 } else { w.data()[k] };
            assert_eq!(masked.data()[k], expect);
        }
        assert_eq!(apply_mask(&w, 0.5, 7), (masked, mask.clone()));
        assert_ne!(apply_mask(&w, 0.5, 8).1, mask);
        let (same, none) = apply_mask(&w, 0.0, 7);
        assert_eq!(same, w);
        assert!(none.data().iter().all(|&m| m == 0.0));
    }

    proptest! {
        #[test]
        fn mask_count_matches_floor(n in 1usize..4, t in 1usize..50, ratio in 0.0f64..1.0, seed in 0u64..1000) {
            let w = SeriesWindow::from_fn(n, t, |_, _| 1.0);
            let (_, mask) = apply_mask(&w, ratio, seed);
            let hidden = mask.data().iter().filter(|&&m| m == 1.0).count();
            prop_assert_eq!(hidden, ((ratio * (n * t) as f64) + 1e-9).floor() as usize);
        }
    }
}
