use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::data::{Dataset, Split};
use super::windows::{apply_mask, make_windows, Target};
use crate::delay::{delay_matrix, DelayPriors};
use crate::error::{DemaError, Result};
use crate::model::{save_checkpoint, Model, ModelConfig, Task};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::SeriesWindow;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads` follows the store's parameter order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.get_mut(id).data_mut();
            for (j, &g) in grads[k].data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A window ready for the model: input, hidden-point mask, target, and
/// which target entries the loss reads.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub start: usize,
    pub input: SeriesWindow,
    pub missing: Option<SeriesWindow>,
    pub target: Tensor,
    pub loss_mask: Option<Tensor>,
    pub priors: DelayPriors,
}

fn series_tensor(w: &SeriesWindow) -> Tensor {
    Tensor::new(vec![w.n_vars(), w.len()], w.data().to_vec()).expect("window shape")
}

/// Lag priors shared by all windows, or `None` to estimate them per window.
pub fn shared_priors(
    cfg: &RunConfig,
    mcfg: &ModelConfig,
    data: &Dataset,
) -> Result<Option<DelayPriors>> {
    if !cfg.global_priors {
        return Ok(None);
    }
    let (train, _, _) = data.segment(Split::Train, 0)?;
    delay_matrix(&train, mcfg.effective_max_lag(), mcfg.stride).map(Some)
}

/// Seed for the imputation mask of window `index` in `split`.
fn mask_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (tag << 56) ^ index as u64
}

/// Evenly spaced subset of `0..count` of at most `cap` items (0 = all).
pub fn spread(count: usize, cap: usize) -> Vec<usize> {
    if cap == 0 || cap >= count {
        (0..count).collect()
    } else {
        (0..cap).map(|k| k * count / cap).collect()
    }
}

/// Windows of one split with history prepended so that every step of the
/// split can be a target. Training windows stay inside the train split.
pub fn prepare_split(
    cfg: &RunConfig,
    model: &Model,
    data: &Dataset,
    split: Split,
    shared: Option<&DelayPriors>,
    cap: usize,
) -> Result<Vec<Prepared>> {
    let mcfg = model.config();
    let context = if split == Split::Train {
        0
    } else {
        mcfg.seq_len
    };
    let (series, labels, offset) = data.segment(split, context)?;
    let windows = make_windows(
        &series,
        labels.as_deref(),
        mcfg.seq_len,
        mcfg.horizon,
        mcfg.task,
    )?;
    spread(windows.len(), cap)
        .into_iter()
        .map(|i| {
            let s = windows.get(i).expect("index in range");
            prepare(
                model,
                cfg,
                split,
                i,
                offset + s.start,
                s.input,
                s.target,
                shared,
            )
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn prepare(
    model: &Model,
    cfg: &RunConfig,
    split: Split,
    index: usize,
    start: usize,
    clean: SeriesWindow,
    target: Target,
    shared: Option<&DelayPriors>,
) -> Result<Prepared> {
    let mcfg = model.config();
    let (input, missing) = if mcfg.task == Task::Impute {
        let (masked, mask) = apply_mask(&clean, cfg.mask_ratio, mask_seed(cfg.seed, split, index));
        (masked, Some(mask))
    } else {
        (clean, None)
    };
    let (target, loss_mask) = match target {
        Target::Series(y) => (series_tensor(&y), missing.as_ref().map(series_tensor)),
        Target::Class(c) => {
            if c >= mcfg.num_classes {
                return Err(DemaError::Contract(format!(
                    "class {c} with only {} classes",
                    mcfg.num_classes
                )));
            }
            (
                Tensor::from_fn(&[mcfg.num_classes], |k| if k == c { 1.0 } else { 0.0 }),
                None,
            )
        }
    };
    let priors = match shared {
        Some(p) => p.clone(),
        None => model.priors(&input)?,
    };
    Ok(Prepared {
        start,
        input,
        missing,
        target,
        loss_mask,
        priors,
    })
}

/// Task loss of one window, with parameter gradients when `grads` is set.
pub fn sample_loss(model: &Model, s: &Prepared, grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let tape = if grads {
        Tape::new()
    } else {
        Tape::inference()
    };
    let y = model.forward(&tape, &s.input, s.missing.as_ref(), &s.priors)?;
    let loss = y.mse(&s.target, s.loss_mask.as_ref())?;
    let value = loss.value().data()[0];
    if !grads {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(loss)?;
    let store = model.store();
    Ok((value, store.ids().map(|id| g.param(store, id)).collect()))
}

/// Mean task loss over prepared windows; NaN when there are none.
pub fn mean_loss(model: &Model, samples: &[Prepared]) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|s| sample_loss(model, s, false).map(|r| r.0))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters with the lowest validation loss.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Fit a fresh model. When `checkpoint` is set, it always holds the best
/// model so far, so a diverged run leaves the last good state on disk.
pub fn train(cfg: &RunConfig, data: &Dataset, checkpoint: Option<&Path>) -> Result<TrainReport> {
    let mcfg = cfg.model_config(data.n_vars())?;
    let model = Model::new(mcfg.clone(), cfg.seed)?;
    train_model(cfg, data, model, checkpoint)
}

/// Continue training `model` on `data`.
pub fn train_model(
    cfg: &RunConfig,
    data: &Dataset,
    mut model: Model,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    let shared = shared_priors(cfg, model.config(), data)?;
    let train_set = prepare_split(cfg, &model, data, Split::Train, shared.as_ref(), 0)?;
    if train_set.is_empty() {
        return Err(DemaError::Config(format!(
            "training split of {} steps has no complete window",
            data.bounds(Split::Train).len()
        )));
    }
    let val_set = prepare_split(
        cfg,
        &model,
        data,
        Split::Val,
        shared.as_ref(),
        cfg.max_eval_windows,
    )?;
    if val_set.is_empty() {
        log::warn!("validation split has no windows; selecting on training loss");
    }

    let mut adam = Adam::new(model.store(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut best = (model.clone(), 0, f64::INFINITY);
    if let Some(path) = checkpoint {
        save_checkpoint(&model, path)?;
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let take = if cfg.max_train_windows == 0 {
            order.len()
        } else {
            cfg.max_train_windows.min(order.len())
        };
        let mut total = 0.0;
        for batch in order[..take].chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| sample_loss(&model, &train_set[i], true))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    DemaError::Numeric(msg) => DemaError::Diverged { epoch, msg },
                    other => other,
                })?;
            let mut sum: Option<Vec<Tensor>> = None;
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(DemaError::Diverged {
                        epoch,
                        msg: format!("loss is {loss}"),
                    });
                }
                total += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&grads)
                        .for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(DemaError::Diverged {
                    epoch,
                    msg: "non-finite gradient".into(),
                });
            }
            adam.step(model.store_mut(), &grads);
        }
        let train_loss = total / take as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mean_loss(&model, &val_set)?
        };
        if !val_loss.is_finite() {
            return Err(DemaError::Diverged {
                epoch,
                msg: format!("validation loss is {val_loss}"),
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if val_loss < best.2 {
            best = (model.clone(), epoch, val_loss);
            if let Some(path) = checkpoint {
                save_checkpoint(&model, path)?;
            }
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok(TrainReport {
        model: best.0,
        best_epoch: best.1,
        log,
    })
}
