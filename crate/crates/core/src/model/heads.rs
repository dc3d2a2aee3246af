use rand::Rng;

use crate::embedding::InstanceStats;
use crate::error::{shape_err, Result};
use crate::layers::Linear;
use crate::tensor::{ParamStore, Tape, Var};

use super::{ModelConfig, Task};

/// Task head: a linear map, or a one-hidden-layer MLP with GELU.
#[derive(Clone, Debug)]
pub struct Head {
    pub task: Task,
    pub layers: Vec<Linear>,
}

impl Head {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d_in = match cfg.task {
            Task::Classify => cfg.d_model,
            _ => cfg.n_tokens() * cfg.d_model,
        };
        let d_out = cfg.output_len();
        let layers = if cfg.head_hidden == 0 {
            vec![Linear::new(store, "head.0", d_in, d_out, true, rng)]
        } else {
            vec![
                Linear::new(store, "head.0", d_in, cfg.head_hidden, true, rng),
                Linear::new(store, "head.1", cfg.head_hidden, d_out, true, rng),
            ]
        };
        Self {
            task: cfg.task,
            layers,
        }
    }

    fn mlp<'t>(&self, tape: &'t Tape, store: &ParamStore, mut x: Var<'t>) -> Result<Var<'t>> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.gelu();
            }
            x = layer.forward(tape, store, x)?;
        }
        Ok(x)
    }

    /// `z: [N, L, D]` to `[N, S]` (forecast) or `[N, T]` (impute, anomaly),
    /// de-normalised with `stats`; or to class probabilities `[C]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        z: Var<'t>,
        stats: &InstanceStats,
    ) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 3 {
            return shape_err(format!("head expects [N, L, D], got {shape:?}"));
        }
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        match self.task {
            Task::Classify => {
                let pooled = z.reshape(&[n * l, d])?.mean_rows()?.reshape(&[1, d])?;
                let logits = self.mlp(tape, store, pooled)?;
                let c = logits.shape()[1];
                logits.softmax().reshape(&[c])
            }
            _ => {
                let y = self.mlp(tape, store, z.reshape(&[n, l * d])?)?;
                y.row_affine(&stats.std, &stats.mean)
            }
        }
    }
}
