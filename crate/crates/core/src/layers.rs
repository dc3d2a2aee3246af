//! Parameter bundles for the dense layers shared by both paths.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[d_out]));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(
            tape.param(store, self.weight),
            self.bias.map(|b| tape.param(store, b)),
        )
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.full(format!("{name}.gamma"), &[width], 1.0),
            beta: store.zeros(format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(
            Some(tape.param(store, self.gamma)),
            Some(tape.param(store, self.beta)),
            LN_EPS,
        )
    }
}
