use rand::Rng;

use crate::dala::{DalaConfig, DalaOptions, MambaDala};
use crate::delay::DelayPriors;
use crate::embedding::{Layout, TokenGrid};
use crate::error::{DemaError, Result};
use crate::layers::{LayerNorm, Linear};
use crate::ssd::{MambaSsd, SsdConfig};
use crate::tensor::{ParamStore, Tape, Var};

use super::ModelConfig;

/// One dual-path layer: a temporal SSM over each variate and a delay-aware
/// attention across variates, fused and passed through a feed-forward.
#[derive(Clone, Debug)]
pub struct DuoBlock {
    pub temporal: MambaSsd,
    pub variate: MambaDala,
    pub norm_time: LayerNorm,
    pub norm_var: LayerNorm,
    pub norm_out: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub alpha: f64,
    pub beta: f64,
}

pub struct BlockOutput<'t> {
    pub x_time: TokenGrid<'t>,
    pub x_var: TokenGrid<'t>,
    /// Block representation, time-major `[N, L, D]`.
    pub z: Var<'t>,
}

impl DuoBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let ssd_cfg = SsdConfig {
            d_model: d,
            d_inner: cfg.d_inner(),
            d_state: cfg.d_state,
            conv_kernel: cfg.conv_kernel,
            chunk: cfg.chunk,
        };
        let dala_cfg = DalaConfig {
            d_model: d,
            d_inner: cfg.d_inner(),
            options: DalaOptions {
                power: cfg.kernel_power,
                rotated_denominator: cfg.rotated_denominator,
                ..DalaOptions::default()
            },
        };
        Ok(Self {
            temporal: MambaSsd::new(store, &format!("{name}.ssd"), ssd_cfg, rng)?,
            variate: MambaDala::new(store, &format!("{name}.dala"), dala_cfg, rng)?,
            norm_time: LayerNorm::new(store, &format!("{name}.norm_time"), d),
            norm_var: LayerNorm::new(store, &format!("{name}.norm_var"), d),
            norm_out: LayerNorm::new(store, &format!("{name}.norm_out"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, 4 * d, true, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), 4 * d, d, true, rng),
            alpha: cfg.alpha,
            beta: cfg.beta,
        })
    }

    /// `alpha * LN(temporal) + beta * LN(variate)`, time-major.
    pub fn fuse<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        y_time: TokenGrid<'t>,
        y_var: TokenGrid<'t>,
    ) -> Result<Var<'t>> {
        let t = self
            .norm_time
            .forward(tape, store, y_time.to_time_major()?.tokens)?
            .scale(self.alpha);
        let v = self
            .norm_var
            .forward(tape, store, y_var.to_time_major()?.tokens)?
            .scale(self.beta);
        t.add(v)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x_time: TokenGrid<'t>,
        x_var: TokenGrid<'t>,
        priors: &DelayPriors,
    ) -> Result<BlockOutput<'t>> {
        if x_time.layout != Layout::TimeMajor || x_var.layout != Layout::VariateMajor {
            return Err(DemaError::Contract(
                "block expects a time-major and a variate-major grid".into(),
            ));
        }
        if x_time.dims() != x_var.dims() {
            return Err(DemaError::Contract(format!(
                "grid sizes differ: {:?} vs {:?}",
                x_time.dims(),
                x_var.dims()
            )));
        }
        let y_time = self.temporal.forward(tape, store, x_time)?;
        let y_var = self.variate.forward(tape, store, x_var, priors)?;
        let next_time = TokenGrid::new(Layout::TimeMajor, x_time.tokens.sub(y_time.tokens)?);
        let next_var = TokenGrid::new(Layout::VariateMajor, x_var.tokens.sub(y_var.tokens)?);

        let u = self.fuse(tape, store, y_time, y_var)?;
        let hidden = self.ffn_in.forward(tape, store, u)?.gelu();
        let z = self.norm_out.forward(
            tape,
            store,
            u.add(self.ffn_out.forward(tape, store, hidden)?)?,
        )?;
        Ok(BlockOutput {
            x_time: next_time,
            x_var: next_var,
            z,
        })
    }
}
