//! Block composition, backbone, task heads and checkpoints.

mod anomaly;
mod block;
mod checkpoint;
mod config;
mod heads;

pub use anomaly::{anomaly_score, select_threshold};
pub use block::{BlockOutput, DuoBlock};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, Task};
pub use heads::Head;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::delay::{delay_matrix, DelayPriors};
use crate::embedding::{patchify, revin_normalize_masked, InstanceStats, Layout, PatchEncoder};
use crate::error::{shape_err, Result};
use crate::spectral::decompose;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::SeriesWindow;

pub struct BackboneOutput<'t> {
    /// Sum of the block outputs, time-major `[N, L, D]`.
    pub z: Var<'t>,
    /// Per-block outputs, kept only when tracing.
    pub blocks: Vec<Var<'t>>,
    pub blocks_run: usize,
    pub stats: InstanceStats,
}

/// Parameters plus the architecture they were built for.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    enc_time: PatchEncoder,
    enc_var: PatchEncoder,
    blocks: Vec<DuoBlock>,
    head: Head,
}

/// Append the mask patches after the value patches on the last axis.
fn with_mask_channel(values: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let p = values.last_dim();
    let mut data = Vec::with_capacity(2 * values.len());
    for (v, m) in values.data().chunks(p).zip(mask.data().chunks(p)) {
        data.extend_from_slice(v);
        data.extend_from_slice(m);
    }
    let mut shape = values.shape().to_vec();
    *shape.last_mut().expect("rank 3") = 2 * p;
    Tensor::new(shape, data)
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let width = if cfg.mask_channel {
            2 * cfg.patch_len
        } else {
            cfg.patch_len
        };
        let enc_time = PatchEncoder::new(&mut store, "embed_time", width, cfg.d_model, &mut rng);
        let enc_var = PatchEncoder::new(&mut store, "embed_var", width, cfg.d_model, &mut rng);
        let blocks = (0..cfg.n_blocks)
            .map(|b| DuoBlock::new(&mut store, &format!("block{b}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(&mut store, &cfg, &mut rng);
        Ok(Self {
            cfg,
            store,
            enc_time,
            enc_var,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[DuoBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    fn check_window(&self, window: &SeriesWindow) -> Result<()> {
        if window.n_vars() != self.cfg.n_vars || window.len() != self.cfg.seq_len {
            return shape_err(format!(
                "model expects {} variates x {} steps, got {} x {}",
                self.cfg.n_vars,
                self.cfg.seq_len,
                window.n_vars(),
                window.len()
            ));
        }
        Ok(())
    }

    /// Lag priors from a raw (un-normalised) window.
    pub fn priors(&self, raw: &SeriesWindow) -> Result<DelayPriors> {
        self.check_window(raw)?;
        delay_matrix(raw, self.cfg.effective_max_lag(), self.cfg.stride)
    }

    /// Normalise, split, tokenise and run every block. `missing` marks
    /// unobserved points (nonzero) that are excluded from the statistics and
    /// zeroed before embedding.
    pub fn backbone<'t>(
        &self,
        tape: &'t Tape,
        window: &SeriesWindow,
        missing: Option<&SeriesWindow>,
        priors: &DelayPriors,
        trace: bool,
    ) -> Result<BackboneOutput<'t>> {
        self.check_window(window)?;
        if let Some(m) = missing {
            if m.n_vars() != window.n_vars() || m.len() != window.len() {
                return shape_err("mask and window sizes differ");
            }
        }
        let cfg = &self.cfg;
        let (norm, stats) = revin_normalize_masked(window, missing);
        let split = decompose(&norm, cfg.theta)?;
        let mut p_time = patchify(&split.cross_time, cfg.patch_len, cfg.stride)?;
        let mut p_var = patchify(&split.cross_variate, cfg.patch_len, cfg.stride)?;
        if cfg.mask_channel {
            let zeros = SeriesWindow::zeros(window.n_vars(), window.len());
            let m = patchify(missing.unwrap_or(&zeros), cfg.patch_len, cfg.stride)?;
            p_time = with_mask_channel(&p_time, &m)?;
            p_var = with_mask_channel(&p_var, &m)?;
        }
        let mut x_time = self.enc_time.embed(tape, &self.store, p_time)?;
        let mut x_var = self
            .enc_var
            .embed(tape, &self.store, p_var)?
            .to_variate_major()?;

        let priors = if cfg.cross_variate {
            priors.clone()
        } else {
            priors.without_cross_terms()
        };
        let mut z: Option<Var<'t>> = None;
        let mut traced = Vec::new();
        for block in &self.blocks {
            let out = block.forward(tape, &self.store, x_time, x_var, &priors)?;
            x_time = out.x_time;
            x_var = out.x_var;
            z = Some(match z {
                None => out.z,
                Some(acc) => acc.add(out.z)?,
            });
            if trace {
                traced.push(out.z);
            }
        }
        debug_assert_eq!(x_time.layout, Layout::TimeMajor);
        Ok(BackboneOutput {
            z: z.expect("at least one block"),
            blocks: traced,
            blocks_run: self.blocks.len(),
            stats,
        })
    }

    /// Head output: `[N, S]`, `[N, T]` or class probabilities `[C]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        window: &SeriesWindow,
        missing: Option<&SeriesWindow>,
        priors: &DelayPriors,
    ) -> Result<Var<'t>> {
        let bb = self.backbone(tape, window, missing, priors, false)?;
        self.head.forward(tape, &self.store, bb.z, &bb.stats)
    }

    /// Gradient-free [`Model::forward`].
    pub fn predict(
        &self,
        window: &SeriesWindow,
        missing: Option<&SeriesWindow>,
        priors: &DelayPriors,
    ) -> Result<Tensor> {
        let tape = Tape::inference();
        let y = self.forward(&tape, window, missing, priors)?;
        Ok((*y.value()).clone())
    }
}
