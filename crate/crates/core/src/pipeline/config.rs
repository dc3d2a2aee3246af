use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, DemaError, Result};
use crate::model::{ModelConfig, Task};

/// Every option accepted in a run config file, as `key = value` lines.
/// Blank lines and lines starting with `#` are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seq_len: usize,
    pub horizon: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Header of the optional label column.
    pub label_column: String,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Cap on windows drawn per epoch; 0 uses all of them.
    pub max_train_windows: usize,
    /// Cap on windows scored per evaluation split; 0 uses all of them.
    pub max_eval_windows: usize,
    pub mask_ratio: f64,
    pub anomaly_ratio: f64,
    pub point_adjust: bool,
    /// Estimate lag priors once on the training split instead of per window.
    pub global_priors: bool,

    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    /// `None` falls back to the task default.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub theta: f64,
    pub d_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub chunk: usize,
    pub kernel_power: f64,
    pub rotated_denominator: bool,
    pub cross_variate: bool,
    pub max_lag: usize,
    pub head_hidden: usize,
    pub mask_channel: bool,
    pub num_classes: usize,

    pub bench_lengths: Vec<usize>,
    pub bench_vars: usize,
    pub bench_d_model: usize,
    pub bench_blocks: usize,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(Task::Forecast, 1, 96);
        Self {
            task: Task::Forecast,
            seq_len: 96,
            horizon: 96,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            label_column: "label".into(),
            lr: 1e-3,
            batch_size: 32,
            epochs: 50,
            seed: 2024,
            max_train_windows: 0,
            max_eval_windows: 0,
            mask_ratio: 0.25,
            anomaly_ratio: 0.01,
            point_adjust: false,
            global_priors: false,
            patch_len: m.patch_len,
            stride: m.stride,
            d_model: m.d_model,
            n_blocks: m.n_blocks,
            alpha: None,
            beta: None,
            theta: m.theta,
            d_state: m.d_state,
            expand: m.expand,
            conv_kernel: m.conv_kernel,
            chunk: m.chunk,
            kernel_power: m.kernel_power,
            rotated_denominator: m.rotated_denominator,
            cross_variate: m.cross_variate,
            max_lag: m.max_lag,
            head_hidden: m.head_hidden,
            mask_channel: m.mask_channel,
            num_classes: m.num_classes,
            bench_lengths: vec![384, 768, 1536, 3072],
            bench_vars: 7,
            bench_d_model: 256,
            bench_blocks: 2,
            bench_reps: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DemaError::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => config_err(format!("`{key}` expects a boolean, got `{value}`")),
    }
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    if value.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Parse the text format. Unknown and repeated keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return config_err(format!("line {}: expected `key = value`", no + 1));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return config_err(format!("line {}: `{key}` given twice", no + 1));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                DemaError::Config(msg) => DemaError::Config(format!("line {}: {msg}", no + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assign one option from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => self.task = v.parse()?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "train_ratio" => self.train_ratio = parse(key, v)?,
            "val_ratio" => self.val_ratio = parse(key, v)?,
            "test_ratio" => self.test_ratio = parse(key, v)?,
            "label_column" => self.label_column = v.to_string(),
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "max_train_windows" => self.max_train_windows = parse(key, v)?,
            "max_eval_windows" => self.max_eval_windows = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "anomaly_ratio" => self.anomaly_ratio = parse(key, v)?,
            "point_adjust" => self.point_adjust = parse_bool(key, v)?,
            "global_priors" => self.global_priors = parse_bool(key, v)?,
            "patch_len" => self.patch_len = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_blocks" => self.n_blocks = parse(key, v)?,
            "alpha" => self.alpha = parse_opt_f64(key, v)?,
            "beta" => self.beta = parse_opt_f64(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "d_state" => self.d_state = parse(key, v)?,
            "expand" => self.expand = parse(key, v)?,
            "conv_kernel" => self.conv_kernel = parse(key, v)?,
            "chunk" => self.chunk = parse(key, v)?,
            "kernel_power" => self.kernel_power = parse(key, v)?,
            "rotated_denominator" => self.rotated_denominator = parse_bool(key, v)?,
            "cross_variate" => self.cross_variate = parse_bool(key, v)?,
            "max_lag" => self.max_lag = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse(key, v)?,
            "mask_channel" => self.mask_channel = parse_bool(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "bench_lengths" => {
                self.bench_lengths = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "bench_vars" => self.bench_vars = parse(key, v)?,
            "bench_d_model" => self.bench_d_model = parse(key, v)?,
            "bench_blocks" => self.bench_blocks = parse(key, v)?,
            "bench_reps" => self.bench_reps = parse(key, v)?,
            other => return config_err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || self.train_ratio == 0.0 {
            return config_err("split ratios must lie in [0, 1] with a nonzero train share");
        }
        if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return config_err("split ratios must sum to 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return config_err("lr must be finite and non-negative");
        }
        for (name, v) in [
            ("seq_len", self.seq_len),
            ("horizon", self.horizon),
            ("batch_size", self.batch_size),
            ("bench_vars", self.bench_vars),
            ("bench_d_model", self.bench_d_model),
            ("bench_blocks", self.bench_blocks),
            ("bench_reps", self.bench_reps),
        ] {
            if v == 0 {
                return config_err(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return config_err("mask_ratio must lie in [0, 1)");
        }
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio < 1.0) {
            return config_err("anomaly_ratio must lie in (0, 1)");
        }
        if self.bench_lengths.is_empty() || self.bench_lengths.windows(2).any(|w| w[0] >= w[1]) {
            return config_err("bench_lengths must be non-empty and strictly ascending");
        }
        self.model_config(1)?;
        Ok(())
    }

    /// Architecture for a dataset with `n_vars` variates.
    pub fn model_config(&self, n_vars: usize) -> Result<ModelConfig> {
        let (alpha, beta) = self.task.default_fusion();
        let cfg = ModelConfig {
            horizon: self.horizon,
            num_classes: self.num_classes,
            patch_len: self.patch_len,
            stride: self.stride,
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            alpha: self.alpha.unwrap_or(alpha),
            beta: self.beta.unwrap_or(beta),
            theta: self.theta,
            d_state: self.d_state,
            expand: self.expand,
            conv_kernel: self.conv_kernel,
            chunk: self.chunk,
            kernel_power: self.kernel_power,
            rotated_denominator: self.rotated_denominator,
            cross_variate: self.cross_variate,
            max_lag: self.max_lag,
            head_hidden: self.head_hidden,
            mask_channel: self.mask_channel,
            ..ModelConfig::new(self.task, n_vars, self.seq_len)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Text form that [`RunConfig::parse_str`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let lengths: Vec<String> = self.bench_lengths.iter().map(usize::to_string).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("task", self.task.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("horizon", self.horizon.to_string()),
            ("train_ratio", self.train_ratio.to_string()),
            ("val_ratio", self.val_ratio.to_string()),
            ("test_ratio", self.test_ratio.to_string()),
            ("label_column", self.label_column.clone()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("max_train_windows", self.max_train_windows.to_string()),
            ("max_eval_windows", self.max_eval_windows.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("anomaly_ratio", self.anomaly_ratio.to_string()),
            ("point_adjust", self.point_adjust.to_string()),
            ("global_priors", self.global_priors.to_string()),
            ("patch_len", self.patch_len.to_string()),
            ("stride", self.stride.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("alpha", opt(self.alpha)),
            ("beta", opt(self.beta)),
            ("theta", self.theta.to_string()),
            ("d_state", self.d_state.to_string()),
            ("expand", self.expand.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("chunk", self.chunk.to_string()),
            ("kernel_power", self.kernel_power.to_string()),
            ("rotated_denominator", self.rotated_denominator.to_string()),
            ("cross_variate", self.cross_variate.to_string()),
            ("max_lag", self.max_lag.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("mask_channel", self.mask_channel.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("bench_lengths", lengths.join(",")),
            ("bench_vars", self.bench_vars.to_string()),
            ("bench_d_model", self.bench_d_model.to_string()),
            ("bench_blocks", self.bench_blocks.to_string()),
            ("bench_reps", self.bench_reps.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
