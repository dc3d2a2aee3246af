use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::delay::default_max_lag;
use crate::embedding::patch_count;
use crate::error::{config_err, DemaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Forecast,
    Impute,
    Anomaly,
    Classify,
}

impl Task {
    /// Default `(alpha, beta)` fusion weights.
    pub fn default_fusion(self) -> (f64, f64) {
        match self {
            Task::Forecast | Task::Classify => (0.6, 0.4),
            Task::Impute | Task::Anomaly => (0.2, 0.8),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Forecast => "forecast",
            Task::Impute => "impute",
            Task::Anomaly => "anomaly",
            Task::Classify => "classify",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = DemaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forecast" => Ok(Task::Forecast),
            "impute" => Ok(Task::Impute),
            "anomaly" => Ok(Task::Anomaly),
            "classify" => Ok(Task::Classify),
            other => config_err(format!("unknown task `{other}`")),
        }
    }
}

/// Architecture hyperparameters. Stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub n_vars: usize,
    pub seq_len: usize,
    /// Forecast horizon; ignored by other tasks.
    pub horizon: usize,
    /// Number of classes; classification only.
    pub num_classes: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub d_state: usize,
    /// Inner width of both paths as a multiple of `d_model`.
    pub expand: usize,
    pub conv_kernel: usize,
    pub chunk: usize,
    pub kernel_power: f64,
    pub rotated_denominator: bool,
    /// When false, off-diagonal pair strengths are zeroed.
    pub cross_variate: bool,
    /// Largest lag searched for priors; 0 picks a quarter of `seq_len`.
    pub max_lag: usize,
    /// Hidden width of the task head; 0 means a single linear layer.
    pub head_hidden: usize,
    /// Feed the missing-value mask to the encoders next to the values.
    pub mask_channel: bool,
}

impl ModelConfig {
    pub fn new(task: Task, n_vars: usize, seq_len: usize) -> Self {
        let (alpha, beta) = task.default_fusion();
        Self {
            task,
            n_vars,
            seq_len,
            horizon: 96,
            num_classes: 2,
            patch_len: 8,
            stride: 8,
            d_model: 64,
            n_blocks: 2,
            alpha,
            beta,
            theta: crate::spectral::DEFAULT_THETA,
            d_state: 16,
            expand: 2,
            conv_kernel: 4,
            chunk: 16,
            kernel_power: crate::dala::DEFAULT_POWER,
            rotated_denominator: false,
            cross_variate: true,
            max_lag: 0,
            head_hidden: 0,
            mask_channel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_vars", self.n_vars),
            ("seq_len", self.seq_len),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("conv_kernel", self.conv_kernel),
            ("chunk", self.chunk),
        ];
        for (name, v) in positive {
            if v == 0 {
                return config_err(format!("{name} must be positive"));
            }
        }
        if self.seq_len < 4 {
            return config_err("seq_len must be at least 4");
        }
        patch_count(self.seq_len, self.patch_len, self.stride)?;
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return config_err(format!(
                "alpha and beta must lie in [0, 1], got {} and {}",
                self.alpha, self.beta
            ));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return config_err(format!("theta must lie in (0, 1], got {}", self.theta));
        }
        if self.kernel_power < 1.0 {
            return config_err("kernel_power must be at least 1");
        }
        if !(self.expand * self.d_model).is_multiple_of(2) {
            return config_err("expand * d_model must be even for rotary embeddings");
        }
        if self.max_lag >= self.seq_len {
            return config_err(format!(
                "max_lag {} must be below seq_len {}",
                self.max_lag, self.seq_len
            ));
        }
        match self.task {
            Task::Forecast if self.horizon == 0 => config_err("horizon must be positive"),
            Task::Classify if self.num_classes < 2 => {
                config_err("classification needs at least 2 classes")
            }
            _ => Ok(()),
        }
    }

    pub fn n_tokens(&self) -> usize {
        patch_count(self.seq_len, self.patch_len, self.stride).unwrap_or(0)
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn effective_max_lag(&self) -> usize {
        if self.max_lag == 0 {
            default_max_lag(self.seq_len)
        } else {
            self.max_lag
        }
    }

    /// Width of the head output per variate (or class count).
    pub fn output_len(&self) -> usize {
        match self.task {
            Task::Forecast => self.horizon,
            Task::Impute | Task::Anomaly => self.seq_len,
            Task::Classify => self.num_classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for task in [Task::Forecast, Task::Impute, Task::Anomaly, Task::Classify] {
            ModelConfig::new(task, 3, 96).validate().unwrap();
            assert_eq!(task.as_str().parse::<Task>().unwrap(), task);
        }
        assert_eq!(ModelConfig::new(Task::Impute, 1, 96).alpha, 0.2);
        assert_eq!(ModelConfig::new(Task::Forecast, 1, 96).n_tokens(), 12);
    }

    #[test]
    fn rejects_bad_values() {
        let base = ModelConfig::new(Task::Classify, 2, 32);
        type Edit = Box<dyn Fn(&mut ModelConfig)>;
        let cases: Vec<Edit> = vec![
            Box::new(|c| c.num_classes = 1),
            Box::new(|c| c.alpha = 1.5),
            Box::new(|c| c.beta = -0.1),
            Box::new(|c| c.n_blocks = 0),
            Box::new(|c| c.patch_len = 40),
            Box::new(|c| c.theta = 0.0),
            Box::new(|c| c.max_lag = 32),
        ];
        for f in cases {
            let mut c = base.clone();
            f(&mut c);
            assert!(matches!(c.validate(), Err(DemaError::Config(_))));
        }
        assert!("regress".parse::<Task>().is_err());
    }
}
