//! TOML run configuration. Unknown keys anywhere are rejected.
//!
//! ```toml
//! [model]
//! depth = 2
//! dim = 128
//! heads = 4
//! mlp_ratio = 4.0
//! embed_norm = false
//! linear_mode = { variant = "SwitchBack", format = "int8" }
//! layer_scale = { enabled = true, init = 0.0 }
//!
//! [train]
//! task = "synthetic_classify"
//! iterations = 2000
//! warmup_iterations = 200
//! batch_size = 32
//! seed = 0
//! loss_scale = 65536.0
//! trace_path = "trace.jsonl"
//!
//! [train.optimizer]
//! lr = 2e-3
//! beta2 = 0.99
//! weight_decay = 0.1
//! clipping = "update_clip"
//!
//! [train.data]
//! tokens = 8
//! input_dim = 16
//! ```

use std::path::{Path, PathBuf};

use lowbit_core::fp8::Fp8Format;
use lowbit_core::linear::{LinearFormat, LinearMode, Variant};
use lowbit_core::optim::{Beta2, Clipping, LrSchedule, OptimizerHyperparams};
use serde::{Deserialize, Serialize};

use crate::error::{TrainerError, TrainerResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub layer_scale: LayerScaleConfig,
    #[serde(default)]
    pub linear_mode: LinearModeConfig,
    #[serde(default)]
    pub embed_norm: bool,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerScaleConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub init: f32,
}

impl Default for LayerScaleConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            init: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatName {
    Int8,
    Fp8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModeConfig {
    pub variant: Variant,
    #[serde(default = "default_format")]
    pub format: FormatName,
    /// fp8 format for inputs and weights (`e4m3` or `e5m2`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp8_forward: Option<String>,
    /// fp8 format for output gradients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp8_gradient: Option<String>,
}

fn default_format() -> FormatName {
    FormatName::Int8
}

impl Default for LinearModeConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Standard,
            format: FormatName::Int8,
            fp8_forward: None,
            fp8_gradient: None,
        }
    }
}

impl LinearModeConfig {
    pub fn new(variant: Variant, format: FormatName) -> Self {
        Self {
            variant,
            format,
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> TrainerResult<LinearMode> {
        let parse = |s: &Option<String>, default: Fp8Format| -> TrainerResult<Fp8Format> {
            match s {
                None => Ok(default),
                Some(s) => s.parse().map_err(|e| TrainerError::Config(format!("linear_mode: {e}"))),
            }
        };
        let format = match self.format {
            FormatName::Int8 => {
                if self.fp8_forward.is_some() || self.fp8_gradient.is_some() {
                    return Err(TrainerError::Config("fp8_forward/fp8_gradient require format = \"fp8\"".into()));
                }
                LinearFormat::Int8
            }
            FormatName::Fp8 => LinearFormat::Fp8 {
                forward: parse(&self.fp8_forward, Fp8Format::E4M3)?,
                gradient: parse(&self.fp8_gradient, Fp8Format::E5M2)?,
            },
        };
        Ok(LinearMode {
            variant: self.variant,
            format,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SyntheticClassify,
    SyntheticRegress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub iterations: u64,
    pub warmup_iterations: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClippingName {
    None,
    UpdateClip,
    GradClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Peak learning rate reached at the end of warmup.
    pub lr: f64,
    pub final_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// When set, β₂ follows `1 − t^(−λ)` and `beta2` is ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2_warmup: Option<f64>,
    pub eps: f64,
    pub weight_decay: f64,
    pub clipping: ClippingName,
    pub max_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            final_lr: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            beta2_warmup: None,
            eps: 1e-6,
            weight_decay: 0.0,
            clipping: ClippingName::UpdateClip,
            max_norm: 1.0,
        }
    }
}

/// Shape of the synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tokens: usize,
    pub input_dim: usize,
    /// Classes for `synthetic_classify`.
    pub classes: usize,
    /// Standard deviation of the class centers.
    pub center_scale: f64,
    /// Per-token noise standard deviation.
    pub noise: f64,
    /// Output width for `synthetic_regress`.
    pub outputs: usize,
    pub teacher_hidden: usize,
    /// Multiplier on the teacher weights; 0 gives all-zero targets.
    pub teacher_scale: f64,
    /// Inputs are multiplied by `starve_scale` for the first `starve_iterations`
    /// iterations, which starves the embedding of gradient.
    pub starve_iterations: u64,
    pub starve_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            input_dim: 16,
            classes: 8,
            center_scale: 1.0,
            noise: 1.0,
            outputs: 4,
            teacher_hidden: 32,
            teacher_scale: 1.0,
            starve_iterations: 0,
            starve_scale: 1e-3,
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> TrainerResult<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| TrainerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. A relative `trace_path` is resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> TrainerResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainerError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(trace) = &cfg.train.trace_path {
            if trace.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                cfg.train.trace_path = Some(base.join(trace));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> TrainerResult<()> {
        let m = &self.model;
        let t = &self.train;
        let d = &t.data;
        let bad = |msg: String| Err(TrainerError::Config(msg));
        if m.depth == 0 || m.dim == 0 || m.heads == 0 {
            return bad("depth, dim and heads must be positive".into());
        }
        if !m.dim.is_multiple_of(m.heads) {
            return bad(format!("dim {} is not divisible by heads {}", m.dim, m.heads));
        }
        if m.mlp_ratio.is_nan() || m.mlp_ratio <= 0.0 || self.hidden_width() == 0 {
            return bad(format!("mlp_ratio {} gives an empty hidden layer", m.mlp_ratio));
        }
        if !m.layer_scale.init.is_finite() {
            return bad("layer_scale.init must be finite".into());
        }
        m.linear_mode.resolve()?;
        if t.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if t.warmup_iterations >= t.iterations {
            return bad(format!(
                "warmup_iterations ({}) must be less than iterations ({})",
                t.warmup_iterations, t.iterations
            ));
        }
        if t.batch_size == 0 || d.tokens == 0 || d.input_dim == 0 {
            return bad("batch_size, data.tokens and data.input_dim must be positive".into());
        }
        match t.task {
            TaskKind::SyntheticClassify if d.classes < 2 => return bad("data.classes must be at least 2".into()),
            TaskKind::SyntheticRegress if d.outputs == 0 || d.teacher_hidden == 0 => {
                return bad("data.outputs and data.teacher_hidden must be positive".into())
            }
            _ => {}
        }
        for (name, v) in [
            ("data.center_scale", d.center_scale),
            ("data.noise", d.noise),
            ("data.teacher_scale", d.teacher_scale),
            ("data.starve_scale", d.starve_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if let Some(s) = t.loss_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("loss_scale must be positive and finite, got {s}"));
            }
        }
        self.hyperparams()
            .validate()
            .map_err(|e| TrainerError::Config(format!("optimizer: {e}")))?;
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        (self.model.mlp_ratio * self.model.dim as f64).round() as usize
    }

    pub fn output_width(&self) -> usize {
        match self.train.task {
            TaskKind::SyntheticClassify => self.train.data.classes,
            TaskKind::SyntheticRegress => self.train.data.outputs,
        }
    }

    pub fn hyperparams(&self) -> OptimizerHyperparams {
        let o = &self.train.optimizer;
        OptimizerHyperparams {
            lr: LrSchedule::WarmupCosine {
                peak: o.lr,
                warmup: self.train.warmup_iterations,
                total: self.train.iterations,
                final_lr: o.final_lr,
            },
            beta1: o.beta1,
            beta2: match o.beta2_warmup {
                Some(lambda) => Beta2::Warmup { lambda },
                None => Beta2::Constant(o.beta2),
            },
            eps: o.eps,
            weight_decay: o.weight_decay,
            clipping: match o.clipping {
                ClippingName::None => Clipping::None,
                ClippingName::UpdateClip => Clipping::UpdateClip,
                ClippingName::GradClip => Clipping::GradClip { max_norm: o.max_norm },
            },
        }
    }
}
