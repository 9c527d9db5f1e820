//! Model, training and run configuration.
//!
//! A run is described by one TOML document with `[model]` and `[train]`
//! tables. Command-line flags override individual fields, and the effective
//! document is echoed into every output directory.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

/// Maximum number of coarse refinement steps (one per ABF level).
pub const MAX_REFINEMENT_STEPS: usize = 6;

/// Components that can be removed for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Coarse refinement supervision.
    CR,
    /// Channel-wise attention.
    CA,
    /// Spatial attention.
    SA,
    /// Atrous spatial pyramid pooling (replaced by one 3x3 conv).
    ASPP,
    /// Fine-grained refinement branch; the topmost coarse map becomes the output.
    FR,
    /// Feature aggregation blocks in the fine branch.
    FA,
    /// Skip connections in the fine-branch decoder.
    SC,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::CR,
        Ablation::CA,
        Ablation::SA,
        Ablation::ASPP,
        Ablation::FR,
        Ablation::FA,
        Ablation::SC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::CR => "CR",
            Ablation::CA => "CA",
            Ablation::SA => "SA",
            Ablation::ASPP => "ASPP",
            Ablation::FR => "FR",
            Ablation::FA => "FA",
            Ablation::SC => "SC",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == upper)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown ablation flag {s:?}; expected one of CR, CA, SA, ASPP, FR, FA, SC"
                ))
            })
    }
}

/// How the spatial-attention map is pooled from the attended feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialPooling {
    /// Mean over planes, giving one spatial map that gates every plane.
    #[default]
    ChannelMean,
    /// Global average pooling over space, giving a per-plane gate.
    GlobalAverage,
}

/// Weight on the coarse-supervision sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant { value: f64 },
    /// `initial * rate^epoch`.
    Exponential { initial: f64, rate: f64 },
}

impl LambdaSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant { value } => value,
            LambdaSchedule::Exponential { initial, rate } => initial * rate.powi(epoch as i32),
        }
    }
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Constant { value: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of coarse refinement steps, counted from the top level down.
    pub k: usize,
    pub lambda: LambdaSchedule,
    pub aspp_rates: Vec<usize>,
    pub fa_rates: [usize; 2],
    /// Base plane count of the fine branch before width scaling.
    pub fine_channels: usize,
    pub spatial_pooling: SpatialPooling,
    pub ablations: BTreeSet<Ablation>,
    /// `(height, width)` of network inputs.
    pub input_size: [usize; 2],
    pub seed: u64,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: MAX_REFINEMENT_STEPS,
            lambda: LambdaSchedule::default(),
            aspp_rates: vec![1, 6, 12, 18],
            fa_rates: [3, 5],
            fine_channels: 64,
            spatial_pooling: SpatialPooling::default(),
            ablations: BTreeSet::new(),
            input_size: [224, 224],
            seed: 0,
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn width_scale(&self) -> f64 {
        self.backbone.width_scale
    }

    pub fn with_width_scale(mut self, scale: f64) -> Self {
        self.backbone.width_scale = scale;
        self
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.ablations.insert(a);
        self
    }

    pub fn scaled_fine_channels(&self) -> usize {
        crate::backbone::scale_channels(self.fine_channels, self.backbone.width_scale)
    }

    /// Working resolution of the fine branch: a quarter of the input.
    pub fn fine_work_size(&self) -> [usize; 2] {
        [
            self.input_size[0].div_ceil(4),
            self.input_size[1].div_ceil(4),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_REFINEMENT_STEPS).contains(&self.k) {
            return Err(Error::InvalidConfig(format!(
                "k must be in 1..={MAX_REFINEMENT_STEPS}, got {}",
                self.k
            )));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::InvalidConfig(
                "aspp_rates must be a nonempty list of positive rates".into(),
            ));
        }
        if self.fa_rates.contains(&0) {
            return Err(Error::InvalidConfig("fa_rates must be positive".into()));
        }
        if self.fine_channels == 0 {
            return Err(Error::InvalidConfig("fine_channels must be positive".into()));
        }
        for side in self.input_size {
            if side < 64 || side % 32 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "input sides must be multiples of 32 and at least 64, got {:?}",
                    self.input_size
                )));
            }
        }
        if self.has(Ablation::CR) && self.has(Ablation::FR) {
            return Err(Error::InvalidConfig(
                "removing both CR and FR leaves no supervised output".into(),
            ));
        }
        match self.lambda {
            LambdaSchedule::Constant { value } if !(value.is_finite() && value >= 0.0) => {
                return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {value}")));
            }
            LambdaSchedule::Exponential { initial, rate }
                if !(initial.is_finite() && initial >= 0.0 && rate.is_finite() && rate >= 0.0) =>
            {
                return Err(Error::InvalidConfig("lambda schedule must be nonnegative".into()));
            }
            _ => {}
        }
        self.backbone.validate()
    }

    /// Field-level differences against `other`, one `field: ours -> theirs` line each.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let ours = serde_json::to_value(self).expect("config serializes");
        let theirs = serde_json::to_value(other).expect("config serializes");
        let mut out = Vec::new();
        diff_values("", &ours, &theirs, &mut out);
        out
    }
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
            for key in keys {
                let sub = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                let null = Value::Null;
                diff_values(&sub, ma.get(key).unwrap_or(&null), mb.get(key).unwrap_or(&null), out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `lr_step_epochs`.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Save a checkpoint every this many epochs (the final epoch is always saved).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay: 0.1,
            lr_step_epochs: 60,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 300,
            batch_size: 8,
            checkpoint_every: 10,
            max_steps: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_step_epochs == 0 {
            return self.lr;
        }
        self.lr * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// The whole on-disk run document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml()?.as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        path.with_file_name(name)
    };
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
