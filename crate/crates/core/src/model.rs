//! The full network: two-stream backbone, coarse ABF chain and fine branch.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::abf::{CoarseBranch, CoarseOutputs};
use crate::backbone::{load_pretrained, Backbone, FeaturePyramid};
use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::fine::{FineBranch, FineFeatures};
use crate::nn::ParamStore;

/// Coarse maps `S_i^c` (top level first) and the fine map `S^f`, all at
/// input resolution with values in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct SaliencyPrediction {
    pub coarse_levels: Vec<usize>,
    pub coarse: Vec<Tensor>,
    pub fine: Option<Tensor>,
}

impl SaliencyPrediction {
    /// `S^f`, or `S_6^c` when the fine branch is ablated.
    pub fn final_map(&self) -> &Tensor {
        match &self.fine {
            Some(f) => f,
            None => &self.coarse[0],
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub rgb: FeaturePyramid,
    pub depth: FeaturePyramid,
    pub coarse: CoarseOutputs,
    pub fine: Option<FineFeatures>,
}

impl ForwardTrace {
    pub fn prediction(&self) -> SaliencyPrediction {
        SaliencyPrediction {
            coarse_levels: if self.coarse.saliency.is_empty() {
                Vec::new()
            } else {
                self.coarse.levels.clone()
            },
            coarse: self.coarse.saliency.clone(),
            fine: self.fine.as_ref().map(|f| f.saliency.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Msirn {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    coarse: CoarseBranch,
    fine: Option<FineBranch>,
}

impl Msirn {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, Device::Cpu);
        let backbone = Backbone::new(&mut store, &config.backbone, config.input_size)?;
        let channels = backbone.channels().to_vec();
        let coarse = CoarseBranch::new(&mut store, &config, &channels)?;
        let fine = if config.has(Ablation::FR) {
            None
        } else {
            Some(FineBranch::new(
                &mut store,
                &config,
                coarse.top_channels(),
                config.fine_work_size(),
            )?)
        };
        if let Some(path) = &config.backbone.pretrained {
            load_pretrained(&store, path)?;
        }
        Ok(Msirn {
            config,
            store,
            backbone,
            coarse,
            fine,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn coarse_branch(&self) -> &CoarseBranch {
        &self.coarse
    }

    pub fn fine_branch(&self) -> Option<&FineBranch> {
        self.fine.as_ref()
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.store.num_trainable()
    }

    /// Trainable scalars whose canonical name starts with `prefix`.
    pub fn param_count_under(&self, prefix: &str) -> usize {
        self.store
            .trainable()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn trace(&self, rgb: &Tensor, depth: &Tensor, train: bool) -> Result<ForwardTrace> {
        let (pr, pd) = self.backbone.encode(rgb, depth, train)?;
        let coarse = self.coarse.forward(&pr, &pd, train)?;
        let fine = match &self.fine {
            Some(f) => Some(f.forward(coarse.top(), train)?),
            None => None,
        };
        Ok(ForwardTrace {
            rgb: pr,
            depth: pd,
            coarse,
            fine,
        })
    }

    pub fn forward(&self, rgb: &Tensor, depth: &Tensor, train: bool) -> Result<SaliencyPrediction> {
        Ok(self.trace(rgb, depth, train)?.prediction())
    }

    /// Writes `model.safetensors` and `model.toml` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(WEIGHTS_FILE))?;
        let text = toml::to_string(&self.config)?;
        crate::config::write_atomic(&dir.join(CONFIG_FILE), text.as_bytes())
    }

    /// Rebuilds a model from a checkpoint directory. When `expected` is
    /// given, its fields must match the stored config.
    pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let mut stored: ModelConfig = toml::from_str(&text)?;
        if let Some(expected) = expected {
            let diff = stored.diff(expected);
            if !diff.is_empty() {
                return Err(Error::ConfigMismatch(diff.join("\n")));
            }
        }
        // Weights come from the checkpoint, not the original pretrained file.
        stored.backbone.pretrained = None;
        let model = Msirn::new(stored.clone())?;
        model.store.load(&dir.join(WEIGHTS_FILE), true, |_| true)?;
        let mut model = model;
        model.config = toml::from_str(&text)?;
        Ok(model)
    }
}

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "model.toml";
