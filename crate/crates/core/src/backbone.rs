//! Two-stream seven-level residual encoder.
//!
//! Level 1 is a 3x3 stride-2 stem (no max-pooling follows it). Levels 2-4 are
//! the first three residual stages of a 34-layer basic-block network (3, 4
//! and 6 blocks). Levels 5-7 are single stride-2 basic blocks. Every level
//! halves the resolution, giving `[112, 56, 28, 14, 7, 4, 2]` for a 224 input.

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBn, ConvSpec, ParamStore, Scope};

pub const LEVELS: usize = 7;

/// Basic blocks per level; level 1 is the convolutional stem.
const BLOCKS_PER_LEVEL: [usize; LEVELS] = [0, 3, 4, 6, 1, 1, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Unscaled plane count of each of the seven levels.
    pub channels: Vec<usize>,
    pub width_scale: f64,
    /// Feed depth to a 3-channel stem by replicating it (for pretrained weights).
    pub depth_replicate: bool,
    /// Optional safetensors file with weights for levels 1-4 of both streams.
    pub pretrained: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![64, 64, 128, 256, 512, 512, 512],
            width_scale: 1.0,
            depth_replicate: false,
            pretrained: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != LEVELS {
            return Err(Error::InvalidConfig(format!(
                "backbone needs exactly {LEVELS} channel counts, got {}",
                self.channels.len()
            )));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled_channels(&self) -> Vec<usize> {
        self.channels
            .iter()
            .map(|&c| scale_channels(c, self.width_scale))
            .collect()
    }
}

/// `floor(c * scale)`, at least 1.
pub fn scale_channels(c: usize, scale: f64) -> usize {
    ((c as f64 * scale).floor() as usize).max(1)
}

/// Spatial side of each level for an input side, halving with ceiling.
pub fn level_sizes(input: usize) -> [usize; LEVELS] {
    let mut out = [0; LEVELS];
    let mut s = input;
    for o in &mut out {
        s = s.div_ceil(2);
        *o = s;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Rgb,
    Depth,
}

/// Seven feature maps `f_1..f_7` of one stream, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
    pub stream: StreamKind,
}

impl FeaturePyramid {
    /// Level `i` in 1-based numbering.
    pub fn level(&self, i: usize) -> &Tensor {
        &self.maps[i - 1]
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new(s: &mut Scope, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let conv1 = ConvBn::new(&mut s.sub("conv1"), ConvSpec::new(c_in, c_out, 3).stride(stride), true)?;
        let conv2 = ConvBn::new(&mut s.sub("conv2"), ConvSpec::new(c_out, c_out, 3), false)?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(
                &mut s.sub("shortcut"),
                ConvSpec::new(c_in, c_out, 1).stride(stride),
                false,
            )?)
        } else {
            None
        };
        Ok(BasicBlock {
            conv1,
            conv2,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv2.forward(&self.conv1.forward(x, train)?, train)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Stream {
    stem: ConvBn,
    levels: Vec<Vec<BasicBlock>>,
    kind: StreamKind,
}

impl Stream {
    fn new(s: &mut Scope, kind: StreamKind, in_channels: usize, channels: &[usize]) -> Result<Self> {
        let stem = ConvBn::new(
            &mut s.sub("level1").sub("stem"),
            ConvSpec::new(in_channels, channels[0], 3).stride(2),
            true,
        )?;
        let mut levels = Vec::with_capacity(LEVELS - 1);
        for level in 2..=LEVELS {
            let mut ls = s.sub(format!("level{level}"));
            let c_in = channels[level - 2];
            let c_out = channels[level - 1];
            let blocks = (0..BLOCKS_PER_LEVEL[level - 1])
                .map(|b| {
                    let (bin, stride) = if b == 0 { (c_in, 2) } else { (c_out, 1) };
                    BasicBlock::new(&mut ls.sub(format!("block{}", b + 1)), bin, c_out, stride)
                })
                .collect::<Result<Vec<_>>>()?;
            levels.push(blocks);
        }
        Ok(Stream { stem, levels, kind })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let mut maps = Vec::with_capacity(LEVELS);
        let mut h = self.stem.forward(x, train)?;
        maps.push(h.clone());
        for blocks in &self.levels {
            for b in blocks {
                h = b.forward(&h, train)?;
            }
            maps.push(h.clone());
        }
        Ok(FeaturePyramid {
            maps,
            stream: self.kind,
        })
    }
}

/// RGB and depth encoders with identical topology and independent weights.
#[derive(Debug, Clone)]
pub struct Backbone {
    rgb: Stream,
    depth: Stream,
    channels: Vec<usize>,
    input_size: [usize; 2],
    depth_replicate: bool,
}

impl Backbone {
    /// Registers both streams under `rgb.*` and `depth.*` in `store`.
    pub fn new(store: &mut ParamStore, config: &BackboneConfig, input_size: [usize; 2]) -> Result<Self> {
        config.validate()?;
        let channels = config.scaled_channels();
        let mut root = store.root();
        let rgb = Stream::new(&mut root.sub("rgb"), StreamKind::Rgb, 3, &channels)?;
        let depth_in = if config.depth_replicate { 3 } else { 1 };
        let depth = Stream::new(&mut root.sub("depth"), StreamKind::Depth, depth_in, &channels)?;
        Ok(Backbone {
            rgb,
            depth,
            channels,
            input_size,
            depth_replicate: config.depth_replicate,
        })
    }

    /// Scaled plane count per level.
    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn input_size(&self) -> [usize; 2] {
        self.input_size
    }

    /// `(f^rgb, f^d)` for `rgb: (B,3,H,W)` and `depth: (B,1,H,W)`.
    pub fn encode(&self, rgb: &Tensor, depth: &Tensor, train: bool) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let [h, w] = self.input_size;
        let (b, c, rh, rw) = rgb.dims4()?;
        let (bd, cd, dh, dw) = depth.dims4()?;
        if c != 3 || (rh, rw) != (h, w) {
            return Err(Error::Shape(format!(
                "expected rgb input (B, 3, {h}, {w}), got {:?}",
                rgb.dims()
            )));
        }
        if bd != b || cd != 1 || (dh, dw) != (h, w) {
            return Err(Error::Shape(format!(
                "expected depth input ({b}, 1, {h}, {w}), got {:?}",
                depth.dims()
            )));
        }
        let depth = if self.depth_replicate {
            Tensor::cat(&[depth, depth, depth], 1)?
        } else {
            depth.clone()
        };
        Ok((self.rgb.forward(rgb, train)?, self.depth.forward(&depth, train)?))
    }
}

/// Builds a standalone backbone with its own parameter store.
pub fn build_backbone(config: &BackboneConfig, input_size: [usize; 2], seed: u64) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new(seed, Device::Cpu);
    let backbone = Backbone::new(&mut store, config, input_size)?;
    if let Some(path) = &config.pretrained {
        load_pretrained(&store, path)?;
    }
    Ok((backbone, store))
}

/// Copies levels 1-4 of both streams from an external weight file.
pub fn load_pretrained(store: &ParamStore, path: &std::path::Path) -> Result<usize> {
    let n = store.load(path, false, |name| {
        ["rgb.level", "depth.level"].iter().any(|p| {
            name.strip_prefix(p)
                .and_then(|rest| rest.chars().next())
                .is_some_and(|c| ('1'..='4').contains(&c))
        })
    })?;
    log::info!("loaded {n} pretrained backbone tensors from {}", path.display());
    Ok(n)
}
