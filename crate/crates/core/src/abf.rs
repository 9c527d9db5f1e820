//! Coarse refinement: a top-down chain of attention-based fusion (ABF) steps.
//!
//! Step `i` combines the cross-modal pair at level `i` with the pair at level
//! `i + 1`:
//!
//! ```text
//! A   = ASPP(Conv3x3(Cat(f_i^rgb, f_i^d)))                  at level-i size
//! B   = U(Proj1x1(SA(CA(Cat(f_{i+1}^rgb, f_{i+1}^d)))))     resized to level-i size
//! e_i = Cat(A + B, U(e_{i+1}))                              (no e_{i+1} at the top)
//! S_i = sigmoid(U_full(Conv3x3(e_i)))
//! ```
//!
//! The chain starts at level 6 (using `f_7`) and runs down for `K` steps.

use candle_core::Tensor;

use crate::backbone::FeaturePyramid;
use crate::config::{Ablation, ModelConfig, SpatialPooling};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, BatchNorm, Conv2d, ConvBn, ConvSpec, ParamStore, Scope};
use crate::resize::resize_tensor;

/// Level of the topmost ABF step.
pub const TOP_LEVEL: usize = 6;

/// Parallel dilated convolutions fused by a 1x1 convolution.
///
/// Rate 1 is a 1x1 branch. A branch whose rate reaches the feature size has
/// no in-bounds off-centre taps, so it is also built as a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct Aspp {
    branches: Vec<ConvBn>,
    fuse: ConvBn,
}

impl Aspp {
    pub fn new(s: &mut Scope, channels: usize, rates: &[usize], feature_size: [usize; 2]) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::InvalidConfig("ASPP needs at least one rate".into()));
        }
        let extent = feature_size[0].max(feature_size[1]);
        let branches = rates
            .iter()
            .enumerate()
            .map(|(j, &rate)| {
                let spec = if rate <= 1 || rate >= extent {
                    ConvSpec::new(channels, channels, 1)
                } else {
                    ConvSpec::new(channels, channels, 3).dilation(rate)
                };
                ConvBn::new(&mut s.sub(format!("branch{}", j + 1)), spec, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvBn::new(
            &mut s.sub("fuse"),
            ConvSpec::new(channels * rates.len(), channels, 1),
            true,
        )?;
        Ok(Aspp { branches, fuse })
    }

    pub fn branch_specs(&self) -> Vec<ConvSpec> {
        self.branches.iter().map(|b| b.spec()).collect()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(x, train))
            .collect::<Result<Vec<_>>>()?;
        self.fuse.forward(&Tensor::cat(&outs, 1)?, train)
    }
}

/// `feature ⊗ gate` for a `(B, C, 1, 1)` gate.
pub fn apply_channel_gate(feature: &Tensor, gate: &Tensor) -> Result<Tensor> {
    Ok(feature.broadcast_mul(gate)?)
}

/// `feature × gate` for a `(B, 1, H, W)` gate shared by every plane.
pub fn apply_spatial_gate(feature: &Tensor, gate: &Tensor) -> Result<Tensor> {
    Ok(feature.broadcast_mul(gate)?)
}

/// Channel gate from global max-pooling, a 1x1 conv, batch norm and ReLU,
/// squashed into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ChannelAttention {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(ChannelAttention {
            conv: Conv2d::no_bias(&mut s.sub("conv"), ConvSpec::new(channels, channels, 1))?,
            bn: BatchNorm::new(&mut s.sub("bn"), channels)?,
        })
    }

    pub fn gate(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let pooled = x.max_keepdim(2)?.max_keepdim(3)?;
        let m = self.bn.forward(&self.conv.forward(&pooled)?, train)?.relu()?;
        Ok(sigmoid(&m)?)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        apply_channel_gate(x, &self.gate(x, train)?)
    }
}

/// Spatial gate from plane-wise mean pooling and a 7x7 convolution. The
/// `GlobalAverage` variant pools over space instead and yields a per-plane gate.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    conv: Conv2d,
    pooling: SpatialPooling,
}

impl SpatialAttention {
    pub fn new(s: &mut Scope, channels: usize, pooling: SpatialPooling) -> Result<Self> {
        let spec = match pooling {
            SpatialPooling::ChannelMean => ConvSpec::new(1, 1, 7),
            SpatialPooling::GlobalAverage => ConvSpec::new(channels, channels, 1),
        };
        Ok(SpatialAttention {
            conv: Conv2d::with_bias(&mut s.sub("conv"), spec)?,
            pooling,
        })
    }

    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = match self.pooling {
            SpatialPooling::ChannelMean => x.mean_keepdim(1)?,
            SpatialPooling::GlobalAverage => x.mean_keepdim(2)?.mean_keepdim(3)?,
        };
        Ok(sigmoid(&self.conv.forward(&pooled)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gate = self.gate(x)?;
        match self.pooling {
            SpatialPooling::ChannelMean => apply_spatial_gate(x, &gate),
            SpatialPooling::GlobalAverage => apply_channel_gate(x, &gate),
        }
    }
}

#[derive(Debug, Clone)]
enum Context {
    Aspp(Aspp),
    /// The ASPP ablation: a single 3x3 convolution.
    Plain(ConvBn),
}

/// One ABF step at a given level.
#[derive(Debug, Clone)]
pub struct AbfStep {
    level: usize,
    reduce: ConvBn,
    context: Context,
    channel_att: Option<ChannelAttention>,
    spatial_att: Option<SpatialAttention>,
    project: ConvBn,
    head: Option<Conv2d>,
    out_channels: usize,
}

/// Inputs to one ABF step: the pair at level `i`, the pair at `i + 1`, and
/// the fused map from the step above (absent at the top).
#[derive(Debug, Clone, Copy)]
pub struct AbfInputs<'a> {
    pub rgb: &'a Tensor,
    pub depth: &'a Tensor,
    pub next_rgb: &'a Tensor,
    pub next_depth: &'a Tensor,
    pub prev: Option<&'a Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct AbfStepSpec {
    pub level: usize,
    /// Planes per stream at level `i`.
    pub channels: usize,
    /// Planes per stream at level `i + 1`.
    pub next_channels: usize,
    /// Planes of `e_{i+1}`, zero at the top.
    pub prev_channels: usize,
    pub feature_size: [usize; 2],
    pub with_head: bool,
}

impl AbfStep {
    pub fn new(s: &mut Scope, spec: AbfStepSpec, cfg: &ModelConfig) -> Result<Self> {
        let c = spec.channels;
        let cn = 2 * spec.next_channels;
        let reduce = ConvBn::new(&mut s.sub("reduce"), ConvSpec::new(2 * c, c, 3), true)?;
        let context = if cfg.has(Ablation::ASPP) {
            Context::Plain(ConvBn::new(&mut s.sub("context"), ConvSpec::new(c, c, 3), true)?)
        } else {
            Context::Aspp(Aspp::new(&mut s.sub("aspp"), c, &cfg.aspp_rates, spec.feature_size)?)
        };
        let channel_att = if cfg.has(Ablation::CA) {
            None
        } else {
            Some(ChannelAttention::new(&mut s.sub("channel_att"), cn)?)
        };
        let spatial_att = if cfg.has(Ablation::SA) {
            None
        } else {
            Some(SpatialAttention::new(&mut s.sub("spatial_att"), cn, cfg.spatial_pooling)?)
        };
        let project = ConvBn::new(&mut s.sub("project"), ConvSpec::new(cn, c, 1), true)?;
        let out_channels = c + spec.prev_channels;
        let head = if spec.with_head {
            Some(Conv2d::with_bias(&mut s.sub("head"), ConvSpec::new(out_channels, 1, 3))?)
        } else {
            None
        };
        Ok(AbfStep {
            level: spec.level,
            reduce,
            context,
            channel_att,
            spatial_att,
            project,
            head,
            out_channels,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Planes of `e_i`.
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn aspp(&self) -> Option<&Aspp> {
        match &self.context {
            Context::Aspp(a) => Some(a),
            Context::Plain(_) => None,
        }
    }

    /// Returns `e_i` and, when this step has a head, `S_i^c` at `full_size`.
    pub fn forward(&self, inputs: AbfInputs, full_size: [usize; 2], train: bool) -> Result<(Tensor, Option<Tensor>)> {
        let (_, _, h, w) = inputs.rgb.dims4()?;
        let (_, _, nh, nw) = inputs.next_rgb.dims4()?;
        if nh != h.div_ceil(2) || nw != w.div_ceil(2) {
            return Err(Error::Shape(format!(
                "level {} expects the next level at half of {h}x{w}, got {nh}x{nw}",
                self.level
            )));
        }
        let pair = Tensor::cat(&[inputs.rgb, inputs.depth], 1)?;
        let reduced = self.reduce.forward(&pair, train)?;
        let branch_a = match &self.context {
            Context::Aspp(a) => a.forward(&reduced, train)?,
            Context::Plain(c) => c.forward(&reduced, train)?,
        };

        let mut att = Tensor::cat(&[inputs.next_rgb, inputs.next_depth], 1)?;
        if let Some(ca) = &self.channel_att {
            att = ca.forward(&att, train)?;
        }
        if let Some(sa) = &self.spatial_att {
            att = sa.forward(&att)?;
        }
        let branch_b = resize_tensor(&self.project.forward(&att, train)?, h, w)?;
        if branch_a.dims() != branch_b.dims() {
            return Err(Error::Shape(format!(
                "level {} branches disagree: {:?} vs {:?}",
                self.level,
                branch_a.dims(),
                branch_b.dims()
            )));
        }
        let sum = (branch_a + branch_b)?;
        let fused = match inputs.prev {
            Some(prev) => Tensor::cat(&[&sum, &resize_tensor(prev, h, w)?], 1)?,
            None => sum,
        };
        let saliency = match &self.head {
            Some(head) => {
                let logits = resize_tensor(&head.forward(&fused)?, full_size[0], full_size[1])?;
                Some(sigmoid(&logits)?)
            }
            None => None,
        };
        Ok((fused, saliency))
    }
}

/// Fused maps and coarse saliency maps, ordered top-down (level 6 first).
#[derive(Debug, Clone)]
pub struct CoarseOutputs {
    pub levels: Vec<usize>,
    pub fused: Vec<Tensor>,
    pub saliency: Vec<Tensor>,
}

impl CoarseOutputs {
    /// The topmost fused map `e_6`.
    pub fn top(&self) -> &Tensor {
        &self.fused[0]
    }
}

#[derive(Debug, Clone)]
pub struct CoarseBranch {
    steps: Vec<AbfStep>,
    full_size: [usize; 2],
}

impl CoarseBranch {
    /// Builds the chain for `cfg.k` steps under `abf.level<i>.*`. With the CR
    /// ablation only the top step is kept (it feeds the fine branch) and no
    /// coarse heads are built.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, channels: &[usize]) -> Result<Self> {
        let sizes_h = crate::backbone::level_sizes(cfg.input_size[0]);
        let sizes_w = crate::backbone::level_sizes(cfg.input_size[1]);
        let supervised = !cfg.has(Ablation::CR);
        let n_steps = if supervised { cfg.k } else { 1 };
        let mut root = store.root();
        let mut abf = root.sub("abf");
        let mut steps = Vec::with_capacity(n_steps);
        let mut prev_channels = 0;
        for level in (TOP_LEVEL + 1 - n_steps..=TOP_LEVEL).rev() {
            let spec = AbfStepSpec {
                level,
                channels: channels[level - 1],
                next_channels: channels[level],
                prev_channels,
                feature_size: [sizes_h[level - 1], sizes_w[level - 1]],
                with_head: supervised,
            };
            let step = AbfStep::new(&mut abf.sub(format!("level{level}")), spec, cfg)?;
            prev_channels = step.out_channels();
            steps.push(step);
        }
        Ok(CoarseBranch {
            steps,
            full_size: cfg.input_size,
        })
    }

    pub fn steps(&self) -> &[AbfStep] {
        &self.steps
    }

    /// Planes of `e_6`.
    pub fn top_channels(&self) -> usize {
        self.steps[0].out_channels()
    }

    pub fn forward(&self, rgb: &FeaturePyramid, depth: &FeaturePyramid, train: bool) -> Result<CoarseOutputs> {
        let mut out = CoarseOutputs {
            levels: Vec::with_capacity(self.steps.len()),
            fused: Vec::with_capacity(self.steps.len()),
            saliency: Vec::with_capacity(self.steps.len()),
        };
        for step in &self.steps {
            let i = step.level();
            let inputs = AbfInputs {
                rgb: rgb.level(i),
                depth: depth.level(i),
                next_rgb: rgb.level(i + 1),
                next_depth: depth.level(i + 1),
                prev: out.fused.last(),
            };
            let (e, s) = step.forward(inputs, self.full_size, train)?;
            out.levels.push(i);
            out.fused.push(e);
            if let Some(s) = s {
                out.saliency.push(s);
            }
        }
        Ok(out)
    }
}
