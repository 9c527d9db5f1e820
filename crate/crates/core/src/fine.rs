//! Fine-grained refinement: an encoder-decoder over the top fused map `e_6`.
//!
//! `e_6` is resized to a quarter of the input resolution, then encoded by four
//! stride-2 stages `De1..De4`, each of the first three followed by a feature
//! aggregation (FA) block. The decoder runs
//!
//! ```text
//! O_4 = Up4(F_4)
//! O_i = U(Up_i(Cat(O_{i+1}, F_{i+1})))   i = 3, 2, 1   (resized to F_i)
//! S^f = sigmoid(U_full(Conv1x1(Cat(O_1, F_1))))
//! ```
//!
//! so every encoder level reaches the decoder through exactly one skip.

use candle_core::Tensor;

use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, ConvBn, ConvSpec, ParamStore, Scope};
use crate::resize::resize_tensor;

pub const STAGES: usize = 4;
/// Number of encoder stages followed by an FA block.
pub const FA_BLOCKS: usize = 3;
/// Smallest working side that survives four halvings.
pub const MIN_WORK_SIZE: usize = 16;

/// 3x3 average pooling, stride 1, zero padding counted in the mean.
pub fn avg_pool3x3(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = padded.narrow(2, dy, h)?;
        for dx in 0..3 {
            let tap = rows.narrow(3, dx, w)?;
            acc = Some(match acc {
                Some(a) => (a + tap)?,
                None => tap,
            });
        }
    }
    Ok((acc.expect("nine taps") / 9.0)?)
}

/// Inception-style block: 1x1, two dilated 3x3 convs and an average-pool
/// branch, concatenated and fused back to the input width.
#[derive(Debug, Clone)]
pub struct FeatureAggregation {
    point: ConvBn,
    dilated_a: ConvBn,
    dilated_b: ConvBn,
    pooled: ConvBn,
    fuse: ConvBn,
}

impl FeatureAggregation {
    pub fn new(s: &mut Scope, channels: usize, rates: [usize; 2]) -> Result<Self> {
        let c = channels;
        Ok(FeatureAggregation {
            point: ConvBn::new(&mut s.sub("point"), ConvSpec::new(c, c, 1), true)?,
            dilated_a: ConvBn::new(&mut s.sub("dilated_a"), ConvSpec::new(c, c, 3).dilation(rates[0]), true)?,
            dilated_b: ConvBn::new(&mut s.sub("dilated_b"), ConvSpec::new(c, c, 3).dilation(rates[1]), true)?,
            pooled: ConvBn::new(&mut s.sub("pooled"), ConvSpec::new(c, c, 1), true)?,
            fuse: ConvBn::new(&mut s.sub("fuse"), ConvSpec::new(4 * c, c, 1), true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let branches = [
            self.point.forward(x, train)?,
            self.dilated_a.forward(x, train)?,
            self.dilated_b.forward(x, train)?,
            self.pooled.forward(&avg_pool3x3(x)?, train)?,
        ];
        self.fuse.forward(&Tensor::cat(&branches, 1)?, train)
    }
}

/// Encoder features `F_1..F_4`, decoder features `O_4..O_1` and `S^f`.
#[derive(Debug, Clone)]
pub struct FineFeatures {
    pub encoded: Vec<Tensor>,
    pub decoded: Vec<Tensor>,
    pub saliency: Tensor,
}

#[derive(Debug, Clone)]
pub struct FineBranch {
    work_size: [usize; 2],
    full_size: [usize; 2],
    encoders: Vec<ConvBn>,
    aggregators: Vec<Option<FeatureAggregation>>,
    decoders: Vec<ConvBn>,
    head: Conv2d,
    skips: bool,
}

impl FineBranch {
    /// Registers `fine.de<i>`, `fine.fa<i>`, `fine.up<i>` and `fine.head`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, in_channels: usize, work_size: [usize; 2]) -> Result<Self> {
        if work_size.iter().any(|&s| s < MIN_WORK_SIZE) {
            return Err(Error::InvalidConfig(format!(
                "fine branch needs a working size of at least {MIN_WORK_SIZE}x{MIN_WORK_SIZE} \
                 to survive {STAGES} halvings, got {}x{}",
                work_size[0], work_size[1]
            )));
        }
        let c = cfg.scaled_fine_channels();
        let skips = !cfg.has(Ablation::SC);
        let mut root = store.root();
        let mut s = root.sub("fine");
        let mut encoders = Vec::with_capacity(STAGES);
        let mut aggregators = Vec::with_capacity(STAGES);
        for i in 1..=STAGES {
            let c_in = if i == 1 { in_channels } else { c };
            encoders.push(ConvBn::new(
                &mut s.sub(format!("de{i}")),
                ConvSpec::new(c_in, c, 3).stride(2),
                true,
            )?);
            aggregators.push(if i <= FA_BLOCKS && !cfg.has(Ablation::FA) {
                Some(FeatureAggregation::new(&mut s.sub(format!("fa{i}")), c, cfg.fa_rates)?)
            } else {
                None
            });
        }
        let merged = if skips { 2 * c } else { c };
        let mut decoders = Vec::with_capacity(STAGES);
        for i in (1..=STAGES).rev() {
            let c_in = if i == STAGES { c } else { merged };
            decoders.push(ConvBn::new(&mut s.sub(format!("up{i}")), ConvSpec::new(c_in, c, 3), true)?);
        }
        let head = Conv2d::with_bias(&mut s.sub("head"), ConvSpec::new(merged, 1, 1))?;
        Ok(FineBranch {
            work_size,
            full_size: cfg.input_size,
            encoders,
            aggregators,
            decoders,
            head,
            skips,
        })
    }

    fn merge(&self, o: &Tensor, f: &Tensor) -> Result<Tensor> {
        Ok(if self.skips {
            Tensor::cat(&[o, f], 1)?
        } else {
            o.clone()
        })
    }

    pub fn forward(&self, e6: &Tensor, train: bool) -> Result<FineFeatures> {
        let mut h = resize_tensor(e6, self.work_size[0], self.work_size[1])?;
        let mut encoded = Vec::with_capacity(STAGES);
        for (enc, fa) in self.encoders.iter().zip(&self.aggregators) {
            h = enc.forward(&h, train)?;
            if let Some(fa) = fa {
                h = fa.forward(&h, train)?;
            }
            encoded.push(h.clone());
        }

        let mut decoded = Vec::with_capacity(STAGES);
        let mut o = self.decoders[0].forward(&encoded[STAGES - 1], train)?;
        decoded.push(o.clone());
        for (k, dec) in self.decoders.iter().enumerate().skip(1) {
            // k = 1, 2, 3 produces O_3, O_2, O_1.
            let level = STAGES - k;
            let skip = &encoded[level];
            let (_, _, th, tw) = encoded[level - 1].dims4()?;
            o = resize_tensor(&dec.forward(&self.merge(&o, skip)?, train)?, th, tw)?;
            decoded.push(o.clone());
        }
        let logits = self.head.forward(&self.merge(&o, &encoded[0])?)?;
        let logits = resize_tensor(&logits, self.full_size[0], self.full_size[1])?;
        Ok(FineFeatures {
            encoded,
            decoded,
            saliency: sigmoid(&logits)?,
        })
    }
}
