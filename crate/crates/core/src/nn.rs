//! Parameter store and the handful of layers the network is built from.
//!
//! Every parameter is initialised from its own ChaCha stream seeded by
//! `(model seed, canonical name)`, so initial weights do not depend on
//! construction order and two builds with the same seed are bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-normal with `std = sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform { fan_in: usize },
    Const(f32),
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

/// Named collection of every tensor a model owns: trainable parameters and
/// batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    device: Device,
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        ParamStore {
            seed,
            device,
            entries: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        if self.entries.contains_key(&name) {
            return Err(Error::Checkpoint(format!("parameter {name} registered twice")));
        }
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let data: Vec<f32> = match init {
            Init::Const(v) => vec![v; numel],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..numel).map(|_| dist.sample(&mut rng) as f32).collect()
            }
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("nonempty range");
                (0..numel).map(|_| dist.sample(&mut rng) as f32).collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let tensor = var.as_tensor().clone();
        self.entries.insert(name, Entry { var, trainable });
        Ok(tensor)
    }

    pub(crate) fn var(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    /// Trainable parameters in canonical-name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &e.var))
    }

    /// Every stored tensor, trainable or not.
    pub fn all(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.var))
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(
            self.entries
                .iter()
                .map(|(k, e)| (k.clone(), e.var.as_tensor().clone())),
            path,
        )
    }

    /// Overwrites stored tensors from a safetensors file. With `strict`, the
    /// file must hold exactly the stored names; otherwise only the names
    /// accepted by `filter` are read and unknown names are ignored.
    pub fn load(&self, path: &Path, strict: bool, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        if strict {
            let missing: Vec<&String> = self
                .entries
                .keys()
                .filter(|k| !tensors.contains_key(*k))
                .collect();
            let extra: Vec<&String> = tensors
                .keys()
                .filter(|k| !self.entries.contains_key(*k))
                .collect();
            if !missing.is_empty() || !extra.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "{}: missing {:?}, unexpected {:?}",
                    path.display(),
                    missing,
                    extra
                )));
            }
        }
        let mut loaded = 0;
        for (name, entry) in &self.entries {
            if !filter(name) {
                continue;
            }
            let Some(t) = tensors.get(name) else { continue };
            if t.dims() != entry.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, file shape {:?}",
                    entry.var.dims(),
                    t.dims()
                )));
            }
            entry.var.set(&t.to_dtype(DType::F32)?)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A naming prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = self.join(&name.to_string());
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.join(name);
        self.store.create(full, shape, init, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let full = self.join(name);
        self.store.create(full.clone(), shape, Init::Const(value), false)?;
        Ok(self.store.var(&full).expect("just inserted").clone())
    }
}

/// `1 / (1 + e^-x)` via `tanh`, which has a native backward pass.
pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// "Same" padding for odd kernels.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Conv2d {
    /// Convolution without bias, He-initialised; meant to be followed by batch norm.
    pub fn no_bias(s: &mut Scope, spec: ConvSpec) -> Result<Self> {
        let weight = s.param(
            "weight",
            &[spec.c_out, spec.c_in, spec.kernel, spec.kernel],
            Init::KaimingNormal {
                fan_in: spec.fan_in(),
            },
        )?;
        Ok(Conv2d {
            weight,
            bias: None,
            spec,
        })
    }

    /// Convolution with bias, for output heads. The weight is He-initialised
    /// too: heads read rectified features, and the smaller fan-in uniform
    /// scale starves the layers behind the fine head of gradient.
    pub fn with_bias(s: &mut Scope, spec: ConvSpec) -> Result<Self> {
        let weight = s.param(
            "weight",
            &[spec.c_out, spec.c_in, spec.kernel, spec.kernel],
            Init::KaimingNormal {
                fan_in: spec.fan_in(),
            },
        )?;
        let bias = s.param(
            "bias",
            &[spec.c_out],
            Init::FanInUniform {
                fan_in: spec.fan_in(),
            },
        )?;
        Ok(Conv2d {
            weight,
            bias: Some(bias),
            spec,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.spec;
        let (_, _, h, w) = x.dims4()?;
        let y = if s.kernel == 1 && s.stride == 1 {
            pointwise(x, &self.weight)?
        } else if s.stride == 1 && (s.c_out <= 4 || h * w >= 100 * 100) {
            crate::conv::conv2d_direct(x, &self.weight, s.stride, s.dilation, s.padding())?
        } else {
            unfolded(x, &self.weight, s)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, s.c_out, 1, 1))?)?,
            None => y,
        })
    }
}

/// 1x1 convolution as a batched matmul, which avoids im2col entirely.
fn pointwise(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let c_out = weight.dim(0)?;
    let wm = weight.reshape((1, c_out, c))?;
    wm.broadcast_matmul(&x.reshape((n, c, h * w))?)?
        .reshape((n, c_out, h, w))
}

/// Convolution as `W · im2col(x)`: one batched GEMM forward and two backward.
fn unfolded(x: &Tensor, weight: &Tensor, spec: ConvSpec) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let geo = Unfold::new(c, (h, w), spec)?;
    let cols = x.contiguous()?.apply_op1(geo)?;
    let wm = weight.reshape((1, spec.c_out, geo.rows()))?;
    wm.broadcast_matmul(&cols)?
        .reshape((n, spec.c_out, geo.out.0, geo.out.1))
}

/// Geometry of an im2col unfold: `(N, C, H, W) -> (N, C k k, H' W')`, or
/// the matching fold (scatter-add) when `fold` is set.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    channels: usize,
    input: (usize, usize),
    out: (usize, usize),
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    fold: bool,
}

impl Unfold {
    fn new(channels: usize, input: (usize, usize), spec: ConvSpec) -> candle_core::Result<Self> {
        let pad = spec.padding();
        let span = spec.dilation * (spec.kernel - 1) + 1;
        let out_len = |n: usize| -> candle_core::Result<usize> {
            if n + 2 * pad < span {
                candle_core::bail!("conv input {n} smaller than kernel span {span}");
            }
            Ok((n + 2 * pad - span) / spec.stride + 1)
        };
        Ok(Unfold {
            channels,
            input,
            out: (out_len(input.0)?, out_len(input.1)?),
            kernel: spec.kernel,
            stride: spec.stride,
            dilation: spec.dilation,
            pad,
            fold: false,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(row, col_offset, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = self.input;
        let (oh, ow) = self.out;
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base_in = (c * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            f(row, oy * ow + ox, base_in + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        if self.fold {
            "fold"
        } else {
            "unfold"
        }
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let input = crate::resize::contiguous_f32(storage, layout, self.name())?;
        let n = layout.shape().dims()[0];
        let image_len = self.channels * self.input.0 * self.input.1;
        let positions = self.out.0 * self.out.1;
        let cols_len = self.rows() * positions;
        if self.fold {
            let mut out = vec![0f32; n * image_len];
            for (cols, img) in input.chunks(cols_len).zip(out.chunks_mut(image_len)) {
                self.for_each_tap(|row, p, i| img[i] += cols[row * positions + p]);
            }
            let shape = Shape::from((n, self.channels, self.input.0, self.input.1));
            Ok((CpuStorage::F32(out), shape))
        } else {
            let mut out = vec![0f32; n * cols_len];
            for (img, cols) in input.chunks(image_len).zip(out.chunks_mut(cols_len)) {
                self.for_each_tap(|row, p, i| cols[row * positions + p] = img[i]);
            }
            Ok((CpuStorage::F32(out), Shape::from((n, self.rows(), positions))))
        }
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let adjoint = Unfold {
            fold: !self.fold,
            ..*self
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(adjoint)?))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
}

impl BatchNorm {
    const EPS: f64 = 1e-5;
    const MOMENTUM: f64 = 0.1;

    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            weight: s.param("weight", &[channels], Init::Const(1.0))?,
            bias: s.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: s.buffer("running_mean", &[channels], 0.0)?,
            running_var: s.buffer("running_var", &[channels], 1.0)?,
            channels,
        })
    }

    /// Normalises with batch statistics (updating the running averages) when
    /// `train`, otherwise with the running averages.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.channels;
        let (mean, var) = if train {
            let (n, _, h, w) = x.dims4()?;
            let count = (n * h * w) as f64;
            let mean = (x.sum_keepdim((0, 2, 3))? / count)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = (centered.sqr()?.sum_keepdim((0, 2, 3))? / count)?;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            let m = Self::MOMENTUM;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().reshape(c)? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.reshape(c)? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let inv_std = (var + Self::EPS)?.sqrt()?.recip()?;
        let scale = self.weight.reshape((1, c, 1, 1))?.broadcast_mul(&inv_std)?;
        let shift = self
            .bias
            .reshape((1, c, 1, 1))?
            .broadcast_sub(&mean.broadcast_mul(&scale)?)?;
        Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Convolution, batch norm, optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
}

impl ConvBn {
    pub fn new(s: &mut Scope, spec: ConvSpec, relu: bool) -> Result<Self> {
        let conv = Conv2d::no_bias(&mut s.sub("conv"), spec)?;
        let bn = BatchNorm::new(&mut s.sub("bn"), spec.c_out)?;
        Ok(ConvBn { conv, bn, relu })
    }

    pub fn spec(&self) -> ConvSpec {
        self.conv.spec()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, train)?;
        Ok(if self.relu { y.relu()? } else { y })
    }
}

/// Writes named tensors to a safetensors file through a temporary sibling.
pub(crate) fn save_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>, path: &Path) -> Result<()> {
    let map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let tmp = path.with_extension("safetensors.tmp");
    candle_core::safetensors::save(&map, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
