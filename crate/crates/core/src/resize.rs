//! Bilinear resampling shared by preprocessing, the network's upsampling
//! operator and prediction export.
//!
//! Sampling uses half-pixel centres (`align_corners = false`) without
//! antialiasing, so the array routine and the tensor routine produce the same
//! values for the same input.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use ndarray::{Array2, ArrayView2};

/// Two-tap interpolation table for one axis: `out[i] = x[lo[i]] * (1 - frac[i]) + x[hi[i]] * frac[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f32>,
}

pub fn axis_taps(src: usize, dst: usize) -> AxisTaps {
    assert!(src > 0 && dst > 0, "resize axes must be nonempty");
    let scale = src as f64 / dst as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let coord = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (coord.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = if hi == lo { 0.0 } else { coord - lo as f64 };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(frac as f32);
    }
    taps
}

/// Resizes one plane to `(out_h, out_w)`.
pub fn resize_plane(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let src = src.as_standard_layout();
    let plan = Plan::new((h, w), (out_h, out_w));
    let mut out = vec![0.0; out_h * out_w];
    let mut tmp = vec![0.0; h * out_w];
    plan.forward(src.as_slice().expect("standard layout"), &mut tmp, &mut out);
    Array2::from_shape_vec((out_h, out_w), out).expect("sized above")
}

/// Interpolation tables for one `(h, w) -> (out_h, out_w)` resize.
#[derive(Debug, Clone)]
struct Plan {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisTaps,
    cols: AxisTaps,
}

impl Plan {
    fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Plan {
            src,
            dst,
            rows: axis_taps(src.0, dst.0),
            cols: axis_taps(src.1, dst.1),
        }
    }

    /// Horizontal pass into `tmp` (`h x out_w`), then vertical pass into `out`.
    fn forward(&self, src: &[f32], tmp: &mut [f32], out: &mut [f32]) {
        let ((h, w), (oh, ow)) = (self.src, self.dst);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let t = &mut tmp[y * ow..(y + 1) * ow];
            for x in 0..ow {
                let a = row[self.cols.lo[x]];
                let b = row[self.cols.hi[x]];
                t[x] = a + (b - a) * self.cols.frac[x];
            }
        }
        for y in 0..oh {
            let f = self.rows.frac[y];
            let ta = &tmp[self.rows.lo[y] * ow..(self.rows.lo[y] + 1) * ow];
            let tb = &tmp[self.rows.hi[y] * ow..(self.rows.hi[y] + 1) * ow];
            let o = &mut out[y * ow..(y + 1) * ow];
            for x in 0..ow {
                o[x] = ta[x] + (tb[x] - ta[x]) * f;
            }
        }
    }

    /// Adjoint of [`Plan::forward`]: scatters `grad` (`out_h x out_w`) back
    /// onto `out` (`h x w`), which must start zeroed.
    fn adjoint(&self, grad: &[f32], tmp: &mut [f32], out: &mut [f32]) {
        let ((_, w), (oh, ow)) = (self.src, self.dst);
        tmp.fill(0.0);
        for y in 0..oh {
            let f = self.rows.frac[y];
            let g = &grad[y * ow..(y + 1) * ow];
            let (lo, hi) = (self.rows.lo[y], self.rows.hi[y]);
            for x in 0..ow {
                tmp[lo * ow + x] += g[x] * (1.0 - f);
                tmp[hi * ow + x] += g[x] * f;
            }
        }
        for (y, t) in tmp.chunks(ow).enumerate() {
            let o = &mut out[y * w..(y + 1) * w];
            for x in 0..ow {
                let f = self.cols.frac[x];
                o[self.cols.lo[x]] += t[x] * (1.0 - f);
                o[self.cols.hi[x]] += t[x] * f;
            }
        }
    }
}

/// Bilinear resize of every plane of an `(N, C, H, W)` tensor, or its
/// adjoint when `adjoint` is set. Each direction's gradient is the other.
#[derive(Debug, Clone)]
struct ResizeOp {
    plan: Plan,
    adjoint: bool,
}

impl CustomOp1 for ResizeOp {
    fn name(&self) -> &'static str {
        if self.adjoint {
            "bilinear-resize-adjoint"
        } else {
            "bilinear-resize"
        }
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, ih, iw) = layout.shape().dims4()?;
        let (src, dst) = if self.adjoint {
            (self.plan.dst, self.plan.src)
        } else {
            (self.plan.src, self.plan.dst)
        };
        if (ih, iw) != src {
            candle_core::bail!("{}: expected {src:?} planes, got {:?}", self.name(), (ih, iw));
        }
        let input = contiguous_f32(storage, layout, self.name())?;
        let (in_len, out_len) = (src.0 * src.1, dst.0 * dst.1);
        let mut out = vec![0f32; n * c * out_len];
        let mut tmp = vec![0f32; self.plan.src.0 * self.plan.dst.1];
        for (plane, o) in input.chunks(in_len).zip(out.chunks_mut(out_len)) {
            if self.adjoint {
                self.plan.adjoint(plane, &mut tmp, o);
            } else {
                self.plan.forward(plane, &mut tmp, o);
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, c, dst.0, dst.1))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = ResizeOp {
            plan: self.plan.clone(),
            adjoint: !self.adjoint,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(op)?))
    }
}

/// Contiguous `f32` view of a custom-op input.
pub(crate) fn contiguous_f32<'a>(
    storage: &'a CpuStorage,
    layout: &Layout,
    op: &str,
) -> candle_core::Result<&'a [f32]> {
    let data = storage.as_slice::<f32>()?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

/// Differentiable bilinear resize of an `(N, C, H, W)` `f32` tensor.
pub fn resize_tensor(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let op = ResizeOp {
        plan: Plan::new((h, w), (out_h, out_w)),
        adjoint: false,
    };
    x.contiguous()?.apply_op1(op)
}
