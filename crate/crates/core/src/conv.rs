//! Direct 2-D convolution with hand-written gradients.
//!
//! Preferred over im2col for layers with few output planes or large maps,
//! where the unfolded matrix would dwarf the work it feeds. The kernels walk
//! output rows so the inner loops are contiguous multiply-adds.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use crate::resize::contiguous_f32;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: (usize, usize),
    pub out: (usize, usize),
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl Geometry {
    /// Range of output columns whose input column `ox * stride + offset - pad`
    /// lies inside the image, and the first such input column.
    fn cols(&self, offset: usize) -> (usize, usize, usize) {
        let (w, ow) = (self.input.1 as isize, self.out.1 as isize);
        let shift = offset as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = ((w - 1 - shift).div_euclid(s) + 1).clamp(0, ow);
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo as usize, hi as usize, (lo * s + shift) as usize)
    }

    fn row(&self, oy: usize, offset: usize) -> Option<usize> {
        let iy = (oy * self.stride + offset) as isize - self.pad as isize;
        (iy >= 0 && iy < self.input.0 as isize).then_some(iy as usize)
    }

    /// Visits every (output row segment, input row segment) pair that one
    /// kernel tap connects: `f(out_offset, in_offset, len)`, in elements
    /// relative to the planes. Input indices advance by `stride`.
    fn for_each_segment(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (lo, hi, ix0) = self.cols(kx * self.dilation);
        if lo == hi {
            return;
        }
        for oy in 0..self.out.0 {
            if let Some(iy) = self.row(oy, ky * self.dilation) {
                f(oy * self.out.1 + lo, iy * self.input.1 + ix0, hi - lo);
            }
        }
    }

    fn in_plane(&self) -> usize {
        self.input.0 * self.input.1
    }

    fn out_plane(&self) -> usize {
        self.out.0 * self.out.1
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

#[inline]
fn axpy_strided(y: &mut [f32], a: f32, x: &[f32], stride: usize) {
    if stride == 1 {
        for (yv, xv) in y.iter_mut().zip(x) {
            *yv += a * xv;
        }
    } else {
        for (i, yv) in y.iter_mut().enumerate() {
            *yv += a * x[i * stride];
        }
    }
}

#[inline]
fn dot_strided(a: &[f32], b: &[f32], stride: usize) -> f32 {
    if stride == 1 {
        let mut acc = [0f32; 8];
        let (ca, cb) = (a.chunks_exact(8), b[..a.len()].chunks_exact(8));
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for k in 0..8 {
                acc[k] += x[k] * y[k];
            }
        }
        let mut s: f32 = acc.iter().sum();
        for (x, y) in ra.iter().zip(rb) {
            s += x * y;
        }
        s
    } else {
        a.iter().enumerate().map(|(i, v)| v * b[i * stride]).sum()
    }
}

/// `y = conv(x, w)`; arguments are `x (N, C, H, W)` and `w (O, C, k, k)`.
#[derive(Debug, Clone, Copy)]
struct Forward(Geometry);

/// `dL/dx` from `(dL/dy, w)`.
#[derive(Debug, Clone, Copy)]
struct InputGrad(Geometry);

/// `dL/dw` from `(x, dL/dy)`.
#[derive(Debug, Clone, Copy)]
struct WeightGrad(Geometry);

impl CustomOp2 for Forward {
    fn name(&self) -> &'static str {
        "direct-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let x = contiguous_f32(s1, l1, self.name())?;
        let w = contiguous_f32(s2, l2, self.name())?;
        let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
        let mut out = vec![0f32; g.batch * g.c_out * op];
        for n in 0..g.batch {
            for o in 0..g.c_out {
                let y = &mut out[(n * g.c_out + o) * op..][..op];
                for c in 0..g.c_in {
                    let xp = &x[(n * g.c_in + c) * ip..][..ip];
                    let wk = &w[(o * g.c_in + c) * taps..][..taps];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let a = wk[ky * g.kernel + kx];
                            g.for_each_segment(ky, kx, |yo, xo, len| {
                                axpy_strided(&mut y[yo..yo + len], a, &xp[xo..], g.stride)
                            });
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((g.batch, g.c_out, g.out.0, g.out.1))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(&w.contiguous()?, &InputGrad(self.0))?;
        let gw = x.contiguous()?.apply_op2_no_bwd(&grad, &WeightGrad(self.0))?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "direct-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let dy = contiguous_f32(s1, l1, self.name())?;
        let w = contiguous_f32(s2, l2, self.name())?;
        let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
        let mut dx = vec![0f32; g.batch * g.c_in * ip];
        for n in 0..g.batch {
            for c in 0..g.c_in {
                let xp = &mut dx[(n * g.c_in + c) * ip..][..ip];
                for o in 0..g.c_out {
                    let yp = &dy[(n * g.c_out + o) * op..][..op];
                    let wk = &w[(o * g.c_in + c) * taps..][..taps];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let a = wk[ky * g.kernel + kx];
                            g.for_each_segment(ky, kx, |yo, xo, len| {
                                let src = &yp[yo..yo + len];
                                if g.stride == 1 {
                                    for (d, s) in xp[xo..xo + len].iter_mut().zip(src) {
                                        *d += a * s;
                                    }
                                } else {
                                    for (i, s) in src.iter().enumerate() {
                                        xp[xo + i * g.stride] += a * s;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(dx), Shape::from((g.batch, g.c_in, g.input.0, g.input.1))))
    }
}

impl CustomOp2 for WeightGrad {
    fn name(&self) -> &'static str {
        "direct-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let x = contiguous_f32(s1, l1, self.name())?;
        let dy = contiguous_f32(s2, l2, self.name())?;
        let (ip, op, taps) = (g.in_plane(), g.out_plane(), g.taps());
        let mut dw = vec![0f32; g.c_out * g.c_in * taps];
        for o in 0..g.c_out {
            for c in 0..g.c_in {
                let wk = &mut dw[(o * g.c_in + c) * taps..][..taps];
                for n in 0..g.batch {
                    let xp = &x[(n * g.c_in + c) * ip..][..ip];
                    let yp = &dy[(n * g.c_out + o) * op..][..op];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let mut acc = 0f32;
                            g.for_each_segment(ky, kx, |yo, xo, len| {
                                acc += dot_strided(&yp[yo..yo + len], &xp[xo..], g.stride)
                            });
                            wk[ky * g.kernel + kx] += acc;
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(dw), Shape::from((g.c_out, g.c_in, g.kernel, g.kernel))))
    }
}

/// Differentiable direct convolution with "same"-style padding `pad`.
pub(crate) fn conv2d_direct(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    let (batch, c_in, h, wd) = x.dims4()?;
    let (c_out, wc, kernel, k2) = w.dims4()?;
    if wc != c_in || k2 != kernel {
        candle_core::bail!("direct conv: weight {:?} does not fit input {:?}", w.dims(), x.dims());
    }
    let span = dilation * (kernel - 1) + 1;
    if h + 2 * pad < span || wd + 2 * pad < span {
        candle_core::bail!("direct conv: input {h}x{wd} smaller than kernel span {span}");
    }
    let geo = Geometry {
        batch,
        c_in,
        c_out,
        input: (h, wd),
        out: ((h + 2 * pad - span) / stride + 1, (wd + 2 * pad - span) / stride + 1),
        kernel,
        stride,
        dilation,
        pad,
    };
    x.contiguous()?.apply_op2(&w.contiguous()?, Forward(geo))
}
