//! Dense layers on channel-major volumes, each with its adjoint.

use crate::error::{Error, Result};

/// `c × h × w` activations, channel-major, row-major inside a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Volume {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "{} values for a {c}x{h}x{w} volume",
                data.len()
            )));
        }
        Ok(Volume { c, h, w, data })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Output length of a transposed convolution along one axis.
pub fn deconv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    ((input.checked_sub(1)? * stride) + kernel).checked_sub(2 * padding).filter(|&n| n > 0)
}

/// Kernel taps `[lo, hi)` of input index `i` that land inside `0..out`,
/// and the output index of tap `lo`.
#[inline]
fn tap_range(i: usize, k: usize, stride: usize, pad: usize, out: usize) -> (usize, usize, usize) {
    let base = i * stride;
    let lo = pad.saturating_sub(base);
    let hi = k.min((out + pad).saturating_sub(base));
    (lo, hi.max(lo), (base + lo).saturating_sub(pad))
}

/// Transposed convolution. `kernel` is laid out `[c_in, c_out, k, k]`.
///
/// Each input pixel contributes `x[:, pixel] · W` (a row of length
/// `c_out · k²`), which is then scattered onto the output.
pub fn deconv_forward(
    x: &Volume,
    kernel: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Volume> {
    let oh = deconv_out_len(x.h, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("deconv collapses height {}", x.h)))?;
    let ow = deconv_out_len(x.w, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("deconv collapses width {}", x.w)))?;
    let row_len = c_out * k * k;
    if kernel.len() != x.c * row_len || bias.len() != c_out {
        return Err(Error::Shape("deconv kernel/bias shape".into()));
    }
    let mut y = Volume::zeros(c_out, oh, ow);
    for co in 0..c_out {
        y.channel_mut(co).fill(bias[co]);
    }
    let plane = x.h * x.w;
    let mut row = vec![0.0; row_len];
    for iy in 0..x.h {
        let (ky0, ky1, oy0) = tap_range(iy, k, stride, pad, oh);
        for ix in 0..x.w {
            let (kx0, kx1, ox0) = tap_range(ix, k, stride, pad, ow);
            row.fill(0.0);
            let p = iy * x.w + ix;
            for ci in 0..x.c {
                let v = x.data[ci * plane + p];
                if v != 0.0 {
                    for (r, &w) in row.iter_mut().zip(&kernel[ci * row_len..(ci + 1) * row_len]) {
                        *r += v * w;
                    }
                }
            }
            for co in 0..c_out {
                for ky in ky0..ky1 {
                    let o = (co * oh + oy0 + ky - ky0) * ow + ox0;
                    let src = &row[(co * k + ky) * k + kx0..(co * k + ky) * k + kx1];
                    for (d, s) in y.data[o..o + src.len()].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of a transposed convolution: accumulates into `d_kernel` and
/// `d_bias`, returns the input gradient (zeros unless `need_input_grad`).
#[allow(clippy::too_many_arguments)]
pub fn deconv_backward(
    x: &Volume,
    kernel: &[f64],
    dy: &Volume,
    k: usize,
    stride: usize,
    pad: usize,
    d_kernel: &mut [f64],
    d_bias: &mut [f64],
    need_input_grad: bool,
) -> Volume {
    let c_out = dy.c;
    let (oh, ow) = (dy.h, dy.w);
    let row_len = c_out * k * k;
    for co in 0..c_out {
        d_bias[co] += dy.channel(co).iter().sum::<f64>();
    }
    let mut dx = Volume::zeros(x.c, x.h, x.w);
    let plane = x.h * x.w;
    // Output gradient gathered back onto one input pixel's taps.
    let mut g = vec![0.0; row_len];
    for iy in 0..x.h {
        let (ky0, ky1, oy0) = tap_range(iy, k, stride, pad, oh);
        for ix in 0..x.w {
            let (kx0, kx1, ox0) = tap_range(ix, k, stride, pad, ow);
            g.fill(0.0);
            for co in 0..c_out {
                for ky in ky0..ky1 {
                    let o = (co * oh + oy0 + ky - ky0) * ow + ox0;
                    let dst = &mut g[(co * k + ky) * k + kx0..(co * k + ky) * k + kx1];
                    dst.copy_from_slice(&dy.data[o..o + dst.len()]);
                }
            }
            let p = iy * x.w + ix;
            for ci in 0..x.c {
                let v = x.data[ci * plane + p];
                let range = ci * row_len..(ci + 1) * row_len;
                if v != 0.0 {
                    for (d, &gv) in d_kernel[range.clone()].iter_mut().zip(&g) {
                        *d += v * gv;
                    }
                }
                if need_input_grad {
                    dx.data[ci * plane + p] = kernel[range].iter().zip(&g).map(|(a, b)| a * b).sum();
                }
            }
        }
    }
    dx
}

pub fn relu_inplace(v: &mut Volume) {
    v.data.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Interpolation taps for one axis, half-pixel centres (`align_corners`
/// off), edges clamped.
#[derive(Debug, Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut t = AxisTaps {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(src - lo as f64);
        }
        t
    }
}

/// Separable bilinear resize of an `in_h × in_w` plane; linear, so the
/// backward pass is [`Bilinear::adjoint`].
#[derive(Debug, Clone)]
pub struct Bilinear {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    ys: AxisTaps,
    xs: AxisTaps,
}

impl Bilinear {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Bilinear {
            in_h,
            in_w,
            out_h,
            out_w,
            ys: AxisTaps::new(in_h, out_h),
            xs: AxisTaps::new(in_w, out_w),
        }
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn apply(&self, plane: &[f64]) -> Vec<f64> {
        debug_assert_eq!(plane.len(), self.in_h * self.in_w);
        let mut tmp = vec![0.0; self.in_h * self.out_w];
        for r in 0..self.in_h {
            let row = &plane[r * self.in_w..(r + 1) * self.in_w];
            let dst = &mut tmp[r * self.out_w..(r + 1) * self.out_w];
            for (o, d) in dst.iter_mut().enumerate() {
                let f = self.xs.frac[o];
                *d = row[self.xs.lo[o]] * (1.0 - f) + row[self.xs.hi[o]] * f;
            }
        }
        let mut out = vec![0.0; self.out_h * self.out_w];
        for o in 0..self.out_h {
            let f = self.ys.frac[o];
            let a = &tmp[self.ys.lo[o] * self.out_w..(self.ys.lo[o] + 1) * self.out_w];
            let b = &tmp[self.ys.hi[o] * self.out_w..(self.ys.hi[o] + 1) * self.out_w];
            let dst = &mut out[o * self.out_w..(o + 1) * self.out_w];
            for x in 0..self.out_w {
                dst[x] = a[x] * (1.0 - f) + b[x] * f;
            }
        }
        out
    }

    pub fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.out_h * self.out_w);
        let mut tmp = vec![0.0; self.in_h * self.out_w];
        for o in 0..self.out_h {
            let f = self.ys.frac[o];
            let g = &grad[o * self.out_w..(o + 1) * self.out_w];
            let (lo, hi) = (self.ys.lo[o], self.ys.hi[o]);
            for x in 0..self.out_w {
                tmp[lo * self.out_w + x] += g[x] * (1.0 - f);
                tmp[hi * self.out_w + x] += g[x] * f;
            }
        }
        let mut out = vec![0.0; self.in_h * self.in_w];
        for r in 0..self.in_h {
            let src = &tmp[r * self.out_w..(r + 1) * self.out_w];
            let dst = &mut out[r * self.in_w..(r + 1) * self.in_w];
            for (o, &g) in src.iter().enumerate() {
                let f = self.xs.frac[o];
                dst[self.xs.lo[o]] += g * (1.0 - f);
                dst[self.xs.hi[o]] += g * f;
            }
        }
        out
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        let mut data = Vec::with_capacity(v.c * self.out_len());
        for c in 0..v.c {
            data.extend(self.apply(v.channel(c)));
        }
        Volume {
            c: v.c,
            h: self.out_h,
            w: self.out_w,
            data,
        }
    }
}

/// Numerically stable `log(sum(exp(z)))`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// `KL(gold || softmax(z))` computed through log-softmax (no flooring).
pub fn kl_from_logits(gold: &[f64], z: &[f64]) -> f64 {
    let lse = log_sum_exp(z);
    let mut kl = 0.0;
    for (&s, &zi) in gold.iter().zip(z) {
        if s > 0.0 {
            kl += s * (s.ln() - (zi - lse));
        }
    }
    kl
}
