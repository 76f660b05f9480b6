//! Minimal differentiable building blocks: same-padded 2-D convolution and 2×
//! bilinear upsampling. Each layer has an explicit backward pass; gradients
//! accumulate into a zero-initialised layer of identical shape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Odd kernel side; padding is `kernel / 2` so the grid is preserved.
    pub kernel: usize,
    /// `(out, in, k, k)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    /// Uniform init in `±sqrt(6 / fan_in)` (He) with zero bias.
    pub fn init<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let mut c = Self::zeros(in_ch, out_ch, kernel);
        let bound = (6.0 / (in_ch * kernel * kernel) as f64).sqrt();
        for w in &mut c.weight {
            *w = rng.gen_range(-bound..bound);
        }
        c
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_ch, self.out_ch, self.kernel)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_ch + i) * self.kernel + ky) * self.kernel + kx
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (h, w) = (x.h, x.w);
        let mut out = Tensor3::zeros(self.out_ch, h, w);
        let pad = (self.kernel / 2) as isize;
        for o in 0..self.out_ch {
            let plane = out.plane_mut(o);
            plane.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let src = x.plane(i);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let wv = self.weight[self.widx(o, i, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(w, dx);
                        for y in valid_range_iter(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let dst = &mut plane[y * w + x0..y * w + x1];
                            let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                            for (d, v) in dst.iter_mut().zip(s) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &Tensor3, grad_out: &Tensor3, grad: &mut Conv2d) -> Tensor3 {
        let (h, w) = (x.h, x.w);
        let mut gin = Tensor3::zeros(self.in_ch, h, w);
        let pad = (self.kernel / 2) as isize;
        for o in 0..self.out_ch {
            let go = grad_out.plane(o);
            grad.bias[o] += go.iter().sum::<f64>();
            for i in 0..self.in_ch {
                let src = x.plane(i);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let wi = self.widx(o, i, ky, kx);
                        let wv = self.weight[wi];
                        let (x0, x1) = valid_range(w, dx);
                        let mut gw = 0.0;
                        let gplane = gin.plane_mut(i);
                        for y in valid_range_iter(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let g = &go[y * w + x0..y * w + x1];
                            let sx0 = (x0 as isize + dx) as usize;
                            let sx1 = (x1 as isize + dx) as usize;
                            let s = &src[sy * w + sx0..sy * w + sx1];
                            for (gv, sv) in g.iter().zip(s) {
                                gw += gv * sv;
                            }
                            if wv != 0.0 {
                                for (gi, gv) in gplane[sy * w + sx0..sy * w + sx1].iter_mut().zip(g) {
                                    *gi += wv * gv;
                                }
                            }
                        }
                        grad.weight[wi] += gw;
                    }
                }
            }
        }
        gin
    }
}

/// Output columns `[x0, x1)` whose shifted source `x + d` lies inside `[0, n)`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

fn valid_range_iter(n: usize, d: isize) -> std::ops::Range<usize> {
    let (a, b) = valid_range(n, d);
    a..b
}

/// Source taps `(lo, hi, weight_lo, weight_hi)` for each output index of a 2×
/// bilinear upsample with half-pixel centres and edge clamping.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let k = o / 2;
            let other = if o % 2 == 0 { k.saturating_sub(1) } else { (k + 1).min(n - 1) };
            (k, other, 0.75, 0.25)
        })
        .collect()
}

pub fn upsample2x(x: &Tensor3) -> Tensor3 {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let ty = upsample_taps(x.h);
    let tx = upsample_taps(x.w);
    let mut out = Tensor3::zeros(x.c, oh, ow);
    let mut row = vec![0.0; ow];
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(a, b, wa, wb)) in ty.iter().enumerate() {
            for (ox, &(p, q, wp, wq)) in tx.iter().enumerate() {
                let ra = wp * src[a * x.w + p] + wq * src[a * x.w + q];
                let rb = wp * src[b * x.w + p] + wq * src[b * x.w + q];
                row[ox] = wa * ra + wb * rb;
            }
            dst[oy * ow..(oy + 1) * ow].copy_from_slice(&row);
        }
    }
    out
}

/// Adjoint of [`upsample2x`]; `h`, `w` are the pre-upsample sizes.
pub fn upsample2x_backward(grad_out: &Tensor3, h: usize, w: usize) -> Tensor3 {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let ow = 2 * w;
    let mut gin = Tensor3::zeros(grad_out.c, h, w);
    for c in 0..grad_out.c {
        let g = grad_out.plane(c);
        let dst = gin.plane_mut(c);
        for (oy, &(a, b, wa, wb)) in ty.iter().enumerate() {
            for (ox, &(p, q, wp, wq)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[a * w + p] += wa * wp * v;
                dst[a * w + q] += wa * wq * v;
                dst[b * w + p] += wb * wp * v;
                dst[b * w + q] += wb * wq * v;
            }
        }
    }
    gin
}
