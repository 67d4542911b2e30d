//! Differentiable building blocks over `h × w × c` feature maps.
//!
//! Parameters live in one flat `&[f64]`; each layer stores offsets into it.
//! Backward passes accumulate into a gradient buffer of the same length and
//! return the gradient with respect to the layer input.

use super::params::{Init, LayoutBuilder};
use crate::image::Image;

/// `c = a · b + beta · c` with explicit strides; `c` is row-major `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices that cover every index reachable with
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    w: usize,
    b: usize,
}

impl Conv2d {
    pub fn new(lb: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init) -> Self {
        let fan_in = k * k * cin;
        let w = lb.alloc(&format!("{name}.weight"), &[k, k, cin, cout], init.with_fan_in(fan_in));
        let b = lb.alloc(&format!("{name}.bias"), &[cout], Init::Zeros);
        let pad = if stride == 1 { k / 2 } else { 0 };
        Self { cin, cout, k, stride, pad, w, b }
    }

    fn kdim(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col(&self, x: &Image) -> Vec<f64> {
        let (h, w, c) = x.shape();
        let (ho, wo) = self.out_size(h, w);
        let kd = self.kdim();
        let mut cols = vec![0.0; ho * wo * kd];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[(oy * wo + ox) * kd..][..kd];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[(ky * self.k + kx) * c..][..c].copy_from_slice(x.pixel(iy as usize, ix as usize));
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Image {
        let c = self.cin;
        let (ho, wo) = self.out_size(h, w);
        let kd = self.kdim();
        let mut gx = Image::zeros(h, w, c);
        let data = gx.data_mut();
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &cols[(oy * wo + ox) * kd..][..kd];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = &mut data[(iy as usize * w + ix as usize) * c..][..c];
                        for (d, s) in dst.iter_mut().zip(&row[(ky * self.k + kx) * c..][..c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, p: &[f64], x: &Image) -> Image {
        debug_assert_eq!(x.channels(), self.cin);
        let (ho, wo) = self.out_size(x.height(), x.width());
        let kd = self.kdim();
        let bias = &p[self.b..self.b + self.cout];
        let mut out = Vec::with_capacity(ho * wo * self.cout);
        for _ in 0..ho * wo {
            out.extend_from_slice(bias);
        }
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            x.data()
        } else {
            owned = self.im2col(x);
            &owned
        };
        let wmat = &p[self.w..self.w + kd * self.cout];
        gemm(ho * wo, kd, self.cout, cols, (kd as isize, 1), wmat, (self.cout as isize, 1), 1.0, &mut out);
        Image::new(ho, wo, self.cout, out).expect("conv output shape")
    }

    pub fn backward(&self, p: &[f64], x: &Image, gy: &Image, grads: &mut [f64]) -> Image {
        let (ho, wo) = (gy.height(), gy.width());
        let m = ho * wo;
        let kd = self.kdim();
        let n = self.cout;
        let owned;
        let cols: &[f64] = if self.is_pointwise() {
            x.data()
        } else {
            owned = self.im2col(x);
            &owned
        };
        let g = gy.data();
        {
            let gw = &mut grads[self.w..self.w + kd * n];
            gemm(kd, m, n, cols, (1, kd as isize), g, (n as isize, 1), 1.0, gw);
        }
        {
            let gb = &mut grads[self.b..self.b + n];
            for row in g.chunks_exact(n) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        let wmat = &p[self.w..self.w + kd * n];
        let mut gcols = vec![0.0; m * kd];
        gemm(m, n, kd, g, (n as isize, 1), wmat, (1, n as isize), 0.0, &mut gcols);
        if self.is_pointwise() {
            Image::new(x.height(), x.width(), self.cin, gcols).expect("conv grad shape")
        } else {
            self.col2im(&gcols, x.height(), x.width())
        }
    }
}

/// 3×3 depthwise convolution with zero padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3 {
    pub c: usize,
    w: usize,
    b: usize,
}

impl DepthwiseConv3 {
    pub fn new(lb: &mut LayoutBuilder, name: &str, c: usize) -> Self {
        let w = lb.alloc(&format!("{name}.weight"), &[3, 3, c], Init::Uniform(1.0 / 3.0));
        let b = lb.alloc(&format!("{name}.bias"), &[c], Init::Zeros);
        Self { c, w, b }
    }

    pub fn forward(&self, p: &[f64], x: &Image) -> Image {
        let (h, w, c) = (x.height(), x.width(), self.c);
        debug_assert_eq!(x.channels(), c);
        let wt = &p[self.w..self.w + 9 * c];
        let bias = &p[self.b..self.b + c];
        let mut out = Image::zeros(h, w, c);
        let xd = x.data();
        let od = out.data_mut();
        for y in 0..h {
            for xx in 0..w {
                let o = &mut od[(y * w + xx) * c..][..c];
                o.copy_from_slice(bias);
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &xd[(iy as usize * w + ix as usize) * c..][..c];
                        let k = &wt[(ky * 3 + kx) * c..][..c];
                        for ch in 0..c {
                            o[ch] += k[ch] * src[ch];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, p: &[f64], x: &Image, gy: &Image, grads: &mut [f64]) -> Image {
        let (h, w, c) = x.shape();
        let wt = &p[self.w..self.w + 9 * c];
        let mut gx = Image::zeros(h, w, c);
        let xd = x.data();
        let gd = gy.data();
        let mut gw = vec![0.0; 9 * c];
        let mut gb = vec![0.0; c];
        let gxd = gx.data_mut();
        for y in 0..h {
            for xx in 0..w {
                let g = &gd[(y * w + xx) * c..][..c];
                for ch in 0..c {
                    gb[ch] += g[ch];
                }
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (iy as usize * w + ix as usize) * c;
                        let kofs = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            gw[kofs + ch] += g[ch] * xd[base + ch];
                            gxd[base + ch] += g[ch] * wt[kofs + ch];
                        }
                    }
                }
            }
        }
        add_into(&mut grads[self.w..self.w + 9 * c], &gw);
        add_into(&mut grads[self.b..self.b + c], &gb);
        gx
    }
}

/// Per-pixel normalization across channels with a learned affine map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub c: usize,
    g: usize,
    b: usize,
}

const NORM_EPS: f64 = 1e-6;

pub struct NormCache {
    xhat: Image,
    inv_std: Vec<f64>,
}

impl ChannelNorm {
    pub fn new(lb: &mut LayoutBuilder, name: &str, c: usize) -> Self {
        let g = lb.alloc(&format!("{name}.gain"), &[c], Init::Ones);
        let b = lb.alloc(&format!("{name}.bias"), &[c], Init::Zeros);
        Self { c, g, b }
    }

    pub fn forward(&self, p: &[f64], x: &Image) -> (Image, NormCache) {
        let c = self.c;
        let gain = &p[self.g..self.g + c];
        let bias = &p[self.b..self.b + c];
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.height() * x.width());
        for (xh, o) in xhat.data_mut().chunks_exact_mut(c).zip(out.data_mut().chunks_exact_mut(c)) {
            let mean = xh.iter().sum::<f64>() / c as f64;
            let var = xh.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            for ch in 0..c {
                xh[ch] = (xh[ch] - mean) * is;
                o[ch] = gain[ch] * xh[ch] + bias[ch];
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], cache: &NormCache, gy: &Image, grads: &mut [f64]) -> Image {
        let c = self.c;
        let gain = &p[self.g..self.g + c];
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        let mut gx = gy.clone();
        let mut dxh = vec![0.0; c];
        for ((g, xh), is) in gx
            .data_mut()
            .chunks_exact_mut(c)
            .zip(cache.xhat.data().chunks_exact(c))
            .zip(&cache.inv_std)
        {
            for ch in 0..c {
                gg[ch] += g[ch] * xh[ch];
                gb[ch] += g[ch];
                dxh[ch] = g[ch] * gain[ch];
            }
            let m1 = dxh.iter().sum::<f64>() / c as f64;
            let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
            for ch in 0..c {
                g[ch] = is * (dxh[ch] - m1 - xh[ch] * m2);
            }
        }
        add_into(&mut grads[self.g..self.g + c], &gg);
        add_into(&mut grads[self.b..self.b + c], &gb);
        gx
    }
}

/// Per-channel multiplier.
#[derive(Clone, Debug)]
pub struct ChannelScale {
    pub c: usize,
    s: usize,
}

impl ChannelScale {
    pub fn new(lb: &mut LayoutBuilder, name: &str, c: usize, init: f64) -> Self {
        let s = lb.alloc(name, &[c], Init::Constant(init));
        Self { c, s }
    }

    pub fn forward(&self, p: &[f64], x: &Image) -> Image {
        let s = &p[self.s..self.s + self.c];
        let mut out = x.clone();
        for px in out.data_mut().chunks_exact_mut(self.c) {
            for (v, k) in px.iter_mut().zip(s) {
                *v *= k;
            }
        }
        out
    }

    pub fn backward(&self, p: &[f64], x: &Image, gy: &Image, grads: &mut [f64]) -> Image {
        let c = self.c;
        let s = &p[self.s..self.s + c];
        let gs = &mut grads[self.s..self.s + c];
        let mut gx = gy.clone();
        for (g, xv) in gx.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
            for ch in 0..c {
                gs[ch] += g[ch] * xv[ch];
                g[ch] *= s[ch];
            }
        }
        gx
    }
}

/// Splits channels in halves and multiplies them.
pub fn gate(x: &Image) -> Image {
    let c = x.channels() / 2;
    let data = x.data().chunks_exact(2 * c).flat_map(|px| (0..c).map(move |i| px[i] * px[i + c])).collect();
    Image::new(x.height(), x.width(), c, data).expect("gate shape")
}

pub fn gate_backward(x: &Image, gy: &Image) -> Image {
    let c = gy.channels();
    let mut gx = Image::zeros(x.height(), x.width(), 2 * c);
    for ((gxp, xp), gp) in gx
        .data_mut()
        .chunks_exact_mut(2 * c)
        .zip(x.data().chunks_exact(2 * c))
        .zip(gy.data().chunks_exact(c))
    {
        for i in 0..c {
            gxp[i] = gp[i] * xp[i + c];
            gxp[i + c] = gp[i] * xp[i];
        }
    }
    gx
}

/// `h × w × 4c → 2h × 2w × c`.
pub fn pixel_shuffle(x: &Image) -> Image {
    let (h, w, c4) = x.shape();
    let c = c4 / 4;
    let mut out = Image::zeros(2 * h, 2 * w, c);
    for y in 0..h {
        for xx in 0..w {
            let src = x.pixel(y, xx);
            for dy in 0..2 {
                for dx in 0..2 {
                    for ch in 0..c {
                        out.set(2 * y + dy, 2 * xx + dx, ch, src[ch * 4 + dy * 2 + dx]);
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_unshuffle(g: &Image) -> Image {
    let (h2, w2, c) = g.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Image::zeros(h, w, 4 * c);
    for y in 0..h {
        for xx in 0..w {
            for dy in 0..2 {
                for dx in 0..2 {
                    for ch in 0..c {
                        out.set(y, xx, ch * 4 + dy * 2 + dx, g.get(2 * y + dy, 2 * xx + dx, ch));
                    }
                }
            }
        }
    }
    out
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Mean over non-overlapping `factor × factor` windows.
pub fn avg_pool(x: &Image, factor: usize) -> Image {
    let (h, w, c) = x.shape();
    let (ho, wo) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    Image::from_fn(ho, wo, c, |y, xx, ch| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += x.get(y * factor + dy, xx * factor + dx, ch);
            }
        }
        s * norm
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deblur_net::params::LayoutBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn rand_params(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn dot(a: &Image, b: &Image) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct six-loop convolution.
    fn conv_oracle(conv: &Conv2d, p: &[f64], x: &Image) -> Image {
        let (ho, wo) = conv.out_size(x.height(), x.width());
        Image::from_fn(ho, wo, conv.cout, |oy, ox, co| {
            let mut s = p[conv.b + co];
            for ky in 0..conv.k {
                for kx in 0..conv.k {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                    if iy < 0 || ix < 0 || iy >= x.height() as isize || ix >= x.width() as isize {
                        continue;
                    }
                    for ci in 0..conv.cin {
                        let widx = ((ky * conv.k + kx) * conv.cin + ci) * conv.cout + co;
                        s += p[conv.w + widx] * x.get(iy as usize, ix as usize, ci);
                    }
                }
            }
            s
        })
    }

    /// Checks a layer's input and parameter gradients against central
    /// differences of `<forward(x), probe>`.
    fn check_grads(
        n_params: usize,
        x: &Image,
        fwd: &dyn Fn(&[f64], &Image) -> Image,
        bwd: &dyn Fn(&[f64], &Image, &Image, &mut [f64]) -> Image,
    ) {
        let p = rand_params(n_params, 7);
        let y = fwd(&p, x);
        let probe = rand_image(y.height(), y.width(), y.channels(), 8);
        let mut grads = vec![0.0; n_params];
        let gx = bwd(&p, x, &probe, &mut grads);
        let h = 1e-6;
        for idx in (0..x.data().len()).step_by(7) {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[idx] += h;
            b.data_mut()[idx] -= h;
            let fd = (dot(&fwd(&p, &a), &probe) - dot(&fwd(&p, &b), &probe)) / (2.0 * h);
            assert!((fd - gx.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "input {idx}: {fd} vs {}", gx.data()[idx]);
        }
        for idx in (0..n_params).step_by(5) {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[idx] += h;
            b[idx] -= h;
            let fd = (dot(&fwd(&a, x), &probe) - dot(&fwd(&b, x), &probe)) / (2.0 * h);
            assert!((fd - grads[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", grads[idx]);
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, stride, cin, cout) in [(3, 1, 3, 5), (1, 1, 4, 2), (2, 2, 3, 6)] {
            let mut lb = LayoutBuilder::default();
            let conv = Conv2d::new(&mut lb, "c", cin, cout, k, stride, Init::Default);
            let p = rand_params(lb.len(), 1);
            let x = rand_image(6, 8, cin, 2);
            assert!(conv.forward(&p, &x).max_abs_diff(&conv_oracle(&conv, &p, &x)) < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, stride) in [(3, 1), (1, 1), (2, 2)] {
            let mut lb = LayoutBuilder::default();
            let conv = Conv2d::new(&mut lb, "c", 3, 4, k, stride, Init::Default);
            let x = rand_image(6, 6, 3, 3);
            check_grads(lb.len(), &x, &|p, x| conv.forward(p, x), &|p, x, g, gr| conv.backward(p, x, g, gr));
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut lb = LayoutBuilder::default();
        let dw = DepthwiseConv3::new(&mut lb, "dw", 3);
        let x = rand_image(5, 4, 3, 4);
        check_grads(lb.len(), &x, &|p, x| dw.forward(p, x), &|p, x, g, gr| dw.backward(p, x, g, gr));
    }

    #[test]
    fn norm_gradients_and_statistics() {
        let mut lb = LayoutBuilder::default();
        let ln = ChannelNorm::new(&mut lb, "ln", 5);
        let x = rand_image(3, 4, 5, 5);
        let p = lb.build(0);
        let (y, _) = ln.forward(&p, &x);
        for px in y.data().chunks_exact(5) {
            assert!(px.iter().sum::<f64>().abs() < 1e-12);
        }
        check_grads(
            lb.len(),
            &x,
            &|p, x| ln.forward(p, x).0,
            &|p, x, g, gr| {
                let (_, cache) = ln.forward(p, x);
                ln.backward(p, &cache, g, gr)
            },
        );
    }

    #[test]
    fn scale_and_gate_gradients() {
        let mut lb = LayoutBuilder::default();
        let s = ChannelScale::new(&mut lb, "s", 4, 0.3);
        let x = rand_image(3, 3, 4, 6);
        check_grads(lb.len(), &x, &|p, x| s.forward(p, x), &|p, x, g, gr| s.backward(p, x, g, gr));
        check_grads(0, &x, &|_, x| gate(x), &|_, x, g, _| gate_backward(x, g));
    }

    #[test]
    fn pixel_shuffle_roundtrip() {
        let x = rand_image(3, 2, 8, 9);
        let y = pixel_shuffle(&x);
        assert_eq!(y.shape(), (6, 4, 2));
        assert_eq!(pixel_unshuffle(&y), x);
    }

    #[test]
    fn silu_derivative() {
        for v in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(v + 1e-6) - silu(v - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(v)).abs() < 1e-8);
        }
    }

    #[test]
    fn avg_pool_means_blocks() {
        let x = Image::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64);
        let p = avg_pool(&x, 2);
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
