//! Single-head spatial self-attention, optionally with an additive logit
//! bias predicted from the blur map (blur prior attention).

use super::layers::{add_into, gemm, silu, silu_grad, ChannelNorm, Conv2d, NormCache};
use super::params::{Init, LayoutBuilder};
use crate::error::{LdpError, Result};
use crate::image::Image;

/// Projection weights, each `c × d` row-major, and the logit divisor.
#[derive(Clone, Copy, Debug)]
pub struct QkvWeights<'a> {
    pub c: usize,
    pub d: usize,
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub beta: f64,
}

impl QkvWeights<'_> {
    fn check(&self, x: &Image) -> Result<()> {
        if x.channels() != self.c {
            return Err(LdpError::shape(format!(
                "attention expects {} channels, got {}",
                self.c,
                x.channels()
            )));
        }
        let n = self.c * self.d;
        if self.wq.len() != n || self.wk.len() != n || self.wv.len() != n {
            return Err(LdpError::shape("attention projection sizes do not match c × d"));
        }
        if !(self.beta > 0.0) {
            return Err(LdpError::domain("attention beta must be positive"));
        }
        if !x.is_finite() {
            return Err(LdpError::Numeric("non-finite attention input".into()));
        }
        Ok(())
    }
}

/// Sparse additive logits: for each query cell a `q × q` kernel over the
/// keys centered on it. Every other key receives 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBias {
    pub height: usize,
    pub width: usize,
    pub q: usize,
    /// `(cell, ky, kx)` row-major.
    pub kernels: Vec<f64>,
}

impl AttentionBias {
    pub fn zeros(height: usize, width: usize, q: usize) -> Self {
        Self {
            height,
            width,
            q,
            kernels: vec![0.0; height * width * q * q],
        }
    }

    /// From an `h × w × q²` map.
    pub fn from_map(map: &Image, q: usize) -> Result<Self> {
        if map.channels() != q * q {
            return Err(LdpError::shape(format!(
                "bias map needs q² = {} channels, got {}",
                q * q,
                map.channels()
            )));
        }
        Ok(Self {
            height: map.height(),
            width: map.width(),
            q,
            kernels: map.data().to_vec(),
        })
    }

    pub fn kernel(&self, cell: usize) -> &[f64] {
        &self.kernels[cell * self.q * self.q..][..self.q * self.q]
    }

    /// Keys inside the window of `query`, with their kernel index.
    pub fn window(&self, query: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = (self.q / 2) as isize;
        let (yi, xi) = ((query / self.width) as isize, (query % self.width) as isize);
        (0..self.q * self.q).filter_map(move |k| {
            let y = yi + (k / self.q) as isize - r;
            let x = xi + (k % self.q) as isize - r;
            (y >= 0 && x >= 0 && y < self.height as isize && x < self.width as isize)
                .then(|| (y as usize * self.width + x as usize, k))
        })
    }

    /// The `(hw) × (hw)` matrix O.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut dense = vec![0.0; n * n];
        for i in 0..n {
            let kern = self.kernel(i);
            for (j, k) in self.window(i) {
                dense[i * n + j] = kern[k];
            }
        }
        dense
    }
}

pub struct AttendCache {
    x: Image,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
}

fn attend(x: &Image, w: &QkvWeights, bias: Option<&AttentionBias>) -> Result<(Image, AttendCache)> {
    w.check(x)?;
    let (h, wd) = (x.height(), x.width());
    let n = h * wd;
    let (c, d) = (w.c, w.d);
    if let Some(b) = bias {
        if (b.height, b.width) != (h, wd) {
            return Err(LdpError::domain(format!(
                "bias grid {}×{} does not match features {h}×{wd}",
                b.height, b.width
            )));
        }
    }
    let xs = x.data();
    let project = |wm: &[f64]| {
        let mut out = vec![0.0; n * d];
        gemm(n, c, d, xs, (c as isize, 1), wm, (d as isize, 1), 0.0, &mut out);
        out
    };
    let (q, k, v) = (project(w.wq), project(w.wk), project(w.wv));
    let mut a = vec![0.0; n * n];
    gemm(n, d, n, &q, (d as isize, 1), &k, (1, d as isize), 0.0, &mut a);
    let inv_beta = 1.0 / w.beta;
    a.iter_mut().for_each(|v| *v *= inv_beta);
    if let Some(b) = bias {
        for i in 0..n {
            let kern = b.kernel(i);
            for (j, kk) in b.window(i) {
                a[i * n + j] += kern[kk];
            }
        }
    }
    for row in a.chunks_exact_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    let mut y = vec![0.0; n * d];
    gemm(n, n, d, &a, (n as isize, 1), &v, (d as isize, 1), 0.0, &mut y);
    let out = Image::new(h, wd, d, y)?;
    if !out.is_finite() {
        return Err(LdpError::Numeric("attention produced non-finite values".into()));
    }
    Ok((
        out,
        AttendCache {
            x: x.clone(),
            q,
            k,
            v,
            a,
        },
    ))
}

/// Gradients of [`attend`]: input gradient, projection gradients
/// `(gq, gk, gv)` and, when a bias was used, the kernel gradients.
struct AttendGrads {
    gx: Image,
    gwq: Vec<f64>,
    gwk: Vec<f64>,
    gwv: Vec<f64>,
    gbias: Option<Vec<f64>>,
}

fn attend_backward(cache: &AttendCache, w: &QkvWeights, bias: Option<&AttentionBias>, gy: &Image) -> AttendGrads {
    let (h, wd) = (cache.x.height(), cache.x.width());
    let n = h * wd;
    let (c, d) = (w.c, w.d);
    let gyd = gy.data();
    let a = &cache.a;

    let mut ga = vec![0.0; n * n];
    gemm(n, d, n, gyd, (d as isize, 1), &cache.v, (1, d as isize), 0.0, &mut ga);
    let mut gv = vec![0.0; n * d];
    gemm(n, n, d, a, (1, n as isize), gyd, (d as isize, 1), 0.0, &mut gv);

    // Softmax backward, in place: gl = a ⊙ (ga − <ga, a>).
    for (grow, arow) in ga.chunks_exact_mut(n).zip(a.chunks_exact(n)) {
        let dotp: f64 = grow.iter().zip(arow).map(|(g, p)| g * p).sum();
        for (g, p) in grow.iter_mut().zip(arow) {
            *g = p * (*g - dotp);
        }
    }
    let gl = ga;

    let gbias = bias.map(|b| {
        let qq = b.q * b.q;
        let mut gk = vec![0.0; n * qq];
        for i in 0..n {
            for (j, kk) in b.window(i) {
                gk[i * qq + kk] = gl[i * n + j];
            }
        }
        gk
    });

    let inv_beta = 1.0 / w.beta;
    let mut gq = vec![0.0; n * d];
    gemm(n, n, d, &gl, (n as isize, 1), &cache.k, (d as isize, 1), 0.0, &mut gq);
    let mut gk = vec![0.0; n * d];
    gemm(n, n, d, &gl, (1, n as isize), &cache.q, (d as isize, 1), 0.0, &mut gk);
    gq.iter_mut().chain(gk.iter_mut()).for_each(|v| *v *= inv_beta);

    let xs = cache.x.data();
    let wgrad = |g: &[f64]| {
        let mut out = vec![0.0; c * d];
        gemm(c, n, d, xs, (1, c as isize), g, (d as isize, 1), 0.0, &mut out);
        out
    };
    let (gwq, gwk, gwv) = (wgrad(&gq), wgrad(&gk), wgrad(&gv));

    let mut gx = vec![0.0; n * c];
    for (g, wm) in [(&gq, w.wq), (&gk, w.wk), (&gv, w.wv)] {
        gemm(n, d, c, g, (d as isize, 1), wm, (1, d as isize), 1.0, &mut gx);
    }
    AttendGrads {
        gx: Image::new(h, wd, c, gx).expect("attention grad shape"),
        gwq,
        gwk,
        gwv,
        gbias,
    }
}

/// `Softmax(QKᵀ/β) V` over all spatial cells of `x`.
pub fn self_attention(x: &Image, w: &QkvWeights) -> Result<Image> {
    attend(x, w, None).map(|r| r.0)
}

/// `Softmax(QKᵀ/β + O) V` with O given by `bias`.
pub fn bpa_attention(x: &Image, bias: &AttentionBias, w: &QkvWeights) -> Result<Image> {
    attend(x, w, Some(bias)).map(|r| r.0)
}

/// Two 3×3 convolutions with a SiLU between them, mapping the raw blur
/// map at attention resolution to `q²` logit offsets per cell.
#[derive(Clone, Debug)]
pub struct BiasFfn {
    pub q: usize,
    conv1: Conv2d,
    conv2: Conv2d,
}

pub struct FfnCache {
    input: Image,
    pre: Image,
    act: Image,
}

impl BiasFfn {
    pub fn new(lb: &mut LayoutBuilder, name: &str, q: usize, hidden: usize) -> Self {
        Self {
            q,
            conv1: Conv2d::new(lb, &format!("{name}.conv1"), 1, hidden, 3, 1, Init::Default),
            conv2: Conv2d::new(lb, &format!("{name}.conv2"), hidden, q * q, 3, 1, Init::Zeros),
        }
    }

    pub fn forward(&self, p: &[f64], m_raw: &Image) -> Result<(AttentionBias, FfnCache)> {
        if m_raw.channels() != 1 {
            return Err(LdpError::shape("blur map input to the bias network must have one channel"));
        }
        let pre = self.conv1.forward(p, m_raw);
        let act = pre.map(silu);
        let out = self.conv2.forward(p, &act);
        let bias = AttentionBias::from_map(&out, self.q)?;
        Ok((
            bias,
            FfnCache {
                input: m_raw.clone(),
                pre,
                act,
            },
        ))
    }

    /// Parameter gradients only; the blur map is a fixed input.
    pub fn backward(&self, p: &[f64], cache: &FfnCache, gkernels: &[f64], grads: &mut [f64]) {
        let (h, w) = (cache.act.height(), cache.act.width());
        let gout = Image::new(h, w, self.q * self.q, gkernels.to_vec()).expect("bias grad shape");
        let gact = self.conv2.backward(p, &cache.act, &gout, grads);
        let gpre = gact.zip_map(&cache.pre, |g, v| g * silu_grad(v)).expect("same shape");
        self.conv1.backward(p, &cache.input, &gpre, grads);
    }
}

/// Convenience: `bpa_bias(M)` for a stand-alone network.
pub fn bpa_bias(m_raw: &Image, ffn: &BiasFfn, p: &[f64]) -> Result<AttentionBias> {
    ffn.forward(p, m_raw).map(|r| r.0)
}

/// Residual block `x + W_o · attention(norm(x))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub c: usize,
    pub beta: f64,
    norm: ChannelNorm,
    wq: usize,
    wk: usize,
    wv: usize,
    out: Conv2d,
}

pub struct AttentionBlockCache {
    norm: NormCache,
    attend: AttendCache,
    attended: Image,
}

impl AttentionBlock {
    pub fn new(lb: &mut LayoutBuilder, name: &str, c: usize, beta: f64) -> Self {
        let init = Init::Default.with_fan_in(c);
        Self {
            c,
            beta,
            norm: ChannelNorm::new(lb, &format!("{name}.norm"), c),
            wq: lb.alloc(&format!("{name}.wq"), &[c, c], init),
            wk: lb.alloc(&format!("{name}.wk"), &[c, c], init),
            wv: lb.alloc(&format!("{name}.wv"), &[c, c], init),
            out: Conv2d::new(lb, &format!("{name}.out"), c, c, 1, 1, Init::Default),
        }
    }

    pub fn weights<'a>(&self, p: &'a [f64]) -> QkvWeights<'a> {
        let n = self.c * self.c;
        QkvWeights {
            c: self.c,
            d: self.c,
            wq: &p[self.wq..self.wq + n],
            wk: &p[self.wk..self.wk + n],
            wv: &p[self.wv..self.wv + n],
            beta: self.beta,
        }
    }

    pub fn forward(&self, p: &[f64], x: &Image, bias: Option<&AttentionBias>) -> Result<(Image, AttentionBlockCache)> {
        let (normed, norm) = self.norm.forward(p, x);
        let (attended, attend_cache) = attend(&normed, &self.weights(p), bias)?;
        let projected = self.out.forward(p, &attended);
        let y = x.zip_map(&projected, |a, b| a + b)?;
        Ok((
            y,
            AttentionBlockCache {
                norm,
                attend: attend_cache,
                attended,
            },
        ))
    }

    /// Returns the input gradient and, if biased, the kernel gradients.
    pub fn backward(
        &self,
        p: &[f64],
        cache: &AttentionBlockCache,
        bias: Option<&AttentionBias>,
        gy: &Image,
        grads: &mut [f64],
    ) -> (Image, Option<Vec<f64>>) {
        let gatt = self.out.backward(p, &cache.attended, gy, grads);
        let g = attend_backward(&cache.attend, &self.weights(p), bias, &gatt);
        let n = self.c * self.c;
        add_into(&mut grads[self.wq..self.wq + n], &g.gwq);
        add_into(&mut grads[self.wk..self.wk + n], &g.gwk);
        add_into(&mut grads[self.wv..self.wv + n], &g.gwv);
        let mut gx = self.norm.backward(p, &cache.norm, &g.gx, grads);
        add_into(gx.data_mut(), gy.data());
        (gx, g.gbias)
    }
}
