//! Layered DP rendering.
//!
//! Depth is quantized into disparity bins, each rendered at the mean
//! disparity of its pixels. Each bin is a premultiplied RGBA
//! layer that is blurred with its left/right half-disk PSFs (circular
//! boundary, so every layer keeps its mean) and composited back to front.
//! Both views share the full-aperture transmittance `1 − ½(αL + αR)`, which
//! keeps the composite linear in the kernels: the mean of the two views is
//! exactly the full-disk render.

use super::psf::{dp_psf_pair, Kernel};
use super::{disparity_from_depth, BlurMask, DPPair, DisparityMap, SceneSample};
use crate::error::{LdpError, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub n_layers: usize,
    /// PSF radius in pixels per pixel of disparity.
    pub radius_scale: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_layers: 33,
            radius_scale: 1.0,
        }
    }
}

/// `out(y,x) = Σ K(dy,dx) · img((y−dy) mod h, (x−dx) mod w)` over all channels.
pub fn convolve_circular(img: &Image, kernel: &Kernel) -> Image {
    if kernel.is_identity() {
        return img.map(|v| v * kernel.weights[0]);
    }
    let (h, w, c) = img.shape();
    let r = kernel.radius as isize;
    let taps: Vec<(isize, isize, f64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| (dy, dx, kernel.at(dy, dx)))
        .filter(|&(_, _, k)| k != 0.0)
        .collect();
    let src = img.data();
    let mut out = Image::zeros(h, w, c);
    let dst = out.data_mut();
    let (hi, wi) = (h as isize, w as isize);
    for &(dy, dx, k) in &taps {
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(hi) as usize;
            let row_out = &mut dst[y * w * c..(y + 1) * w * c];
            let row_in = &src[sy * w * c..(sy + 1) * w * c];
            // Column shift split into the two contiguous runs of the wrap.
            let shift = dx.rem_euclid(wi) as usize;
            // out x takes source column (x - shift) mod w.
            let split = shift.min(w);
            if split > 0 {
                let a = &mut row_out[..split * c];
                let b = &row_in[(w - split) * c..];
                for (o, &i) in a.iter_mut().zip(b) {
                    *o += k * i;
                }
            }
            let a = &mut row_out[split * c..];
            let b = &row_in[..(w - split) * c];
            for (o, &i) in a.iter_mut().zip(b) {
                *o += k * i;
            }
        }
    }
    out
}

fn layer_index(d: f64, max: f64, n: usize) -> usize {
    let width = 2.0 * max / n as f64;
    (((d + max) / width).floor().max(0.0) as usize).min(n - 1)
}


pub fn render_dp_pair(scene: &SceneSample, n_layers: usize) -> Result<(DPPair, DisparityMap, BlurMask)> {
    render_dp_pair_with(
        scene,
        &RenderOptions {
            n_layers,
            ..RenderOptions::default()
        },
    )
}

pub fn render_dp_pair_with(
    scene: &SceneSample,
    opts: &RenderOptions,
) -> Result<(DPPair, DisparityMap, BlurMask)> {
    if opts.n_layers < 1 {
        return Err(LdpError::config("n_layers", "must be at least 1"));
    }
    if !(opts.radius_scale > 0.0) {
        return Err(LdpError::config("radius_scale", "must be positive"));
    }
    let disparity = disparity_from_depth(&scene.depth, &scene.lens)?;
    let (h, w, _) = scene.sharp_image.shape();
    let n = opts.n_layers;
    let max = scene.lens.max_disparity;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &d) in disparity.d.data().iter().enumerate() {
        members[layer_index(d, max, n)].push(i);
    }

    let mut acc_left = Image::zeros(h, w, 3);
    let mut acc_right = Image::zeros(h, w, 3);
    // Far (large d) to near (small d).
    for k in (0..n).rev() {
        if members[k].is_empty() {
            continue;
        }
        let mut layer = Image::zeros(h, w, 4);
        for &i in &members[k] {
            let (y, x) = (i / w, i % w);
            let p = scene.sharp_image.pixel(y, x);
            layer.set(y, x, 0, p[0]);
            layer.set(y, x, 1, p[1]);
            layer.set(y, x, 2, p[2]);
            layer.set(y, x, 3, 1.0);
        }
        let layer_d = members[k].iter().map(|&i| disparity.d.data()[i]).sum::<f64>()
            / members[k].len() as f64;
        let (kl, kr) = dp_psf_pair(layer_d, opts.radius_scale);
        let bl = convolve_circular(&layer, &kl);
        let br = convolve_circular(&layer, &kr);
        composite_over(&mut acc_left, &mut acc_right, &bl, &br);
    }

    // The shared transmittance can push a view slightly above 1 where the
    // two alphas differ at occlusion edges.
    let pair = DPPair {
        left: acc_left.clamp01(),
        right: acc_right.clamp01(),
    };
    let mask = BlurMask::from_disparity(&disparity);
    Ok((pair, disparity, mask))
}

fn composite_over(acc_l: &mut Image, acc_r: &mut Image, layer_l: &Image, layer_r: &Image) {
    let (h, w, _) = acc_l.shape();
    for y in 0..h {
        for x in 0..w {
            let pl = layer_l.pixel(y, x);
            let pr = layer_r.pixel(y, x);
            let transmit = 1.0 - 0.5 * (pl[3] + pr[3]);
            for c in 0..3 {
                let vl = pl[c] + transmit * acc_l.get(y, x, c);
                let vr = pr[c] + transmit * acc_r.get(y, x, c);
                acc_l.set(y, x, c, vl);
                acc_r.set(y, x, c, vr);
            }
        }
    }
}
