//! Training losses. Each one returns its value together with the gradient
//! with respect to the restored image, ready for the network's backward.

use serde::{Deserialize, Serialize};

use crate::blurmap::{blur_aware_mean_and_grad, SigmaParams};
use crate::dp_formation::{center_view, DPPair};
use crate::error::{LdpError, Result};
use crate::image::Image;
use crate::vl_encoder::VisionLanguageEncoder;

/// Upper bound on the per-pixel ratio of the blur-weighting loss.
pub const RATIO_CLAMP: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub epsilon_charb: f64,
    /// Weight of the blur-aware term.
    pub lambda1: f64,
    /// Weight of the blur-weighting term.
    pub lambda2: f64,
    pub epsilon_denom: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon_charb: 1e-4,
            lambda1: 0.1,
            lambda2: 0.2,
            epsilon_denom: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.epsilon_charb", self.epsilon_charb),
            ("loss.epsilon_denom", self.epsilon_denom),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LdpError::config(name, "must be positive"));
            }
        }
        for (name, v) in [("loss.lambda1", self.lambda1), ("loss.lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LdpError::config(name, "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub char: f64,
    pub bwl: f64,
    pub bal: f64,
    pub total: f64,
}

pub fn total_loss(char: f64, bal: f64, bwl: f64, config: &LossConfig) -> LossReport {
    LossReport {
        char,
        bwl,
        bal,
        total: char + config.lambda1 * bal + config.lambda2 * bwl,
    }
}

fn check_pair(target: &Image, pred: &Image) -> Result<()> {
    target.ensure_same_shape(pred, "loss inputs")
}

/// Per-pixel `sqrt(|I − Î|² + ε²)` (norm over channels) and its mean.
pub fn charbonnier(target: &Image, pred: &Image, eps: f64) -> Result<(Image, f64)> {
    check_pair(target, pred)?;
    let c = target.channels();
    let vals: Vec<f64> = target
        .data()
        .chunks_exact(c)
        .zip(pred.data().chunks_exact(c))
        .map(|(a, b)| {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (sq + eps * eps).sqrt()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    Ok((Image::new(target.height(), target.width(), 1, vals)?, mean))
}

/// Mean Charbonnier penalty and its gradient with respect to `pred`.
pub fn charbonnier_grad(target: &Image, pred: &Image, eps: f64) -> Result<(f64, Image)> {
    let (map, mean) = charbonnier(target, pred, eps)?;
    let c = target.channels();
    let n = map.data().len() as f64;
    let mut grad = Image::zeros(pred.height(), pred.width(), c);
    for (((g, a), b), r) in grad
        .data_mut()
        .chunks_exact_mut(c)
        .zip(target.data().chunks_exact(c))
        .zip(pred.data().chunks_exact(c))
        .zip(map.data())
    {
        for ch in 0..c {
            g[ch] = (b[ch] - a[ch]) / (r * n);
        }
    }
    Ok((mean, grad))
}

/// Mean over pixels of `|I − Î|² / (|Î − center|² + eps) · weight`, with
/// the ratio clamped at [`RATIO_CLAMP`]. `weight` is the normalized blur
/// map.
pub fn blur_weighting(target: &Image, pred: &Image, pair: &DPPair, weight: &Image, eps_denom: f64) -> Result<f64> {
    blur_weighting_grad(target, pred, pair, weight, eps_denom).map(|r| r.0)
}

pub fn blur_weighting_grad(
    target: &Image,
    pred: &Image,
    pair: &DPPair,
    weight: &Image,
    eps_denom: f64,
) -> Result<(f64, Image)> {
    check_pair(target, pred)?;
    let center = center_view(pair)?;
    center.ensure_same_shape(pred, "blur-weighting center view")?;
    if (weight.height(), weight.width(), weight.channels()) != (pred.height(), pred.width(), 1) {
        return Err(LdpError::shape("blur-weighting map must be h × w × 1"));
    }
    let c = pred.channels();
    let n = weight.data().len() as f64;
    let mut total = 0.0;
    let mut grad = Image::zeros(pred.height(), pred.width(), c);
    for ((((g, t), p), m), w) in grad
        .data_mut()
        .chunks_exact_mut(c)
        .zip(target.data().chunks_exact(c))
        .zip(pred.data().chunks_exact(c))
        .zip(center.data().chunks_exact(c))
        .zip(weight.data())
    {
        let num: f64 = t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = p.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + eps_denom;
        let ratio = num / den;
        if ratio >= RATIO_CLAMP {
            total += RATIO_CLAMP * w;
            continue;
        }
        total += ratio * w;
        for ch in 0..c {
            let dnum = -2.0 * (t[ch] - p[ch]);
            let dden = 2.0 * (p[ch] - m[ch]);
            g[ch] = w * (dnum / den - num * dden / (den * den)) / n;
        }
    }
    Ok((total / n, grad))
}

/// Mean raw blur-aware logit of the restored image alone.
pub fn blur_aware(pred: &Image, prompts: &[String], encoder: &dyn VisionLanguageEncoder) -> Result<f64> {
    blur_aware_grad(pred, prompts, encoder).map(|r| r.0)
}

pub fn blur_aware_grad(
    pred: &Image,
    prompts: &[String],
    encoder: &dyn VisionLanguageEncoder,
) -> Result<(f64, Image)> {
    let sigma = SigmaParams::for_encoder(encoder.spec().kind);
    blur_aware_mean_and_grad(pred, prompts, encoder, &sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blurmap::{PromptSet, LOGIT_CLAMP};
    use crate::dp_formation::scenes::{generate_scene, SceneParams};
    use crate::dp_formation::render_dp_pair;
    use crate::vl_encoder::OracleStub;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
    }

    fn rand_pair(h: usize, w: usize, seed: u64) -> DPPair {
        DPPair::new(rand_image(h, w, 3, seed), rand_image(h, w, 3, seed + 1)).unwrap()
    }

    fn fd_check(f: &dyn Fn(&Image) -> f64, x: &Image, grad: &Image, tol: f64, stride: usize) {
        let h = 1e-6;
        for idx in (0..x.data().len()).step_by(stride) {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[idx] += h;
            b.data_mut()[idx] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let an = grad.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < tol, "{idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn defaults() {
        let c = LossConfig::default();
        assert_eq!((c.epsilon_charb, c.lambda1, c.lambda2), (1e-4, 0.1, 0.2));
        assert!(c.validate().is_ok());
        assert!(LossConfig { lambda1: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn charbonnier_examples() {
        let img = rand_image(5, 4, 3, 1);
        let (_, mean) = charbonnier(&img, &img, 1e-4).unwrap();
        assert!((mean - 1e-4).abs() < 1e-18);
        let a = Image::new(1, 1, 3, vec![0.3, 0.0, 0.4]).unwrap();
        let b = Image::zeros(1, 1, 3);
        assert!((charbonnier(&a, &b, 0.0).unwrap().1 - 0.5).abs() < 1e-15);
        assert!(charbonnier(&a, &Image::zeros(1, 2, 3), 0.0).is_err());
    }

    #[test]
    fn charbonnier_gradient() {
        let t = rand_image(6, 5, 3, 2);
        let p = rand_image(6, 5, 3, 3);
        let (_, g) = charbonnier_grad(&t, &p, 1e-4).unwrap();
        fd_check(&|x| charbonnier(&t, x, 1e-4).unwrap().1, &p, &g, 1e-4, 1);
    }

    /// Pixel-by-pixel evaluation of the weighted ratio.
    fn weighting_oracle(t: &Image, p: &Image, pair: &DPPair, w: &Image, eps: f64) -> f64 {
        let mut s = 0.0;
        for y in 0..t.height() {
            for x in 0..t.width() {
                let mut num = 0.0;
                let mut den = 0.0;
                for c in 0..3 {
                    let avg = 0.5 * (pair.left.get(y, x, c) + pair.right.get(y, x, c));
                    num += (t.get(y, x, c) - p.get(y, x, c)).powi(2);
                    den += (p.get(y, x, c) - avg).powi(2);
                }
                s += (num / (den + eps)).min(RATIO_CLAMP) * w.get(y, x, 0);
            }
        }
        s / (t.height() * t.width()) as f64
    }

    #[test]
    fn blur_weighting_examples() {
        let pair = rand_pair(6, 7, 4);
        let t = rand_image(6, 7, 3, 6);
        let w = rand_image(6, 7, 1, 7);
        assert_eq!(blur_weighting(&t, &t, &pair, &w, 1e-8).unwrap(), 0.0);
        let p = rand_image(6, 7, 3, 8);
        assert_eq!(blur_weighting(&t, &p, &pair, &Image::zeros(6, 7, 1), 1e-8).unwrap(), 0.0);
        let v = blur_weighting(&t, &p, &pair, &w, 1e-8).unwrap();
        assert!((v - weighting_oracle(&t, &p, &pair, &w, 1e-8)).abs() < 1e-10);
    }

    #[test]
    fn blur_weighting_gradient() {
        let pair = rand_pair(5, 6, 9);
        let t = rand_image(5, 6, 3, 11);
        let w = rand_image(5, 6, 1, 12);
        let p = rand_image(5, 6, 3, 13);
        let (_, g) = blur_weighting_grad(&t, &p, &pair, &w, 1e-8).unwrap();
        fd_check(&|x| blur_weighting(&t, x, &pair, &w, 1e-8).unwrap(), &p, &g, 1e-4, 1);
    }

    #[test]
    fn ratio_is_clamped_at_the_center_view() {
        let pair = rand_pair(3, 3, 14);
        let center = center_view(&pair).unwrap();
        let t = rand_image(3, 3, 3, 16);
        let w = Image::filled(3, 3, 1, 1.0);
        let (v, g) = blur_weighting_grad(&t, &center, &pair, &w, 1e-8).unwrap();
        assert_eq!(v, RATIO_CLAMP);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn weighting_scales_with_the_map() {
        let pair = rand_pair(5, 5, 17);
        let t = rand_image(5, 5, 3, 19);
        let p = rand_image(5, 5, 3, 20);
        let w = rand_image(5, 5, 1, 21);
        let base = blur_weighting(&t, &p, &pair, &w, 1e-8).unwrap();
        for gamma in [1.0, 0.5, 0.25] {
            let scaled = blur_weighting(&t, &p, &pair, &w.map(|v| v * gamma), 1e-8).unwrap();
            assert_eq!(scaled, gamma * base);
        }
        let scaled = blur_weighting(&t, &p, &pair, &w.map(|v| v * 0.3), 1e-8).unwrap();
        assert!((scaled - 0.3 * base).abs() <= 1e-14 * base);
    }

    #[test]
    fn total_is_linear() {
        let c = LossConfig::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &c).total, 1.0 + 0.1 * 2.0 + 0.2 * 3.0);
        assert!((total_loss(1.0, 2.0, 3.0, &c).total - 1.8).abs() < 1e-15);
        let zero = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..c
        };
        assert_eq!(total_loss(0.7, 5.0, 9.0, &zero).total, 0.7);
    }

    fn scene_views() -> (Image, Image) {
        let s = generate_scene(&SceneParams::default(), 3).unwrap();
        let (pair, _, _) = render_dp_pair(&s, 16).unwrap();
        (s.sharp_image.clone(), center_view(&pair).unwrap())
    }

    #[test]
    fn blur_aware_prefers_sharp_images() {
        let enc = OracleStub::new(8).unwrap();
        let prompts = PromptSet::default().blur_aware;
        let (sharp, _) = scene_views();
        let blurred = crate::dp_formation::convolve_circular(&sharp, &crate::dp_formation::disk_kernel(6.0, 1.0));
        assert!(blur_aware(&blurred, &prompts, &enc).unwrap() > blur_aware(&sharp, &prompts, &enc).unwrap());
    }

    #[test]
    fn blur_aware_on_constant_image_is_flat_feature_value() {
        let enc = OracleStub::new(8).unwrap();
        let prompts = PromptSet::default().blur_aware;
        let v = blur_aware(&Image::filled(16, 16, 3, 0.4), &prompts, &enc).unwrap();
        // Flat cells have s1 = 0, so blurriness 1 and similarity sin(π/2)/√2.
        let expect = ((std::f64::consts::FRAC_1_SQRT_2 - 0.5) / 0.1).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        assert!((v - expect).abs() < 1e-12);
        assert!(v >= -LOGIT_CLAMP);
    }

    #[test]
    fn blur_aware_gradient() {
        let enc = OracleStub::new(8).unwrap();
        let prompts = PromptSet::default().blur_aware;
        let (_, center) = scene_views();
        let img = center.crop(8, 8, 16, 16).unwrap();
        let (_, g) = blur_aware_grad(&img, &prompts, &enc).unwrap();
        fd_check(&|x| blur_aware(x, &prompts, &enc).unwrap(), &img, &g, 1e-3, 5);
    }
}
