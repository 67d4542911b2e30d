//! Image quality metrics and blur-map / disparity evaluation.

use crate::blurmap::BlurMap;
use crate::dp_formation::{DisparityMap, BLUR_DISPARITY_THRESHOLD};
use crate::error::{LdpError, Result};
use crate::image::Image;

fn check_unit_pair(target: &Image, pred: &Image) -> Result<()> {
    target.ensure_same_shape(pred, "metric inputs")?;
    for img in [target, pred] {
        if !img.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(LdpError::domain("metric inputs must lie in [0,1]"));
        }
    }
    Ok(())
}

pub fn mse(target: &Image, pred: &Image) -> Result<f64> {
    target.ensure_same_shape(pred, "metric inputs")?;
    let n = target.data().len() as f64;
    Ok(target.data().iter().zip(pred.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10·log10(1/MSE)`; identical images give `+∞`.
pub fn psnr(target: &Image, pred: &Image) -> Result<f64> {
    check_unit_pair(target, pred)?;
    let m = mse(target, pred)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn mae(target: &Image, pred: &Image) -> Result<f64> {
    check_unit_pair(target, pred)?;
    let n = target.data().len() as f64;
    Ok(target.data().iter().zip(pred.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// `Σ(I − Î)² / ΣI²` for one image.
pub fn mse_rel(target: &Image, pred: &Image) -> Result<f64> {
    check_unit_pair(target, pred)?;
    let num: f64 = target.data().iter().zip(pred.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = target.data().iter().map(|a| a * a).sum();
    if den == 0.0 {
        return Err(LdpError::domain("relative MSE of an all-black target is undefined"));
    }
    Ok(num / den)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM of the Rec. 601 luma, Gaussian window 11×11 with σ = 1.5,
/// dynamic range 1, averaged over positions where the window fits.
pub fn ssim(target: &Image, pred: &Image) -> Result<f64> {
    check_unit_pair(target, pred)?;
    let (h, w) = (target.height(), target.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LdpError::domain(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let to_gray = |img: &Image| -> Result<Vec<f64>> {
        Ok(match img.channels() {
            1 => img.data().to_vec(),
            _ => img.luma()?.into_data(),
        })
    };
    let (x, y) = (to_gray(target)?, to_gray(pred)?);
    let taps = gaussian_taps();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mx, ..) = filter_valid(&x, h, w, &taps);
    let (my, ..) = filter_valid(&y, h, w, &taps);
    let (mxx, ..) = filter_valid(&prod(&x, &x), h, w, &taps);
    let (myy, ..) = filter_valid(&prod(&y, &y), h, w, &taps);
    let (mxy, ..) = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut s = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        s += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(s / mx.len() as f64)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve by the Mann–Whitney statistic; `None` when
/// one class is empty.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

fn check_map_disparity(map: &Image, d: &DisparityMap) -> Result<()> {
    if (map.height(), map.width()) != (d.d.height(), d.d.width()) || map.channels() != 1 {
        return Err(LdpError::shape("blur map and disparity must be aligned single-channel maps"));
    }
    Ok(())
}

/// Pixel accuracy of `normalized > threshold` against `|d| > 1`.
pub fn blurmap_accuracy(map: &BlurMap, d: &DisparityMap, threshold: f64) -> Result<f64> {
    check_map_disparity(&map.normalized, d)?;
    let hits = map
        .normalized
        .data()
        .iter()
        .zip(d.d.data())
        .filter(|(&m, &dv)| (m > threshold) == (dv.abs() > BLUR_DISPARITY_THRESHOLD))
        .count();
    Ok(hits as f64 / d.d.data().len() as f64)
}

/// Threshold on a 0.01 grid maximizing mean accuracy over `maps`.
pub fn best_threshold(maps: &[(&BlurMap, &DisparityMap)]) -> Result<(f64, f64)> {
    if maps.is_empty() {
        return Err(LdpError::domain("threshold sweep needs at least one map"));
    }
    let mut best = (0.5, f64::NEG_INFINITY);
    for i in 1..100 {
        let t = i as f64 / 100.0;
        let mut acc = 0.0;
        for (m, d) in maps {
            acc += blurmap_accuracy(m, d, t)?;
        }
        acc /= maps.len() as f64;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}

/// Spearman rank correlation; `None` if either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    pearson(&rx, &ry)
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Weighted least-squares `(a, b)` for `a·x + b ≈ y`.
fn weighted_affine_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, w)| a * w).sum::<f64>() / sw;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for ((a, b), w) in x.iter().zip(y).zip(w) {
        sxy += w * (a - mx) * (b - my);
        sxx += w * (a - mx) * (a - mx);
    }
    if sxx <= 1e-300 {
        return (0.0, my);
    }
    let a = sxy / sxx;
    (a, my - a * mx)
}

pub const IRLS_ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisparityMetrics {
    pub ai1: f64,
    pub ai2: f64,
    pub one_minus_abs_rho: f64,
    /// False when the map is constant and the rank correlation undefined.
    pub rho_defined: bool,
}

/// Affine-invariant errors of `map` against `|d|`: AI(1) with an L1 fit
/// (iteratively reweighted), AI(2) the RMS residual of the least-squares
/// fit, and one minus the absolute Spearman correlation.
pub fn disparity_metrics(map: &Image, d: &DisparityMap) -> Result<DisparityMetrics> {
    check_map_disparity(map, d)?;
    let x = map.data();
    let y: Vec<f64> = d.d.data().iter().map(|v| v.abs()).collect();
    let n = x.len() as f64;

    let ones = vec![1.0; x.len()];
    let (a2, b2) = weighted_affine_fit(x, &y, &ones);
    let ai2 = (x.iter().zip(&y).map(|(m, t)| (a2 * m + b2 - t).powi(2)).sum::<f64>() / n).sqrt();

    let (mut a1, mut b1) = (a2, b2);
    for _ in 0..IRLS_ITERATIONS {
        let w: Vec<f64> = x.iter().zip(&y).map(|(m, t)| 1.0 / (a1 * m + b1 - t).abs().max(1e-6)).collect();
        (a1, b1) = weighted_affine_fit(x, &y, &w);
    }
    let ai1 = x.iter().zip(&y).map(|(m, t)| (a1 * m + b1 - t).abs()).sum::<f64>() / n;

    let rho = spearman(x, &y);
    Ok(DisparityMetrics {
        ai1,
        ai2,
        one_minus_abs_rho: 1.0 - rho.map_or(0.0, f64::abs),
        rho_defined: rho.is_some(),
    })
}
