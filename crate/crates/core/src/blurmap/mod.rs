//! Zero-shot blur maps from vision-language similarities.
//!
//! Three prompt formats are supported:
//!
//! * blur-aware: blur prompts against the center view,
//! * DP-aware: symmetry prompts against `[left | hflip(right)]`, with the
//!   features of mirrored positions averaged back to the view's width and
//!   the result inverted (symmetric means sharp),
//! * ensemble: the mean of all per-prompt maps.
//!
//! Cell similarities become logits `(sim − center)/τ`, clamped to
//! `±LOGIT_CLAMP`; the map's `raw` channel stores those logits and
//! `normalized` is their logistic. Prompts within a format and maps within an
//! ensemble are combined by averaging logits.

mod upsample;

pub use upsample::{upsample_adjoint, upsample_map};

use serde::{Deserialize, Serialize};

use crate::dp_formation::{center_view, DPPair};
use crate::error::{LdpError, Result};
use crate::image::Image;
use crate::vl_encoder::{
    normalize_in_place, prompt_table, DenseEmbedding, EncoderKind, PromptFormat, TextEmbedding,
    VisionLanguageEncoder,
};

/// Bound on stored logits, so `sigma_inv` stays exact and losses bounded.
pub const LOGIT_CLAMP: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFormat {
    BlurAware,
    DpAware,
    Ensemble,
    /// `[left | right]` queried with a left/right difference prompt.
    Difference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurMap {
    pub raw: Image,
    pub normalized: Image,
    pub source_format: MapFormat,
}

impl BlurMap {
    pub fn from_raw(raw: Image, source_format: MapFormat) -> Self {
        let normalized = raw.map(logistic);
        Self {
            raw,
            normalized,
            source_format,
        }
    }

    pub fn height(&self) -> usize {
        self.raw.height()
    }

    pub fn width(&self) -> usize {
        self.raw.width()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub blur_aware: Vec<String>,
    pub dp_aware: Vec<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let t = prompt_table();
        Self {
            blur_aware: t.of(PromptFormat::BlurAware),
            dp_aware: t.of(PromptFormat::DpAware),
        }
    }
}

impl PromptSet {
    pub fn difference_prompt() -> String {
        prompt_table().of(PromptFormat::Difference).remove(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    Fixed(f64),
    /// Center on the mean similarity of the map being normalized.
    ImageMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaParams {
    pub tau: f64,
    pub center: Centering,
}

impl SigmaParams {
    pub fn for_encoder(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::OracleStub => Self {
                tau: 0.1,
                center: Centering::Fixed(0.5),
            },
            EncoderKind::PretrainedAdapter => Self {
                tau: 0.01,
                center: Centering::ImageMean,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LdpError::config("sigma.tau", "must be positive"));
        }
        Ok(())
    }

    pub fn resolve(&self, sim: &Image) -> f64 {
        match self.center {
            Centering::Fixed(c) => c,
            Centering::ImageMean => sim.mean(),
        }
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `logistic((x − center)/τ)` elementwise, with the center resolved on `map`.
pub fn sigma(map: &Image, params: &SigmaParams) -> Result<Image> {
    params.validate()?;
    let center = params.resolve(map);
    Ok(map.map(|x| logistic((x - center) / params.tau)))
}

/// Exact inverse of [`sigma`] for a resolved `center`.
pub fn sigma_inv(normalized: &Image, tau: f64, center: f64) -> Result<Image> {
    if !(tau > 0.0) {
        return Err(LdpError::config("sigma.tau", "must be positive"));
    }
    if let Some(bad) = normalized.data().iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(LdpError::domain(format!(
            "sigma_inv needs values strictly inside (0,1), got {bad}"
        )));
    }
    Ok(normalized.map(|p| center + tau * (p / (1.0 - p)).ln()))
}

fn to_logits(sim: &Image, params: &SigmaParams) -> Image {
    let center = params.resolve(sim);
    sim.map(|x| ((x - center) / params.tau).clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
}

pub fn eta_blur_aware(pair: &DPPair) -> Result<Image> {
    center_view(pair)
}

/// `[left | hflip(right)]` along the width axis.
pub fn eta_dp_aware(pair: &DPPair) -> Result<Image> {
    pair.left.ensure_same_shape(&pair.right, "DP pair")?;
    pair.left.hconcat(&pair.right.hflip())
}

/// `[left | right]` along the width axis.
pub fn eta_difference(pair: &DPPair) -> Result<Image> {
    pair.left.ensure_same_shape(&pair.right, "DP pair")?;
    pair.left.hconcat(&pair.right)
}

fn pool_pairs(f: &DenseEmbedding, partner: impl Fn(usize, usize) -> usize) -> Result<DenseEmbedding> {
    let (hs, ws, c) = f.features.shape();
    if ws % 2 != 0 {
        return Err(LdpError::shape(format!(
            "feature grid width {ws} must be even to pool halves"
        )));
    }
    let half = ws / 2;
    let mut out = Image::zeros(hs, half, c);
    let mut v = vec![0.0; c];
    for i in 0..hs {
        for j in 0..half {
            let a = f.cell(i, j);
            let b = f.cell(i, partner(j, ws));
            for k in 0..c {
                v[k] = 0.5 * a[k] + 0.5 * b[k];
            }
            normalize_in_place(&mut v);
            for (k, &x) in v.iter().enumerate() {
                out.set(i, j, k, x);
            }
        }
    }
    Ok(DenseEmbedding {
        features: out,
        patch_size: f.patch_size,
    })
}

/// Averages each left-half cell with its mirror `w_s − 1 − j` and
/// renormalizes.
pub fn alpha_pool(f: &DenseEmbedding) -> Result<DenseEmbedding> {
    pool_pairs(f, |j, ws| ws - 1 - j)
}

/// Averages each left-half cell with the cell `w_s/2` to its right.
pub fn shift_pool(f: &DenseEmbedding) -> Result<DenseEmbedding> {
    pool_pairs(f, |j, ws| j + ws / 2)
}

/// Per-cell cosine similarity to `t`.
pub fn similarity_map(f: &DenseEmbedding, t: &TextEmbedding) -> Result<Image> {
    if f.dim() != t.t.len() {
        return Err(LdpError::domain(format!(
            "feature dimension {} does not match text dimension {}",
            f.dim(),
            t.t.len()
        )));
    }
    let tn = t.t.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(Image::from_fn(f.grid_height(), f.grid_width(), 1, |i, j, _| {
        let cell = f.cell(i, j);
        let dot: f64 = cell.iter().zip(&t.t).map(|(a, b)| a * b).sum();
        let fn_ = cell.iter().map(|x| x * x).sum::<f64>().sqrt();
        if fn_ == 0.0 || tn == 0.0 {
            0.0
        } else {
            (dot / (fn_ * tn)).clamp(-1.0, 1.0)
        }
    }))
}

/// Per-pixel mean built from sorted values, so the result does not depend on
/// the order of `maps`.
fn mean_maps(maps: &[&Image]) -> Image {
    let first = maps[0];
    let mut out = Image::zeros(first.height(), first.width(), first.channels());
    let mut vals = vec![0.0; maps.len()];
    for (idx, o) in out.data_mut().iter_mut().enumerate() {
        for (v, m) in vals.iter_mut().zip(maps) {
            *v = m.data()[idx];
        }
        vals.sort_by(f64::total_cmp);
        *o = vals.iter().sum::<f64>() / maps.len() as f64;
    }
    out
}

/// Upsamples a cell map onto the `patch`-multiple grid and crops to `h × w`.
fn to_pixels(cells: &Image, patch: usize, h: usize, w: usize) -> Result<Image> {
    let up = upsample_map(cells, cells.height() * patch, cells.width() * patch);
    up.crop(0, 0, h, w)
}

fn require_prompts(prompts: &[String], what: &str) -> Result<()> {
    if prompts.is_empty() {
        Err(LdpError::config(what, "needs at least one prompt"))
    } else {
        Ok(())
    }
}

fn prompt_logits(
    features: &DenseEmbedding,
    prompts: &[String],
    encoder: &dyn VisionLanguageEncoder,
    sigma: &SigmaParams,
) -> Result<Image> {
    let mut maps = Vec::with_capacity(prompts.len());
    for p in prompts {
        let t = encoder.encode_text(p)?;
        maps.push(to_logits(&similarity_map(features, &t)?, sigma));
    }
    Ok(mean_maps(&maps.iter().collect::<Vec<_>>()))
}

/// Blur-aware map of a single image (the center view of a pair, or a
/// restoration).
pub fn blur_aware_of_image(
    image: &Image,
    prompts: &[String],
    encoder: &dyn VisionLanguageEncoder,
    sigma: &SigmaParams,
) -> Result<BlurMap> {
    require_prompts(prompts, "prompts.blur_aware")?;
    sigma.validate()?;
    let f = encoder.encode_image_dense(image)?;
    let cells = prompt_logits(&f, prompts, encoder, sigma)?;
    let raw = to_pixels(&cells, f.patch_size, image.height(), image.width())?;
    Ok(BlurMap::from_raw(raw, MapFormat::BlurAware))
}

pub fn estimate_blur_aware(
    pair: &DPPair,
    prompts: &[String],
    encoder: &dyn VisionLanguageEncoder,
) -> Result<BlurMap> {
    let sigma = SigmaParams::for_encoder(encoder.spec().kind);
    blur_aware_of_image(&eta_blur_aware(pair)?, prompts, encoder, &sigma)
}

/// Both views edge-padded to the encoder's patch grid, so that the
/// composite's mirror axis falls on a cell boundary.
fn padded_pair(pair: &DPPair, patch: usize) -> Result<DPPair> {
    pair.left.ensure_same_shape(&pair.right, "DP pair")?;
    let h = pair.height().div_ceil(patch) * patch;
    let w = pair.width().div_ceil(patch) * patch;
    Ok(DPPair {
        left: pair.left.pad_edge_to(h, w),
        right: pair.right.pad_edge_to(h, w),
    })
}

/// Mean symmetry logits per cell of the pooled DP-aware features.
pub fn dp_symmetry_logits(
    pair: &DPPair,
    prompts: &[String],
    encoder: &dyn VisionLanguageEncoder,
    sigma: &SigmaParams,
) -> Result<Image> {
    let padded = padded_pair(pair, encoder.spec().patch_size)?;
    let f = encoder.encode_image_dense(&eta_dp_aware(&padded)?)?;
    prompt_logits(&alpha_pool(&f)?, prompts, encoder, sigma)
}

pub fn estimate_dp_aware_with(
    pair: &DPPair,
    prompts: &[String],
    encoder: &dyn VisionLanguageEncoder,
    sigma: &SigmaParams,
) -> Result<BlurMap> {
    require_prompts(prompts, "prompts.dp_aware")?;
    sigma.validate()?;
    let sym = dp_symmetry_logits(pair, prompts, encoder, sigma)?;
    let raw_cells = sym.map(|v| -v);
    let raw = to_pixels(&raw_cells, encoder.spec().patch_size, pair.height(), pair.width())?;
    Ok(BlurMap::from_raw(raw, MapFormat::DpAware))
}

pub fn estimate_dp_aware(
    pair: &DPPair,
    prompts: &[String],
    encoder: &dyn VisionLanguageEncoder,
) -> Result<BlurMap> {
    let sigma = SigmaParams::for_encoder(encoder.spec().kind);
    estimate_dp_aware_with(pair, prompts, encoder, &sigma)
}

/// The horizontal-concatenation variant: `[left | right]` against a
/// difference prompt, pooled by translation. High similarity means blurred.
pub fn estimate_difference(
    pair: &DPPair,
    prompt: &str,
    encoder: &dyn VisionLanguageEncoder,
) -> Result<BlurMap> {
    let sigma = SigmaParams::for_encoder(encoder.spec().kind);
    let padded = padded_pair(pair, encoder.spec().patch_size)?;
    let f = encoder.encode_image_dense(&eta_difference(&padded)?)?;
    let cells = prompt_logits(&shift_pool(&f)?, &[prompt.to_string()], encoder, &sigma)?;
    let raw = to_pixels(&cells, encoder.spec().patch_size, pair.height(), pair.width())?;
    Ok(BlurMap::from_raw(raw, MapFormat::Difference))
}

/// Logit-space mean of `maps`, independent of their order.
pub fn ensemble(maps: &[BlurMap]) -> Result<BlurMap> {
    let first = maps
        .first()
        .ok_or_else(|| LdpError::domain("cannot ensemble an empty list of maps"))?;
    for m in &maps[1..] {
        first.raw.ensure_same_shape(&m.raw, "ensemble members")?;
    }
    let raws: Vec<&Image> = maps.iter().map(|m| &m.raw).collect();
    Ok(BlurMap::from_raw(mean_maps(&raws), MapFormat::Ensemble))
}

/// One map per prompt (blur-aware then DP-aware), ensembled.
pub fn estimate_ensemble(
    pair: &DPPair,
    prompts: &PromptSet,
    encoder: &dyn VisionLanguageEncoder,
) -> Result<BlurMap> {
    let mut maps = Vec::new();
    for p in &prompts.blur_aware {
        maps.push(estimate_blur_aware(pair, std::slice::from_ref(p), encoder)?);
    }
    for p in &prompts.dp_aware {
        maps.push(estimate_dp_aware(pair, std::slice::from_ref(p), encoder)?);
    }
    ensemble(&maps)
}

pub fn estimate(
    pair: &DPPair,
    format: MapFormat,
    prompts: &PromptSet,
    encoder: &dyn VisionLanguageEncoder,
) -> Result<BlurMap> {
    match format {
        MapFormat::BlurAware => estimate_blur_aware(pair, &prompts.blur_aware, encoder),
        MapFormat::DpAware => estimate_dp_aware(pair, &prompts.dp_aware, encoder),
        MapFormat::Ensemble => estimate_ensemble(pair, prompts, encoder),
        MapFormat::Difference => estimate_difference(pair, &PromptSet::difference_prompt(), encoder),
    }
}

/// Mean raw blur-aware logit of `image` and its gradient with respect to
/// the image, through an encoder that provides image gradients. Clamped
/// logits contribute no gradient.
pub fn blur_aware_mean_and_grad(
    image: &Image,
    prompts: &[String],
    encoder: &dyn VisionLanguageEncoder,
    sigma: &SigmaParams,
) -> Result<(f64, Image)> {
    require_prompts(prompts, "prompts.blur_aware")?;
    sigma.validate()?;
    let (h, w) = (image.height(), image.width());
    let f = encoder.encode_unchecked(image)?;
    let (hs, ws, c) = f.features.shape();
    let p = f.patch_size;

    // d mean / d cell-logit, the same for every prompt.
    let mut padded_grad = Image::zeros(hs * p, ws * p, 1);
    for y in 0..h {
        for x in 0..w {
            padded_grad.set(y, x, 0, 1.0 / (h * w) as f64);
        }
    }
    let cell_weight = upsample_adjoint(&padded_grad, hs, ws);

    let n_prompts = prompts.len() as f64;
    let mut grad_f = Image::zeros(hs, ws, c);
    let mut value = 0.0;
    for prompt in prompts {
        let t = encoder.encode_text(prompt)?;
        let sim = similarity_map(&f, &t)?;
        let center = sigma.resolve(&sim);
        let tn = t.t.iter().map(|x| x * x).sum::<f64>().sqrt();
        // d value / d sim for each cell.
        let mut g_sim = vec![0.0; hs * ws];
        for idx in 0..hs * ws {
            let z = (sim.data()[idx] - center) / sigma.tau;
            value += cell_weight.data()[idx] * z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP) / n_prompts;
            if z.abs() < LOGIT_CLAMP {
                g_sim[idx] = cell_weight.data()[idx] / (sigma.tau * n_prompts);
            }
        }
        if matches!(sigma.center, Centering::ImageMean) {
            let mean = g_sim.iter().sum::<f64>() / g_sim.len() as f64;
            g_sim.iter_mut().for_each(|g| *g -= mean);
        }
        for i in 0..hs {
            for j in 0..ws {
                let cell = f.cell(i, j);
                let fnorm = cell.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = sim.get(i, j, 0);
                let g = g_sim[i * ws + j];
                for k in 0..c {
                    // ∂cos/∂F = t/(|F||t|) − cos·F/|F|².
                    let d = t.t[k] / (fnorm * tn) - s * cell[k] / (fnorm * fnorm);
                    let idx = (i * ws + j) * c + k;
                    grad_f.data_mut()[idx] += g * d;
                }
            }
        }
    }
    let grad = encoder.image_vjp(image, &grad_f)?;
    Ok((value, grad))
}

#[cfg(test)]
mod tests;
