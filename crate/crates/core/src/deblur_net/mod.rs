//! Restoration network: a three-scale gated-convolution encoder–decoder
//! with self-attention at the coarsest scale. In the blur-prior variant
//! the attention logits receive a local bias predicted from the raw blur
//! map.
//!
//! Everything runs in `f64` with hand-written backward passes; [`Tape`]
//! holds the activations of one forward pass.

mod attention;
mod layers;
mod params;

pub use attention::{
    bpa_attention, bpa_bias, self_attention, AttentionBias, AttentionBlock, BiasFfn, QkvWeights,
};
pub use layers::{avg_pool, Conv2d};
pub use params::{Init, LayoutBuilder, ParamEntry};

use serde::{Deserialize, Serialize};

use crate::blurmap::BlurMap;
use crate::dp_formation::{center_view, DPPair};
use crate::error::{LdpError, Result};
use crate::image::Image;
use attention::{AttentionBlockCache, FfnCache};
use layers::{gate, gate_backward, pixel_shuffle, pixel_unshuffle, ChannelNorm, ChannelScale, DepthwiseConv3, NormCache};

/// Image is an `h × w × c` array, which is all a feature map is.
pub type FeatureMap = Image;

/// Network variants compared in the ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone only.
    Baseline,
    /// Normalized blur map appended as a seventh input channel.
    Concat,
    /// Plain self-attention at the coarsest scale.
    SelfAttention,
    ConcatSelfAttention,
    /// Self-attention with the blur-prior logit bias.
    #[default]
    Bpa,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Concat,
        Variant::SelfAttention,
        Variant::ConcatSelfAttention,
        Variant::Bpa,
    ];

    pub fn concat_map(self) -> bool {
        matches!(self, Variant::Concat | Variant::ConcatSelfAttention)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::SelfAttention | Variant::ConcatSelfAttention | Variant::Bpa)
    }

    pub fn biased(self) -> bool {
        self == Variant::Bpa
    }

    pub fn needs_map(self) -> bool {
        self.concat_map() || self.biased()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Concat => "concat",
            Variant::SelfAttention => "sa",
            Variant::ConcatSelfAttention => "concat_sa",
            Variant::Bpa => "bpa",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePreset {
    #[default]
    Small,
    Large,
}

impl SizePreset {
    fn base_width(self) -> usize {
        match self {
            SizePreset::Small => 16,
            SizePreset::Large => 32,
        }
    }

    fn blocks(self) -> usize {
        match self {
            SizePreset::Small => 1,
            SizePreset::Large => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub size_preset: SizePreset,
    /// Channels per scale, finest first. Defaults from the preset.
    pub widths: Option<Vec<usize>>,
    pub n_blocks: Option<Vec<usize>>,
    /// Index of the scale hosting attention; must be the coarsest.
    pub attention_scale: Option<usize>,
    pub q: usize,
    /// Attention logit divisor; defaults to sqrt of the head dimension.
    pub beta: Option<f64>,
    pub variant: Variant,
    pub ffn_hidden: usize,
    pub layer_scale_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            size_preset: SizePreset::Small,
            widths: None,
            n_blocks: None,
            attention_scale: None,
            q: 3,
            beta: None,
            variant: Variant::Bpa,
            ffn_hidden: 8,
            layer_scale_init: 0.1,
        }
    }
}

const SCALES: usize = 3;

impl NetConfig {
    pub fn small() -> Self {
        Self::default()
    }

    pub fn large() -> Self {
        Self {
            size_preset: SizePreset::Large,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn widths(&self) -> Vec<usize> {
        self.widths.clone().unwrap_or_else(|| {
            let b = self.size_preset.base_width();
            (0..SCALES).map(|s| b << s).collect()
        })
    }

    pub fn n_blocks(&self) -> Vec<usize> {
        self.n_blocks
            .clone()
            .unwrap_or_else(|| vec![self.size_preset.blocks(); self.widths().len()])
    }

    pub fn scales(&self) -> usize {
        self.widths().len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
            .unwrap_or_else(|| (*self.widths().last().unwrap_or(&1) as f64).sqrt())
    }

    /// Spatial reduction between the input and the coarsest scale.
    pub fn reduction(&self) -> usize {
        1 << (self.scales() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        let blocks = self.n_blocks();
        if widths.is_empty() || widths.contains(&0) {
            return Err(LdpError::config("net.widths", "need at least one positive width"));
        }
        if blocks.len() != widths.len() {
            return Err(LdpError::config("net.n_blocks", "needs one entry per scale"));
        }
        if self.q.is_multiple_of(2) {
            return Err(LdpError::config("net.q", "must be odd and at least 1"));
        }
        if let Some(s) = self.attention_scale {
            if s + 1 != widths.len() {
                return Err(LdpError::config("net.attention_scale", "attention runs at the coarsest scale only"));
            }
        }
        if !(self.beta() > 0.0 && self.beta().is_finite()) {
            return Err(LdpError::config("net.beta", "must be positive"));
        }
        if self.ffn_hidden == 0 {
            return Err(LdpError::config("net.ffn_hidden", "must be positive"));
        }
        if !self.layer_scale_init.is_finite() {
            return Err(LdpError::config("net.layer_scale_init", "must be finite"));
        }
        Ok(())
    }
}

/// Norm → 1×1 expand → depthwise 3×3 → gate → 1×1, twice, each half
/// added back through a learned per-channel scale.
#[derive(Clone, Debug)]
struct GatedBlock {
    norm1: ChannelNorm,
    expand1: Conv2d,
    dw: DepthwiseConv3,
    project1: Conv2d,
    scale1: ChannelScale,
    norm2: ChannelNorm,
    expand2: Conv2d,
    project2: Conv2d,
    scale2: ChannelScale,
}

struct BlockCache {
    n1: NormCache,
    h1: Image,
    h2: Image,
    h3: Image,
    h4: Image,
    h5: Image,
    n2: NormCache,
    g1: Image,
    g2: Image,
    g3: Image,
    g4: Image,
}

impl GatedBlock {
    fn new(lb: &mut LayoutBuilder, name: &str, c: usize, scale_init: f64) -> Self {
        Self {
            norm1: ChannelNorm::new(lb, &format!("{name}.norm1"), c),
            expand1: Conv2d::new(lb, &format!("{name}.expand1"), c, 2 * c, 1, 1, Init::Default),
            dw: DepthwiseConv3::new(lb, &format!("{name}.dw"), 2 * c),
            project1: Conv2d::new(lb, &format!("{name}.project1"), c, c, 1, 1, Init::Default),
            scale1: ChannelScale::new(lb, &format!("{name}.scale1"), c, scale_init),
            norm2: ChannelNorm::new(lb, &format!("{name}.norm2"), c),
            expand2: Conv2d::new(lb, &format!("{name}.expand2"), c, 2 * c, 1, 1, Init::Default),
            project2: Conv2d::new(lb, &format!("{name}.project2"), c, c, 1, 1, Init::Default),
            scale2: ChannelScale::new(lb, &format!("{name}.scale2"), c, scale_init),
        }
    }

    fn forward(&self, p: &[f64], x: &Image) -> (Image, BlockCache) {
        let (h1, n1) = self.norm1.forward(p, x);
        let h2 = self.expand1.forward(p, &h1);
        let h3 = self.dw.forward(p, &h2);
        let h4 = gate(&h3);
        let h5 = self.project1.forward(p, &h4);
        let y1 = add(x, &self.scale1.forward(p, &h5));
        let (g1, n2) = self.norm2.forward(p, &y1);
        let g2 = self.expand2.forward(p, &g1);
        let g3 = gate(&g2);
        let g4 = self.project2.forward(p, &g3);
        let y = add(&y1, &self.scale2.forward(p, &g4));
        (
            y,
            BlockCache {
                n1,
                h1,
                h2,
                h3,
                h4,
                h5,
                n2,
                g1,
                g2,
                g3,
                g4,
            },
        )
    }

    fn backward(&self, p: &[f64], c: &BlockCache, gy: &Image, grads: &mut [f64]) -> Image {
        let g = self.scale2.backward(p, &c.g4, gy, grads);
        let g = self.project2.backward(p, &c.g3, &g, grads);
        let g = gate_backward(&c.g2, &g);
        let g = self.expand2.backward(p, &c.g1, &g, grads);
        let gy1 = add(gy, &self.norm2.backward(p, &c.n2, &g, grads));

        let g = self.scale1.backward(p, &c.h5, &gy1, grads);
        let g = self.project1.backward(p, &c.h4, &g, grads);
        let g = gate_backward(&c.h3, &g);
        let g = self.dw.backward(p, &c.h2, &g, grads);
        let g = self.expand1.backward(p, &c.h1, &g, grads);
        add(&gy1, &self.norm1.backward(p, &c.n1, &g, grads))
    }
}

fn add(a: &Image, b: &Image) -> Image {
    a.zip_map(b, |x, y| x + y).expect("residual shapes agree")
}

#[derive(Clone, Debug)]
pub struct DeblurNet {
    config: NetConfig,
    layout: LayoutBuilder,
    intro: Conv2d,
    encoders: Vec<Vec<GatedBlock>>,
    downs: Vec<Conv2d>,
    middle: Vec<GatedBlock>,
    attention: Option<AttentionBlock>,
    ffn: Option<BiasFfn>,
    ups: Vec<Conv2d>,
    decoders: Vec<Vec<GatedBlock>>,
    ending: Conv2d,
}

/// Activations of one forward pass, consumed by [`DeblurNet::backward`].
pub struct Tape {
    size: (usize, usize),
    padded: (usize, usize),
    input: Image,
    encoders: Vec<Vec<BlockCache>>,
    skips: Vec<Image>,
    middle: Vec<BlockCache>,
    attention: Option<(AttentionBlockCache, Option<(attention::AttentionBias, FfnCache)>)>,
    up_inputs: Vec<Image>,
    decoders: Vec<Vec<BlockCache>>,
    ending_input: Image,
}

impl DeblurNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let blocks = config.n_blocks();
        let s_count = widths.len();
        let scale_init = config.layer_scale_init;
        let mut lb = LayoutBuilder::default();
        let in_ch = if config.variant.concat_map() { 7 } else { 6 };
        let intro = Conv2d::new(&mut lb, "intro", in_ch, widths[0], 3, 1, Init::Default);
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for s in 0..s_count - 1 {
            encoders.push(
                (0..blocks[s])
                    .map(|b| GatedBlock::new(&mut lb, &format!("enc{s}.{b}"), widths[s], scale_init))
                    .collect(),
            );
            downs.push(Conv2d::new(&mut lb, &format!("down{s}"), widths[s], widths[s + 1], 2, 2, Init::Default));
        }
        let last = s_count - 1;
        let middle = (0..blocks[last])
            .map(|b| GatedBlock::new(&mut lb, &format!("mid.{b}"), widths[last], scale_init))
            .collect();
        let attention = config
            .variant
            .has_attention()
            .then(|| AttentionBlock::new(&mut lb, "attn", widths[last], config.beta()));
        let ffn = config
            .variant
            .biased()
            .then(|| BiasFfn::new(&mut lb, "bias_ffn", config.q, config.ffn_hidden));
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for s in 0..s_count - 1 {
            ups.push(Conv2d::new(&mut lb, &format!("up{s}"), widths[s + 1], 4 * widths[s], 1, 1, Init::Default));
            decoders.push(
                (0..blocks[s])
                    .map(|b| GatedBlock::new(&mut lb, &format!("dec{s}.{b}"), widths[s], scale_init))
                    .collect(),
            );
        }
        let ending = Conv2d::new(&mut lb, "ending", widths[0], 3, 3, 1, Init::Zeros);
        Ok(Self {
            config,
            layout: lb,
            intro,
            encoders,
            downs,
            middle,
            attention,
            ffn,
            ups,
            decoders,
            ending,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        self.layout.entries()
    }

    /// Fresh parameters; the output layer starts at zero so the network
    /// returns the center view exactly.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        self.layout.build(seed)
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(LdpError::shape(format!(
                "network expects {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Restored image in unclamped reals.
    pub fn forward(&self, pair: &DPPair, map: Option<&BlurMap>, params: &[f64]) -> Result<Image> {
        self.forward_train(pair, map, params).map(|r| r.0)
    }

    /// Restored image clamped to `[0,1]`.
    pub fn restore(&self, pair: &DPPair, map: Option<&BlurMap>, params: &[f64]) -> Result<Image> {
        self.forward(pair, map, params).map(|i| i.clamp01())
    }

    pub fn forward_train(&self, pair: &DPPair, map: Option<&BlurMap>, params: &[f64]) -> Result<(Image, Tape)> {
        self.check_params(params)?;
        pair.left.ensure_same_shape(&pair.right, "DP pair")?;
        if pair.left.channels() != 3 {
            return Err(LdpError::shape("dual-pixel views must have 3 channels"));
        }
        let variant = self.config.variant;
        let map = match (variant.needs_map(), map) {
            (true, None) => {
                return Err(LdpError::domain(format!(
                    "variant `{}` needs a blur map",
                    variant.name()
                )))
            }
            (true, Some(m)) => {
                if (m.height(), m.width()) != (pair.height(), pair.width()) {
                    return Err(LdpError::domain("blur map size differs from the DP pair"));
                }
                Some(m)
            }
            (false, _) => None,
        };
        let p = params;
        let (h, w) = (pair.height(), pair.width());
        let red = self.config.reduction();
        let (hp, wp) = (h.div_ceil(red) * red, w.div_ceil(red) * red);
        let center = center_view(pair)?.pad_edge_to(hp, wp);
        let mut input = pair.left.pad_edge_to(hp, wp).cconcat(&pair.right.pad_edge_to(hp, wp))?;
        if variant.concat_map() {
            let m = map.expect("checked above");
            input = input.cconcat(&m.normalized.pad_edge_to(hp, wp))?;
        }

        let mut x = self.intro.forward(p, &input);
        let mut enc_caches = Vec::new();
        let mut skips = Vec::new();
        for (blocks, down) in self.encoders.iter().zip(&self.downs) {
            let mut caches = Vec::new();
            for b in blocks {
                let (y, c) = b.forward(p, &x);
                caches.push(c);
                x = y;
            }
            enc_caches.push(caches);
            let y = down.forward(p, &x);
            skips.push(x);
            x = y;
        }
        let mut mid_caches = Vec::new();
        for b in &self.middle {
            let (y, c) = b.forward(p, &x);
            mid_caches.push(c);
            x = y;
        }
        let attention = match &self.attention {
            Some(block) => {
                let bias = match &self.ffn {
                    Some(ffn) => {
                        let m = map.expect("checked above");
                        let pooled = avg_pool(&m.raw.pad_edge_to(hp, wp), red);
                        Some(ffn.forward(p, &pooled)?)
                    }
                    None => None,
                };
                let (y, c) = block.forward(p, &x, bias.as_ref().map(|b| &b.0))?;
                x = y;
                Some((c, bias))
            }
            None => None,
        };
        let mut up_inputs = Vec::new();
        let mut dec_caches: Vec<Vec<BlockCache>> = (0..self.decoders.len()).map(|_| Vec::new()).collect();
        for s in (0..self.decoders.len()).rev() {
            let up = pixel_shuffle(&self.ups[s].forward(p, &x));
            up_inputs.push(x);
            x = add(&up, &skips[s]);
            for b in &self.decoders[s] {
                let (y, c) = b.forward(p, &x);
                dec_caches[s].push(c);
                x = y;
            }
        }
        up_inputs.reverse();
        let residual = self.ending.forward(p, &x);
        let out = add(&center, &residual).crop(0, 0, h, w)?;
        if !out.is_finite() {
            return Err(LdpError::Numeric("network output is not finite".into()));
        }
        Ok((
            out,
            Tape {
                size: (h, w),
                padded: (hp, wp),
                input,
                encoders: enc_caches,
                skips,
                middle: mid_caches,
                attention,
                up_inputs,
                decoders: dec_caches,
                ending_input: x,
            },
        ))
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂output`.
    pub fn backward(&self, params: &[f64], tape: &Tape, grad_out: &Image, grads: &mut [f64]) -> Result<()> {
        self.check_params(params)?;
        if grads.len() != params.len() {
            return Err(LdpError::shape("gradient buffer length differs from parameters"));
        }
        let (h, w) = tape.size;
        if grad_out.shape() != (h, w, 3) {
            return Err(LdpError::shape("output gradient has the wrong shape"));
        }
        let p = params;
        let (hp, wp) = tape.padded;
        let g_out = grad_out.pad_to(hp, wp);
        let mut g = self.ending.backward(p, &tape.ending_input, &g_out, grads);
        let mut g_skips = Vec::new();
        for s in 0..self.decoders.len() {
            for (b, c) in self.decoders[s].iter().zip(&tape.decoders[s]).rev() {
                g = b.backward(p, c, &g, grads);
            }
            g_skips.push(g.clone());
            g = self.ups[s].backward(p, &tape.up_inputs[s], &pixel_unshuffle(&g), grads);
        }
        if let (Some(block), Some((cache, bias))) = (&self.attention, &tape.attention) {
            let (gx, gbias) = block.backward(p, cache, bias.as_ref().map(|b| &b.0), &g, grads);
            g = gx;
            if let (Some(ffn), Some((_, fcache)), Some(gk)) = (&self.ffn, bias, gbias) {
                ffn.backward(p, fcache, &gk, grads);
            }
        }
        for (b, c) in self.middle.iter().zip(&tape.middle).rev() {
            g = b.backward(p, c, &g, grads);
        }
        for s in (0..self.encoders.len()).rev() {
            g = self.downs[s].backward(p, &tape.skips[s], &g, grads);
            g = add(&g, &g_skips[s]);
            for (b, c) in self.encoders[s].iter().zip(&tape.encoders[s]).rev() {
                g = b.backward(p, c, &g, grads);
            }
        }
        self.intro.backward(p, &tape.input, &g, grads);
        Ok(())
    }
}
