//! Browser demo: render a synthetic dual-pixel scene, estimate its blur
//! map with the stub encoder, and restore it with a checkpoint written by
//! `ldp train`. Images cross the boundary as RGBA bytes ready for
//! `ImageData`.

use ldp_core::blurmap::{estimate, MapFormat, PromptSet};
use ldp_core::deblur_net::DeblurNet;
use ldp_core::dp_formation::scenes::{generate_scene, SceneKind, SceneParams};
use ldp_core::dp_formation::{center_view, render_dp_pair, DPPair, RenderOptions};
use ldp_core::io::decode_checkpoint;
use ldp_core::train_eval::metrics::psnr;
use ldp_core::vl_encoder::{load_encoder, EncoderSpec};
use ldp_core::{Image, LdpError, Result};
use wasm_bindgen::prelude::*;

fn js(e: LdpError) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes; gray images are replicated across the color channels.
pub fn to_rgba(img: &Image) -> Vec<u8> {
    let gray = img.channels() == 1;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(img.height() * img.width() * 4);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            if gray {
                out.extend_from_slice(&[q(p[0]), q(p[0]), q(p[0]), 255]);
            } else {
                out.extend_from_slice(&[q(p[0]), q(p[1]), q(p[2]), 255]);
            }
        }
    }
    out
}

/// `|d|` scaled so the largest disparity is white.
fn disparity_view(d: &Image) -> Image {
    let max = d.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    d.map(|v| if max > 0.0 { v.abs() / max } else { 0.0 })
}

pub fn parse_format(name: &str) -> Result<MapFormat> {
    match name {
        "blur" => Ok(MapFormat::BlurAware),
        "dp" => Ok(MapFormat::DpAware),
        "ensemble" => Ok(MapFormat::Ensemble),
        "difference" => Ok(MapFormat::Difference),
        _ => Err(LdpError::config("format", format!("unknown map format {name:?}"))),
    }
}

#[wasm_bindgen]
pub struct Scene {
    pair: DPPair,
    sharp: Image,
    disparity: Image,
}

#[wasm_bindgen]
pub struct Restored {
    rgba: Vec<u8>,
    psnr: f64,
    input_psnr: f64,
}

#[wasm_bindgen]
impl Restored {
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    #[wasm_bindgen(getter)]
    pub fn input_psnr(&self) -> f64 {
        self.input_psnr
    }
}

impl Scene {
    pub fn render(seed: u64, layered: bool, size: usize) -> Result<Scene> {
        let params = SceneParams {
            kind: if layered { SceneKind::Layered } else { SceneKind::TwoPlane },
            height: size,
            width: size,
            ..SceneParams::default()
        };
        let scene = generate_scene(&params, seed)?;
        let (pair, disparity, _) = render_dp_pair(&scene, RenderOptions::default().n_layers)?;
        Ok(Scene {
            pair,
            sharp: scene.sharp_image,
            disparity: disparity.d,
        })
    }

    pub fn map(&self, format: &str) -> Result<Image> {
        let enc = load_encoder(&EncoderSpec::stub())?;
        Ok(estimate(&self.pair, parse_format(format)?, &PromptSet::default(), enc.as_ref())?.normalized)
    }

    pub fn restored(&self, checkpoint: &[u8]) -> Result<(Image, f64, f64)> {
        let ckpt = decode_checkpoint(checkpoint)?;
        let net = DeblurNet::new(ckpt.net)?;
        let enc = load_encoder(&EncoderSpec::stub())?;
        let map = estimate(&self.pair, MapFormat::Ensemble, &PromptSet::default(), enc.as_ref())?;
        let out = net.restore(&self.pair, Some(&map), &ckpt.params)?;
        let input = center_view(&self.pair)?.clamp01();
        Ok((out.clone(), psnr(&self.sharp, &out)?, psnr(&self.sharp, &input)?))
    }
}

#[wasm_bindgen]
impl Scene {
    /// Square scene of side `size` (at least 8).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, layered: bool, size: u32) -> std::result::Result<Scene, JsError> {
        Scene::render(seed as u64, layered, size as usize).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> u32 {
        self.pair.width() as u32
    }

    pub fn left(&self) -> Vec<u8> {
        to_rgba(&self.pair.left)
    }

    pub fn sharp(&self) -> Vec<u8> {
        to_rgba(&self.sharp)
    }

    pub fn center(&self) -> std::result::Result<Vec<u8>, JsError> {
        center_view(&self.pair).map(|c| to_rgba(&c)).map_err(js)
    }

    pub fn disparity(&self) -> Vec<u8> {
        to_rgba(&disparity_view(&self.disparity))
    }

    /// Normalized blur map for `blur`, `dp`, `ensemble` or `difference`.
    pub fn blur_map(&self, format: &str) -> std::result::Result<Vec<u8>, JsError> {
        self.map(format).map(|m| to_rgba(&m)).map_err(js)
    }

    /// Restore with checkpoint bytes; the network sees the ensembled map.
    pub fn restore(&self, checkpoint: &[u8]) -> std::result::Result<Restored, JsError> {
        let (img, psnr, input_psnr) = self.restored(checkpoint).map_err(js)?;
        Ok(Restored {
            rgba: to_rgba(&img),
            psnr,
            input_psnr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldp_core::deblur_net::NetConfig;
    use ldp_core::io::{encode_checkpoint, Checkpoint};

    #[test]
    fn rgba_layout() {
        let rgb = Image::new(1, 2, 3, vec![0.0, 0.5, 1.0, 2.0, -1.0, 0.2]).unwrap();
        assert_eq!(to_rgba(&rgb), vec![0, 128, 255, 255, 255, 0, 51, 255]);
        let gray = Image::new(1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(to_rgba(&gray), vec![255, 255, 255, 255]);
    }

    #[test]
    fn scene_maps_and_restoration() {
        let scene = Scene::render(4, false, 32).unwrap();
        assert_eq!(scene.left().len(), 32 * 32 * 4);
        for f in ["blur", "dp", "ensemble", "difference"] {
            let m = scene.map(f).unwrap();
            assert_eq!((m.height(), m.width()), (32, 32));
        }
        assert!(scene.map("sharpness").is_err());

        let cfg = NetConfig::small();
        let n = DeblurNet::new(cfg.clone()).unwrap().param_count();
        let bytes = encode_checkpoint(&Checkpoint {
            net: cfg,
            params: vec![0.0; n],
            meta: Default::default(),
        })
        .unwrap();
        let (out, p, input) = scene.restored(&bytes).unwrap();
        // All-zero parameters pass the center view through.
        assert!(out.max_abs_diff(&center_view(&scene.pair).unwrap().clamp01()) < 1e-12);
        assert!((p - input).abs() < 1e-9);
        assert!(scene.restored(b"junk").is_err());
    }
}
