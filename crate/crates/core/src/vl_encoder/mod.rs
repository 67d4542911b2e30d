//! Vision-language encoders.
//!
//! An encoder maps an image to a grid of unit feature vectors (one per
//! patch) and a prompt to a single unit vector in the same space. Two
//! implementations exist: a closed-form [`OracleStub`] whose features are
//! hand-built blur and symmetry statistics, and a [`ClipEncoder`] that runs a
//! pretrained ViT-B/32 CLIP from a local safetensors file.

mod clip;
mod prompts;
mod stub;

pub use clip::{ClipConfig, ClipEncoder};
pub use prompts::{canonical_prompt, prompt_table, PromptFormat, PromptTable};
pub use stub::OracleStub;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{LdpError, Result};
use crate::image::Image;

/// Environment variable holding the default pretrained weights path.
pub const WEIGHTS_ENV: &str = "LDP_WEIGHTS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    OracleStub,
    PretrainedAdapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub c: usize,
    pub patch_size: usize,
    #[serde(default)]
    pub weights_uri: Option<PathBuf>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::stub()
    }
}

impl EncoderSpec {
    pub fn stub() -> Self {
        Self {
            kind: EncoderKind::OracleStub,
            c: stub::STUB_DIM,
            patch_size: 8,
            weights_uri: None,
        }
    }

    /// ViT-B/32 adapter; falls back to `$LDP_WEIGHTS` when no path is given.
    pub fn pretrained(weights_uri: Option<PathBuf>) -> Self {
        Self {
            kind: EncoderKind::PretrainedAdapter,
            c: 512,
            patch_size: 32,
            weights_uri: weights_uri.or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 3 {
            return Err(LdpError::config("encoder.c", "must be at least 3"));
        }
        if ![8, 16, 32].contains(&self.patch_size) {
            return Err(LdpError::config("encoder.patch_size", "must be 8, 16 or 32"));
        }
        if self.kind == EncoderKind::OracleStub && self.c != stub::STUB_DIM {
            return Err(LdpError::config(
                "encoder.c",
                format!("the oracle stub has exactly {} dimensions", stub::STUB_DIM),
            ));
        }
        Ok(())
    }
}

/// `h_s × w_s × c` grid of unit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseEmbedding {
    pub features: Image,
    pub patch_size: usize,
}

impl DenseEmbedding {
    pub fn grid_height(&self) -> usize {
        self.features.height()
    }

    pub fn grid_width(&self) -> usize {
        self.features.width()
    }

    pub fn dim(&self) -> usize {
        self.features.channels()
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        self.features.pixel(i, j)
    }

    pub fn hflip(&self) -> DenseEmbedding {
        DenseEmbedding {
            features: self.features.hflip(),
            patch_size: self.patch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub t: Vec<f64>,
    pub prompt: String,
}

/// Scales `v` to unit length in place; zero vectors are left untouched.
pub fn normalize_in_place(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub trait VisionLanguageEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    fn encode_image_dense(&self, image: &Image) -> Result<DenseEmbedding>;

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding>;

    /// Dense features without input range checks, for images produced by a
    /// network during training.
    fn encode_unchecked(&self, image: &Image) -> Result<DenseEmbedding> {
        self.encode_image_dense(image)
    }

    /// Vector-Jacobian product of the dense features with respect to the
    /// image: given `∂L/∂F`, returns `∂L/∂image`.
    fn image_vjp(&self, image: &Image, grad_features: &Image) -> Result<Image> {
        let _ = (image, grad_features);
        Err(LdpError::Unsupported(
            "this encoder does not provide image gradients".into(),
        ))
    }
}

/// Builds the encoder described by `spec`, loading weights if needed.
pub fn load_encoder(spec: &EncoderSpec) -> Result<Box<dyn VisionLanguageEncoder>> {
    spec.validate()?;
    match spec.kind {
        EncoderKind::OracleStub => Ok(Box::new(OracleStub::new(spec.patch_size)?)),
        EncoderKind::PretrainedAdapter => Ok(Box::new(ClipEncoder::load(spec)?)),
    }
}

pub fn encode_image_dense(image: &Image, spec: &EncoderSpec) -> Result<DenseEmbedding> {
    load_encoder(spec)?.encode_image_dense(image)
}

pub fn encode_text(prompt: &str, spec: &EncoderSpec) -> Result<TextEmbedding> {
    load_encoder(spec)?.encode_text(prompt)
}

pub(crate) fn check_unit_image(image: &Image) -> Result<()> {
    if image.channels() != 3 {
        return Err(LdpError::domain(format!(
            "encoder input needs 3 channels, got {}",
            image.channels()
        )));
    }
    if image.height() == 0 || image.width() == 0 {
        return Err(LdpError::domain("encoder input is empty"));
    }
    if !image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(LdpError::domain("encoder input must lie in [0,1]"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(EncoderSpec::stub().validate().is_ok());
        let mut s = EncoderSpec::stub();
        s.patch_size = 12;
        assert!(s.validate().is_err());
        s.patch_size = 16;
        s.c = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn missing_weights_is_a_load_error_with_uri() {
        let spec = EncoderSpec::pretrained(Some("/nonexistent/clip.safetensors".into()));
        match load_encoder(&spec) {
            Err(LdpError::Load { uri, .. }) => {
                assert_eq!(uri, PathBuf::from("/nonexistent/clip.safetensors"))
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("loading a missing file succeeded"),
        }
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let s = EncoderSpec::stub();
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("oracle_stub"));
        let back: EncoderSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
    }
}
