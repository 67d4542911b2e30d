//! Dual-pixel image formation.
//!
//! A thin-lens stand-in maps scene depth to signed DP disparity, each
//! disparity gets a pair of mirrored half-disk point spread functions, and a
//! layered renderer turns an RGB + depth scene into a left/right view pair
//! together with its ground-truth disparity and blur mask.

mod psf;
mod render;
pub mod scenes;

pub use psf::{disk_kernel, dp_psf_pair, Kernel, IDENTITY_DISPARITY};
pub use render::{convolve_circular, render_dp_pair, render_dp_pair_with, RenderOptions};

use serde::{Deserialize, Serialize};

use crate::error::{LdpError, Result};
use crate::image::Image;

/// Pixels with `|d|` above this are considered blurred.
pub const BLUR_DISPARITY_THRESHOLD: f64 = 1.0;

/// Collapsed thin-lens model: `d(z) = gain · (1 − focus_depth / z)`, clamped
/// to `±max_disparity`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensModel {
    pub focus_depth: f64,
    pub gain: f64,
    pub max_disparity: f64,
}

impl Default for LensModel {
    fn default() -> Self {
        Self {
            focus_depth: 1.0,
            gain: 8.0,
            max_disparity: 8.0,
        }
    }
}

impl LensModel {
    pub fn new(focus_depth: f64, gain: f64, max_disparity: f64) -> Result<Self> {
        let lens = Self {
            focus_depth,
            gain,
            max_disparity,
        };
        lens.validate()?;
        Ok(lens)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focus_depth > 0.0 && self.focus_depth.is_finite()) {
            return Err(LdpError::config("lens.focus_depth", "must be positive"));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(LdpError::config("lens.gain", "must be positive"));
        }
        if !(self.max_disparity >= 1.0 && self.max_disparity.is_finite()) {
            return Err(LdpError::config("lens.max_disparity", "must be at least 1"));
        }
        Ok(())
    }

    /// Disparity of a single depth; exactly 0 at the focal plane.
    pub fn disparity(&self, depth: f64) -> Result<f64> {
        if !(depth > 0.0) {
            return Err(LdpError::domain(format!("depth must be positive, got {depth}")));
        }
        if depth == self.focus_depth {
            return Ok(0.0);
        }
        let d = self.gain * (1.0 - self.focus_depth / depth);
        Ok(d.clamp(-self.max_disparity, self.max_disparity))
    }

    /// Depth that produces disparity `d` (inverse of [`LensModel::disparity`]
    /// inside the clamp range).
    pub fn depth_for_disparity(&self, d: f64) -> Result<f64> {
        if d.abs() > self.max_disparity || d >= self.gain {
            return Err(LdpError::domain(format!(
                "disparity {d} is not reachable with gain {} / max {}",
                self.gain, self.max_disparity
            )));
        }
        if d == 0.0 {
            return Ok(self.focus_depth);
        }
        Ok(self.focus_depth / (1.0 - d / self.gain))
    }
}

/// Signed per-pixel DP disparity in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub d: Image,
}

impl DisparityMap {
    pub fn abs(&self) -> Image {
        self.d.map(f64::abs)
    }

    pub fn blur_mask(&self) -> BlurMask {
        BlurMask::from_disparity(self)
    }
}

/// Binary ground-truth mask, 1 where `|d| > 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurMask {
    pub mask: Image,
}

impl BlurMask {
    pub fn from_disparity(d: &DisparityMap) -> Self {
        Self {
            mask: d.d.map(|v| {
                if v.abs() > BLUR_DISPARITY_THRESHOLD {
                    1.0
                } else {
                    0.0
                }
            }),
        }
    }

    pub fn labels(&self) -> Vec<bool> {
        self.mask.data().iter().map(|&v| v > 0.5).collect()
    }
}

/// Left and right sub-aperture views of one exposure.
#[derive(Clone, Debug, PartialEq)]
pub struct DPPair {
    pub left: Image,
    pub right: Image,
}

impl DPPair {
    pub fn new(left: Image, right: Image) -> Result<Self> {
        left.ensure_same_shape(&right, "DP pair")?;
        Ok(Self { left, right })
    }

    pub fn height(&self) -> usize {
        self.left.height()
    }

    pub fn width(&self) -> usize {
        self.left.width()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<DPPair> {
        Ok(DPPair {
            left: self.left.crop(y0, x0, h, w)?,
            right: self.right.crop(y0, x0, h, w)?,
        })
    }
}

/// RGB + depth input to the renderer.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub sharp_image: Image,
    pub depth: Image,
    pub lens: LensModel,
}

impl SceneSample {
    pub fn new(sharp_image: Image, depth: Image, lens: LensModel) -> Result<Self> {
        if sharp_image.channels() != 3 {
            return Err(LdpError::domain("sharp image must have 3 channels"));
        }
        if depth.channels() != 1
            || depth.height() != sharp_image.height()
            || depth.width() != sharp_image.width()
        {
            return Err(LdpError::domain(format!(
                "depth {:?} does not match image {:?}",
                depth.shape(),
                sharp_image.shape()
            )));
        }
        if !sharp_image
            .data()
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        {
            return Err(LdpError::domain("sharp image must be finite and in [0,1]"));
        }
        if !depth.data().iter().all(|&z| z > 0.0 && z.is_finite()) {
            return Err(LdpError::domain("depth must be positive everywhere"));
        }
        lens.validate()?;
        Ok(Self {
            sharp_image,
            depth,
            lens,
        })
    }
}

pub fn disparity_from_depth(depth: &Image, lens: &LensModel) -> Result<DisparityMap> {
    if depth.channels() != 1 {
        return Err(LdpError::domain("depth map must have a single channel"));
    }
    let mut d = Image::zeros(depth.height(), depth.width(), 1);
    for (out, &z) in d.data_mut().iter_mut().zip(depth.data()) {
        *out = lens.disparity(z)?;
    }
    Ok(DisparityMap { d })
}

/// Image a regular sensor would record: the mean of the two views.
pub fn center_view(pair: &DPPair) -> Result<Image> {
    pair.left
        .zip_map(&pair.right, |l, r| (l + r) / 2.0)
        .map_err(|_| {
            LdpError::domain(format!(
                "DP views differ in shape: {:?} vs {:?}",
                pair.left.shape(),
                pair.right.shape()
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_plane_has_zero_disparity() {
        let lens = LensModel::default();
        let depth = Image::filled(4, 5, 1, lens.focus_depth);
        let d = disparity_from_depth(&depth, &lens).unwrap();
        assert!(d.d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn far_limit_clamps_to_max() {
        let lens = LensModel::new(1.0, 8.0, 8.0).unwrap();
        let d = lens.disparity(1e12).unwrap();
        assert!((d - 8.0).abs() < 1e-9);
        assert_eq!(lens.disparity(f64::MAX).unwrap(), 8.0);
    }

    #[test]
    fn twice_focus_depth_gives_half_gain() {
        // 8 · (1 − 1/2) evaluated by hand.
        let lens = LensModel::new(1.5, 8.0, 8.0).unwrap();
        assert_eq!(lens.disparity(3.0).unwrap(), 4.0);
    }

    #[test]
    fn non_positive_depth_is_a_domain_error() {
        let lens = LensModel::default();
        let mut depth = Image::filled(2, 2, 1, 1.0);
        depth.set(1, 1, 0, 0.0);
        assert!(matches!(
            disparity_from_depth(&depth, &lens),
            Err(LdpError::Domain(_))
        ));
        assert!(lens.disparity(-1.0).is_err());
    }

    #[test]
    fn lens_validation() {
        assert!(LensModel::new(1.0, 0.0, 8.0).is_err());
        assert!(LensModel::new(1.0, 8.0, 0.5).is_err());
        assert!(LensModel::new(-1.0, 8.0, 8.0).is_err());
    }

    #[test]
    fn depth_for_disparity_inverts() {
        let lens = LensModel::default();
        for d in [-6.0, -1.5, 0.0, 2.0, 6.0] {
            let z = lens.depth_for_disparity(d).unwrap();
            assert!((lens.disparity(z).unwrap() - d).abs() < 1e-12);
        }
    }

    #[test]
    fn center_view_examples() {
        let x = Image::from_fn(3, 4, 3, |y, x, c| ((y * 7 + x * 3 + c) % 5) as f64 / 4.0);
        let pair = DPPair::new(x.clone(), x.clone()).unwrap();
        assert_eq!(center_view(&pair).unwrap(), x);

        let pair = DPPair {
            left: Image::zeros(2, 2, 3),
            right: Image::filled(2, 2, 3, 1.0),
        };
        assert!(center_view(&pair).unwrap().data().iter().all(|&v| v == 0.5));

        let bad = DPPair {
            left: Image::zeros(2, 2, 3),
            right: Image::zeros(2, 3, 3),
        };
        assert!(matches!(center_view(&bad), Err(LdpError::Domain(_))));
    }

    #[test]
    fn center_view_matches_scalar_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let left = Image::from_fn(5, 6, 3, |_, _, _| rng.random::<f64>());
        let right = Image::from_fn(5, 6, 3, |_, _, _| rng.random::<f64>());
        let pair = DPPair::new(left.clone(), right.clone()).unwrap();
        let cv = center_view(&pair).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                for c in 0..3 {
                    let expect = 0.5 * left.get(y, x, c) + 0.5 * right.get(y, x, c);
                    assert!((cv.get(y, x, c) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn blur_mask_threshold() {
        let d = DisparityMap {
            d: Image::new(1, 5, 1, vec![-2.0, -1.0, 0.0, 1.0, 1.0001]).unwrap(),
        };
        assert_eq!(d.blur_mask().mask.data(), &[1.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
