//! Closed-form stand-in for a CLIP image/text encoder.
//!
//! Each patch yields two statistics over its in-image pixels:
//!
//! * `s1`, the mean squared forward difference (horizontal and vertical),
//!   high on sharp texture;
//! * `s2`, the mean squared residual between a pixel and its mirror about the
//!   image's vertical midline, zero for mirror-symmetric content.
//!
//! They become a blurriness score `b = 1/(1 + 50·s1)` and a symmetry score
//! `a = 1/(1 + 20·s2)`, both in (0,1], which are embedded on two quarter
//! circles:
//!
//! ```text
//! F = [cos(πb/2), sin(πb/2), cos(πa/2), sin(πa/2)] / √2
//! ```
//!
//! Blur prompts embed to `e₂` and symmetry prompts to `e₄`, so a cell's
//! similarity to a blur prompt is `sin(πb/2)/√2` and depends on sharpness
//! alone, and likewise for symmetry. Column sums are reduced in mirrored
//! pairs so that flipping the image flips the features bit for bit.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

use super::{
    check_unit_image, prompt_table, DenseEmbedding, EncoderSpec, PromptFormat, TextEmbedding,
    VisionLanguageEncoder,
};
use crate::error::{LdpError, Result};
use crate::image::Image;

pub(crate) const STUB_DIM: usize = 4;

const SHARPNESS_GAIN: f64 = 400.0;
const ASYMMETRY_GAIN: f64 = 1.0e4;

#[derive(Clone, Debug)]
pub struct OracleStub {
    spec: EncoderSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct CellStats {
    pub s1: f64,
    pub s2: f64,
}

/// Sum of `v` taken as `(v[0] + v[n−1]) + (v[1] + v[n−2]) + …`, which is
/// exactly invariant under reversing `v`.
fn mirrored_sum(v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for k in 0..n / 2 {
        s += v[k] + v[n - 1 - k];
    }
    if n % 2 == 1 {
        s += v[n / 2];
    }
    s
}

struct Cell {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl Cell {
    fn rows(&self) -> usize {
        self.y1 - self.y0
    }
    fn cols(&self) -> usize {
        self.x1 - self.x0
    }
    fn grad_count(&self) -> usize {
        self.rows() * self.cols().saturating_sub(1) + self.cols() * self.rows().saturating_sub(1)
    }
}

impl OracleStub {
    pub fn new(patch_size: usize) -> Result<Self> {
        let spec = EncoderSpec {
            patch_size,
            ..EncoderSpec::stub()
        };
        spec.validate()?;
        Ok(Self { spec })
    }

    fn patch(&self) -> usize {
        self.spec.patch_size
    }

    fn grid(&self, image: &Image) -> (usize, usize) {
        let p = self.patch();
        (image.height().div_ceil(p), image.width().div_ceil(p))
    }

    fn cell(&self, image: &Image, i: usize, j: usize) -> Cell {
        let p = self.patch();
        Cell {
            y0: i * p,
            y1: ((i + 1) * p).min(image.height()),
            x0: j * p,
            x1: ((j + 1) * p).min(image.width()),
        }
    }

    pub(crate) fn cell_stats(&self, image: &Image, i: usize, j: usize) -> CellStats {
        let cell = self.cell(image, i, j);
        let (w, ch) = (image.width(), image.channels());
        let n = cell.cols();
        let mut horiz = vec![0.0; n.saturating_sub(1)];
        let mut vert = vec![0.0; n];
        let mut mirror = vec![0.0; n];
        for y in cell.y0..cell.y1 {
            for k in 0..n {
                let x = cell.x0 + k;
                let px = image.pixel(y, x);
                let pm = image.pixel(y, w - 1 - x);
                for c in 0..ch {
                    let r = px[c] - pm[c];
                    mirror[k] += r * r;
                }
                if k + 1 < n {
                    let pr = image.pixel(y, x + 1);
                    for c in 0..ch {
                        let dx = pr[c] - px[c];
                        horiz[k] += dx * dx;
                    }
                }
                if y + 1 < cell.y1 {
                    let pd = image.pixel(y + 1, x);
                    for c in 0..ch {
                        let dy = pd[c] - px[c];
                        vert[k] += dy * dy;
                    }
                }
            }
        }
        let g = cell.grad_count();
        let s1 = if g == 0 {
            0.0
        } else {
            (mirrored_sum(&horiz) + mirrored_sum(&vert)) / (g * ch) as f64
        };
        let s2 = mirrored_sum(&mirror) / (cell.rows() * n * ch) as f64;
        CellStats { s1, s2 }
    }

    pub fn blurriness(s1: f64) -> f64 {
        1.0 / (1.0 + SHARPNESS_GAIN * s1)
    }

    pub fn symmetry(s2: f64) -> f64 {
        1.0 / (1.0 + ASYMMETRY_GAIN * s2)
    }

    fn embed(stats: CellStats) -> [f64; STUB_DIM] {
        let phi = FRAC_PI_2 * Self::blurriness(stats.s1);
        let psi = FRAC_PI_2 * Self::symmetry(stats.s2);
        [
            FRAC_1_SQRT_2 * phi.cos(),
            FRAC_1_SQRT_2 * phi.sin(),
            FRAC_1_SQRT_2 * psi.cos(),
            FRAC_1_SQRT_2 * psi.sin(),
        ]
    }

    /// Features without the `[0,1]` range check, for gradients through
    /// network outputs.
    fn features(&self, image: &Image) -> DenseEmbedding {
        let (hs, ws) = self.grid(image);
        let mut features = Image::zeros(hs, ws, STUB_DIM);
        for i in 0..hs {
            for j in 0..ws {
                let f = Self::embed(self.cell_stats(image, i, j));
                for (c, v) in f.into_iter().enumerate() {
                    features.set(i, j, c, v);
                }
            }
        }
        DenseEmbedding {
            features,
            patch_size: self.patch(),
        }
    }

    fn vjp(&self, image: &Image, grad: &Image) -> Result<Image> {
        let (hs, ws) = self.grid(image);
        if grad.shape() != (hs, ws, STUB_DIM) {
            return Err(LdpError::shape(format!(
                "feature gradient {:?} does not match grid {:?}",
                grad.shape(),
                (hs, ws, STUB_DIM)
            )));
        }
        let (w, ch) = (image.width(), image.channels());
        let mut out = Image::zeros(image.height(), w, ch);
        for i in 0..hs {
            for j in 0..ws {
                let stats = self.cell_stats(image, i, j);
                let g = grad.pixel(i, j);
                let b = Self::blurriness(stats.s1);
                let a = Self::symmetry(stats.s2);
                let (phi, psi) = (FRAC_PI_2 * b, FRAC_PI_2 * a);
                let g_phi = FRAC_1_SQRT_2 * (-phi.sin() * g[0] + phi.cos() * g[1]);
                let g_psi = FRAC_1_SQRT_2 * (-psi.sin() * g[2] + psi.cos() * g[3]);
                let g_s1 = FRAC_PI_2 * g_phi * -SHARPNESS_GAIN * b * b;
                let g_s2 = FRAC_PI_2 * g_psi * -ASYMMETRY_GAIN * a * a;

                let cell = self.cell(image, i, j);
                let gc = cell.grad_count();
                let k1 = if gc == 0 { 0.0 } else { 2.0 * g_s1 / (gc * ch) as f64 };
                let k2 = 2.0 * g_s2 / (cell.rows() * cell.cols() * ch) as f64;
                for y in cell.y0..cell.y1 {
                    for x in cell.x0..cell.x1 {
                        let m = w - 1 - x;
                        for c in 0..ch {
                            let v = image.get(y, x, c);
                            let r = v - image.get(y, m, c);
                            out.data_mut()[(y * w + x) * ch + c] += k2 * r;
                            out.data_mut()[(y * w + m) * ch + c] -= k2 * r;
                            if x + 1 < cell.x1 {
                                let d = image.get(y, x + 1, c) - v;
                                out.data_mut()[(y * w + x + 1) * ch + c] += k1 * d;
                                out.data_mut()[(y * w + x) * ch + c] -= k1 * d;
                            }
                            if y + 1 < cell.y1 {
                                let d = image.get(y + 1, x, c) - v;
                                out.data_mut()[((y + 1) * w + x) * ch + c] += k1 * d;
                                out.data_mut()[(y * w + x) * ch + c] -= k1 * d;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl VisionLanguageEncoder for OracleStub {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode_image_dense(&self, image: &Image) -> Result<DenseEmbedding> {
        check_unit_image(image)?;
        Ok(self.features(image))
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        let table = prompt_table();
        let format = table
            .lookup(prompt)
            .ok_or_else(|| LdpError::UnknownPrompt(prompt.to_string()))?;
        let axis = match format {
            PromptFormat::BlurAware => 1,
            PromptFormat::Difference => 2,
            PromptFormat::DpAware => 3,
        };
        let mut t = vec![0.0; STUB_DIM];
        t[axis] = 1.0;
        Ok(TextEmbedding {
            t,
            prompt: super::canonical_prompt(prompt),
        })
    }

    fn encode_unchecked(&self, image: &Image) -> Result<DenseEmbedding> {
        if image.channels() != 3 {
            return Err(LdpError::domain("encoder input needs 3 channels"));
        }
        Ok(self.features(image))
    }

    fn image_vjp(&self, image: &Image, grad_features: &Image) -> Result<Image> {
        if image.channels() != 3 {
            return Err(LdpError::domain("encoder input needs 3 channels"));
        }
        self.vjp(image, grad_features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random::<f64>())
    }

    fn norms_are_unit(e: &DenseEmbedding) -> bool {
        (0..e.grid_height()).all(|i| {
            (0..e.grid_width()).all(|j| {
                let n: f64 = e.cell(i, j).iter().map(|v| v * v).sum();
                (n.sqrt() - 1.0).abs() < 1e-5
            })
        })
    }

    #[test]
    fn grid_shape_and_norms() {
        let stub = OracleStub::new(16).unwrap();
        let e = stub.encode_image_dense(&noise(64, 64, 1)).unwrap();
        assert_eq!(e.features.shape(), (4, 4, 4));
        assert!(norms_are_unit(&e));
        let e = stub.encode_image_dense(&noise(20, 37, 2)).unwrap();
        assert_eq!(e.features.shape(), (2, 3, 4));
        assert!(norms_are_unit(&e));
    }

    #[test]
    fn mirror_symmetric_image_has_maximal_symmetry_coordinate() {
        let half = noise(24, 16, 3);
        let img = half.hconcat(&half.hflip()).unwrap();
        let e = OracleStub::new(8).unwrap().encode_image_dense(&img).unwrap();
        for i in 0..e.grid_height() {
            for j in 0..e.grid_width() {
                assert_eq!(e.cell(i, j)[3], FRAC_1_SQRT_2);
                assert!(e.cell(i, j)[2].abs() < 1e-15);
            }
        }
    }

    /// Gradient energy of one patch, straight from the definition.
    fn gradient_energy(img: &Image, y0: usize, x0: usize, p: usize) -> f64 {
        let mut s = 0.0;
        let mut n = 0;
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                for c in 0..3 {
                    if x + 1 < x0 + p {
                        s += (img.get(y, x + 1, c) - img.get(y, x, c)).powi(2);
                        n += 1;
                    }
                    if y + 1 < y0 + p {
                        s += (img.get(y + 1, x, c) - img.get(y, x, c)).powi(2);
                        n += 1;
                    }
                }
            }
        }
        s / n as f64
    }

    #[test]
    fn sharp_half_scores_sharper_than_blurred_half() {
        let sharp = noise(32, 32, 4);
        // 5-tap box blur on the right half.
        let img = Image::from_fn(32, 32, 3, |y, x, c| {
            if x < 16 {
                sharp.get(y, x, c)
            } else {
                let mut s = 0.0;
                for dx in -2i32..=2 {
                    let xx = (x as i32 + dx).clamp(16, 31) as usize;
                    s += sharp.get(y, xx, c);
                }
                s / 5.0
            }
        });
        let stub = OracleStub::new(8).unwrap();
        let e = stub.encode_image_dense(&img).unwrap();
        let (mut sharp_sim, mut blur_sim) = (0.0, 0.0);
        let (mut sharp_oracle, mut blur_oracle) = (0.0, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                let st = stub.cell_stats(&img, i, j);
                let oracle = gradient_energy(&img, i * 8, j * 8, 8);
                assert!((st.s1 - oracle).abs() < 1e-12);
                // Sharpness coordinate: cos(πb/2) grows with s1.
                if j < 2 {
                    sharp_sim += e.cell(i, j)[0];
                    sharp_oracle += oracle;
                } else {
                    blur_sim += e.cell(i, j)[0];
                    blur_oracle += oracle;
                }
            }
        }
        assert!(sharp_oracle > blur_oracle);
        assert!(sharp_sim > blur_sim);
    }

    #[test]
    fn flip_equivariance_is_exact() {
        let stub = OracleStub::new(8).unwrap();
        for (h, w, seed) in [(16, 32, 5), (24, 40, 6), (8, 8, 7)] {
            let img = noise(h, w, seed);
            let a = stub.encode_image_dense(&img.hflip()).unwrap();
            let b = stub.encode_image_dense(&img).unwrap().hflip();
            assert!(a == b, "flip equivariance broke at {h}x{w}");
        }
    }

    #[test]
    fn text_table() {
        let stub = OracleStub::new(8).unwrap();
        let sym = stub.encode_text("[A horizontally symmetrical image.]").unwrap();
        let blur = stub.encode_text("[A blurry image.]").unwrap();
        assert_eq!(sym.t, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(blur.t, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(sym.t.iter().zip(&blur.t).map(|(a, b)| a * b).sum::<f64>(), 0.0);
        assert!(matches!(
            stub.encode_text("A photo of a dog."),
            Err(LdpError::UnknownPrompt(_))
        ));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let stub = OracleStub::new(8).unwrap();
        let img = noise(8, 16, 8).map(|v| 0.3 + 0.4 * v);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let upstream = Image::from_fn(1, 2, 4, |_, _, _| rng.random::<f64>() - 0.5);
        let loss = |im: &Image| -> f64 {
            let f = stub.encode_unchecked(im).unwrap().features;
            f.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        let g = stub.image_vjp(&img, &upstream).unwrap();
        let h = 1e-6;
        for idx in [0, 5, 17, 100, 200, 383] {
            let mut p = img.clone();
            p.data_mut()[idx] += h;
            let mut m = img.clone();
            m.data_mut()[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = g.data()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(1e-3),
                "idx {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn deterministic() {
        let stub = OracleStub::new(8).unwrap();
        let img = noise(16, 16, 10);
        assert!(stub.encode_image_dense(&img).unwrap() == stub.encode_image_dense(&img).unwrap());
    }
}
