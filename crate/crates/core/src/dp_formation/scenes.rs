//! Procedural scenes: textured fronto-parallel planes and shapes at known
//! depths. Everything is a pure function of the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LensModel, SceneSample};
use crate::error::{LdpError, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// One half at the focal plane, the other half at a fixed disparity.
    TwoPlane,
    /// Background plane plus a few shapes at random disparities; always
    /// contains an in-focus region and a strongly defocused one.
    Layered,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    pub lens: LensModel,
    /// Nearest surface depth (scene units).
    pub depth_min: f64,
    /// Farthest surface depth (scene units).
    pub depth_max: f64,
    /// Defocused-half disparity for [`SceneKind::TwoPlane`].
    pub two_plane_disparity: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            kind: SceneKind::Layered,
            height: 64,
            width: 64,
            lens: LensModel::default(),
            depth_min: 0.58,
            depth_max: 4.0,
            two_plane_disparity: 6.0,
        }
    }
}

/// Smallest `|d|` of the guaranteed defocused surface in a layered scene.
const DEFOCUS_MIN: f64 = 2.5;

impl SceneParams {
    /// Disparities of `depth_min` and `depth_max` under the lens.
    pub fn disparity_range(&self) -> Result<(f64, f64)> {
        let lo = self.lens.disparity(self.depth_min)?;
        let hi = self.lens.disparity(self.depth_max)?;
        Ok((lo.min(0.0), hi.max(0.0)))
    }

    pub fn validate(&self) -> Result<()> {
        self.lens.validate()?;
        if self.height < 8 || self.width < 8 {
            return Err(LdpError::config("data.size", "scenes must be at least 8x8"));
        }
        if !(self.depth_min > 0.0) {
            return Err(LdpError::config("data.depth_min", "must be positive"));
        }
        if !(self.depth_max > self.depth_min) {
            return Err(LdpError::config("data.depth_max", "must exceed data.depth_min"));
        }
        let (dlo, dhi) = self.disparity_range()?;
        if dlo > -DEFOCUS_MIN && dhi < DEFOCUS_MIN {
            return Err(LdpError::config(
                "data.depth_max",
                format!("depth range yields |d| < {DEFOCUS_MIN} everywhere"),
            ));
        }
        if self.two_plane_disparity.abs() > self.lens.max_disparity {
            return Err(LdpError::config(
                "data.two_plane_disparity",
                "exceeds lens.max_disparity",
            ));
        }
        Ok(())
    }
}

/// The fixed evaluation suite: 20 two-plane scenes with seeds
/// `SUITE_FIRST_SEED..SUITE_FIRST_SEED + SUITE_LEN`.
pub const SUITE_FIRST_SEED: u64 = 100;
pub const SUITE_LEN: usize = 20;

pub fn suite_params() -> SceneParams {
    SceneParams {
        kind: SceneKind::TwoPlane,
        ..SceneParams::default()
    }
}

pub fn suite_seeds() -> std::ops::Range<u64> {
    SUITE_FIRST_SEED..SUITE_FIRST_SEED + SUITE_LEN as u64
}

/// Generate one scene from `(params, seed)`.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<SceneSample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match params.kind {
        SceneKind::TwoPlane => two_plane(params, &mut rng),
        SceneKind::Layered => layered(params, &mut rng),
    }
}

fn two_plane(params: &SceneParams, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
    let (h, w) = (params.height, params.width);
    let lens = params.lens;
    let focused = random_texture(h, w, rng);
    let blurred = random_texture(h, w, rng);
    let z_focus = lens.focus_depth;
    let z_blur = lens.depth_for_disparity(params.two_plane_disparity)?;
    // 0: left half sharp, 1: right half sharp, 2: top, 3: bottom.
    let layout = rng.random_range(0..4u32);
    let in_focus = |y: usize, x: usize| match layout {
        0 => x < w / 2,
        1 => x >= w / 2,
        2 => y < h / 2,
        _ => y >= h / 2,
    };
    let sharp = Image::from_fn(h, w, 3, |y, x, c| {
        if in_focus(y, x) {
            focused.get(y, x, c)
        } else {
            blurred.get(y, x, c)
        }
    });
    let depth = Image::from_fn(h, w, 1, |y, x, _| if in_focus(y, x) { z_focus } else { z_blur });
    SceneSample::new(sharp, depth, lens)
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

fn layered(params: &SceneParams, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
    let (h, w) = (params.height, params.width);
    let (hf, wf) = (h as f64, w as f64);
    let lens = params.lens;
    let (dlo, dhi) = params.disparity_range()?;
    // Back off the clamp so depth_for_disparity stays invertible.
    let (dlo, dhi) = (dlo.max(-lens.max_disparity + 1e-9), dhi.min(lens.max_disparity - 1e-9));
    let n_shapes = rng.random_range(1..=3usize);

    // Disparities: one region exactly in focus and one with |d| >= 2.
    let mut disparities = Vec::with_capacity(n_shapes + 1);
    let focus_slot = rng.random_range(0..=n_shapes);
    let mut blur_slot = rng.random_range(0..=n_shapes);
    if blur_slot == focus_slot {
        blur_slot = (blur_slot + 1) % (n_shapes + 1);
    }
    for slot in 0..=n_shapes {
        let d = if slot == focus_slot {
            0.0
        } else if slot == blur_slot {
            let far_ok = dhi >= DEFOCUS_MIN;
            let near_ok = dlo <= -DEFOCUS_MIN;
            if far_ok && (!near_ok || rng.random_bool(0.5)) {
                rng.random_range(DEFOCUS_MIN..=dhi)
            } else {
                -rng.random_range(DEFOCUS_MIN..=-dlo)
            }
        } else {
            rng.random_range(dlo..=dhi)
        };
        disparities.push(d);
    }

    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        if rng.random_bool(0.5) {
            let sh = rng.random_range(0.3..0.6) * hf;
            let sw = rng.random_range(0.3..0.6) * wf;
            let y0 = rng.random_range(0.0..(hf - sh));
            let x0 = rng.random_range(0.0..(wf - sw));
            shapes.push(Shape::Rect {
                y0,
                x0,
                y1: y0 + sh,
                x1: x0 + sw,
            });
        } else {
            let r = rng.random_range(0.18..0.32) * hf.min(wf);
            shapes.push(Shape::Disk {
                cy: rng.random_range(r..hf - r),
                cx: rng.random_range(r..wf - r),
                r,
            });
        }
    }

    let textures: Vec<Image> = (0..=n_shapes).map(|_| random_texture(h, w, rng)).collect();
    let depths: Vec<f64> = disparities
        .iter()
        .map(|&d| lens.depth_for_disparity(d))
        .collect::<Result<_>>()?;

    // Later shapes are drawn on top; occlusion order is determined by depth in
    // the renderer, so the map only says which surface owns each pixel.
    let mut owner = vec![0usize; h * w];
    for (s, shape) in shapes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    owner[y * w + x] = s + 1;
                }
            }
        }
    }
    // Keep both the focused and the defocused surface visible.
    for slot in [focus_slot, blur_slot] {
        if !owner.contains(&slot) {
            let (y0, x0) = (h / 4, if slot == focus_slot { 0 } else { w / 2 });
            for y in y0..y0 + h / 2 {
                for x in x0..x0 + w / 2 {
                    owner[y * w + x] = slot;
                }
            }
        }
    }

    let sharp = Image::from_fn(h, w, 3, |y, x, c| textures[owner[y * w + x]].get(y, x, c));
    let depth = Image::from_fn(h, w, 1, |y, x, _| depths[owner[y * w + x]]);
    SceneSample::new(sharp, depth, lens)
}

/// A random procedural texture with values in `[0,1]`.
pub fn random_texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let pattern = match rng.random_range(0..4u32) {
        0 => value_noise(h, w, rng.random_range(3.0..8.0), 3, rng),
        1 => checker(h, w, rng.random_range(3..9usize), rng),
        2 => stripes(h, w, rng),
        _ => glyphs(h, w, rng),
    };
    // Fine grain everywhere so no region is textureless.
    let grain = value_noise(h, w, 2.0, 1, rng);
    Image::from_fn(h, w, 3, |y, x, c| {
        let t = (0.85 * pattern.get(y, x, 0) + 0.15 * grain.get(y, x, 0)).clamp(0.0, 1.0);
        (c0[c] + (c1[c] - c0[c]) * t).clamp(0.0, 1.0)
    })
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave lattice value noise, single channel in `[0,1]`.
pub fn value_noise(h: usize, w: usize, period: f64, octaves: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut out = Image::zeros(h, w, 1);
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut p = period;
    for _ in 0..octaves {
        let gh = (h as f64 / p).ceil() as usize + 2;
        let gw = (w as f64 / p).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
        for y in 0..h {
            let fy = y as f64 / p;
            let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / p;
                let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let v00 = lattice[iy * gw + ix];
                let v01 = lattice[iy * gw + ix + 1];
                let v10 = lattice[(iy + 1) * gw + ix];
                let v11 = lattice[(iy + 1) * gw + ix + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                let v = top + (bot - top) * ty;
                let cur = out.get(y, x, 0);
                out.set(y, x, 0, cur + amp * v);
            }
        }
        total += amp;
        amp *= 0.5;
        p = (p / 2.0).max(1.5);
    }
    out.map(|v| v / total)
}

fn checker(h: usize, w: usize, period: usize, rng: &mut ChaCha8Rng) -> Image {
    let oy = rng.random_range(0..period);
    let ox = rng.random_range(0..period);
    Image::from_fn(h, w, 1, |y, x, _| {
        if ((y + oy) / period + (x + ox) / period).is_multiple_of(2) {
            0.0
        } else {
            1.0
        }
    })
}

fn stripes(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(3.0..9.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = angle.sin_cos();
    Image::from_fn(h, w, 1, |y, x, _| {
        let u = x as f64 * c + y as f64 * s;
        0.5 + 0.5 * (std::f64::consts::TAU * u / period + phase).sin()
    })
}

/// Text-like strokes: short dark bars and blocks on a light ground.
fn glyphs(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::filled(h, w, 1, 1.0);
    let cell = rng.random_range(6..10usize);
    for gy in (0..h).step_by(cell) {
        for gx in (0..w).step_by(cell) {
            let strokes = rng.random_range(1..4usize);
            for _ in 0..strokes {
                let horizontal = rng.random_bool(0.5);
                let len = rng.random_range(2..cell);
                let y0 = gy + rng.random_range(0..cell - 1);
                let x0 = gx + rng.random_range(0..cell - 1);
                for t in 0..len {
                    let (y, x) = if horizontal { (y0, x0 + t) } else { (y0 + t, x0) };
                    if y < h && x < w {
                        img.set(y, x, 0, 0.0);
                    }
                }
            }
        }
    }
    img
}
