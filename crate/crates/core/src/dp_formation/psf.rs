use crate::image::Image;

/// At or below this `|d|` both DP kernels collapse to the 1×1 identity.
pub const IDENTITY_DISPARITY: f64 = 0.5;

const SUPERSAMPLE: usize = 4;

/// Square convolution kernel of side `2·radius + 1`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn identity() -> Self {
        Self {
            radius: 0,
            weights: vec![1.0],
        }
    }

    #[inline]
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weight at offset `(dy, dx)` from the center.
    #[inline]
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        let side = self.side() as isize;
        self.weights[((dy + r) * side + (dx + r)) as usize]
    }

    pub fn is_identity(&self) -> bool {
        self.radius == 0
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn hflip(&self) -> Kernel {
        let side = self.side();
        let mut weights = vec![0.0; self.weights.len()];
        for row in 0..side {
            for col in 0..side {
                weights[row * side + col] = self.weights[row * side + (side - 1 - col)];
            }
        }
        Kernel {
            radius: self.radius,
            weights,
        }
    }

    /// Horizontal centroid in pixels (positive = right of center).
    pub fn centroid_x(&self) -> f64 {
        let r = self.radius as isize;
        let mut total = 0.0;
        let mut moment = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let w = self.at(dy, dx);
                total += w;
                moment += w * dx as f64;
            }
        }
        moment / total
    }

    pub fn as_image(&self) -> Image {
        let side = self.side();
        Image::new(side, side, 1, self.weights.clone()).expect("kernel is square")
    }
}

#[derive(Clone, Copy)]
enum Aperture {
    LeftHalf,
    RightHalf,
    Full,
}

/// Area-sampled disk (or half disk) of the given radius, normalized to sum 1.
fn rasterize(radius: f64, aperture: Aperture) -> Kernel {
    let r = radius.ceil() as usize;
    let side = 2 * r + 1;
    let r2 = radius * radius;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut counts = vec![0.0; side * side];
    for row in 0..side {
        let py = row as f64 - r as f64;
        for col in 0..side {
            let px = col as f64 - r as f64;
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                let y = py - 0.5 + (sy as f64 + 0.5) * step;
                for sx in 0..SUPERSAMPLE {
                    let x = px - 0.5 + (sx as f64 + 0.5) * step;
                    if x * x + y * y > r2 {
                        continue;
                    }
                    let inside = match aperture {
                        Aperture::LeftHalf => x < 0.0,
                        Aperture::RightHalf => x > 0.0,
                        Aperture::Full => true,
                    };
                    if inside {
                        hits += 1;
                    }
                }
            }
            counts[row * side + col] = hits as f64;
        }
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        // Radius too small to cover any subsample.
        return Kernel::identity();
    }
    Kernel {
        radius: r,
        weights: counts.into_iter().map(|c| c / total).collect(),
    }
}

/// Left and right view PSFs for signed disparity `d`.
///
/// The left kernel is the left half-disk of radius `|d|·radius_scale` when
/// `d > 0` and the right half-disk when `d < 0`; the right kernel is always
/// its exact horizontal mirror.
pub fn dp_psf_pair(d: f64, radius_scale: f64) -> (Kernel, Kernel) {
    if d.abs() <= IDENTITY_DISPARITY {
        return (Kernel::identity(), Kernel::identity());
    }
    let radius = d.abs() * radius_scale;
    let aperture = if d > 0.0 {
        Aperture::LeftHalf
    } else {
        Aperture::RightHalf
    };
    let left = rasterize(radius, aperture);
    let right = left.hflip();
    (left, right)
}

/// Full-aperture PSF for disparity `d`, what a regular sensor would see.
pub fn disk_kernel(d: f64, radius_scale: f64) -> Kernel {
    if d.abs() <= IDENTITY_DISPARITY {
        return Kernel::identity();
    }
    rasterize(d.abs() * radius_scale, Aperture::Full)
}
