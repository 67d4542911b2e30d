use crate::image::Image;

/// Source coordinate and blend weight for output index `i` when resizing
/// `n_in → n_out` samples with half-pixel centers.
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize of a single-channel map (half-pixel centers, clamped
/// at the borders). Output values stay within the input's range.
pub fn upsample_map(map: &Image, height: usize, width: usize) -> Image {
    let (h, w) = (map.height(), map.width());
    let cols: Vec<_> = (0..width).map(|x| source_coord(x, w, width)).collect();
    let mut out = Image::zeros(height, width, 1);
    for y in 0..height {
        let (y0, y1, fy) = source_coord(y, h, height);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = (1.0 - fx) * map.get(y0, x0, 0) + fx * map.get(y0, x1, 0);
            let bottom = (1.0 - fx) * map.get(y1, x0, 0) + fx * map.get(y1, x1, 0);
            out.set(y, x, 0, (1.0 - fy) * top + fy * bottom);
        }
    }
    out
}

/// Adjoint of [`upsample_map`]: scatters a gradient on the `height × width`
/// output back onto the `h × w` source grid.
pub fn upsample_adjoint(grad: &Image, h: usize, w: usize) -> Image {
    let (height, width) = (grad.height(), grad.width());
    let mut out = Image::zeros(h, w, 1);
    for y in 0..height {
        let (y0, y1, fy) = source_coord(y, h, height);
        for x in 0..width {
            let (x0, x1, fx) = source_coord(x, w, width);
            let g = grad.get(y, x, 0);
            let d = out.data_mut();
            d[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
            d[y0 * w + x1] += (1.0 - fy) * fx * g;
            d[y1 * w + x0] += fy * (1.0 - fx) * g;
            d[y1 * w + x1] += fy * fx * g;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_stays_constant() {
        let m = Image::filled(3, 2, 1, 0.7);
        let u = upsample_map(&m, 9, 8);
        assert!(u.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn step_is_monotone() {
        let m = Image::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let u = upsample_map(&m, 2, 4);
        for y in 0..2 {
            for x in 1..4 {
                assert!(u.get(y, x, 0) >= u.get(y, x - 1, 0));
            }
        }
    }

    /// Textbook bilinear: map each output center into source pixel units and
    /// weight the four surrounding samples.
    fn bilinear_oracle(m: &Image, oh: usize, ow: usize) -> Image {
        let (h, w) = (m.height() as f64, m.width() as f64);
        Image::from_fn(oh, ow, 1, |y, x, _| {
            let sy = ((y as f64 + 0.5) * h / oh as f64 - 0.5).max(0.0).min(h - 1.0);
            let sx = ((x as f64 + 0.5) * w / ow as f64 - 0.5).max(0.0).min(w - 1.0);
            let (iy, ix) = (sy.floor(), sx.floor());
            let (dy, dx) = (sy - iy, sx - ix);
            let at = |yy: f64, xx: f64| m.get(yy.min(h - 1.0) as usize, xx.min(w - 1.0) as usize, 0);
            at(iy, ix) * (1.0 - dy) * (1.0 - dx)
                + at(iy, ix + 1.0) * (1.0 - dy) * dx
                + at(iy + 1.0, ix) * dy * (1.0 - dx)
                + at(iy + 1.0, ix + 1.0) * dy * dx
        })
    }

    #[test]
    fn random_map_matches_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = Image::from_fn(4, 4, 1, |_, _, _| rng.random::<f64>());
        for (oh, ow) in [(16, 16), (13, 29), (4, 4)] {
            let u = upsample_map(&m, oh, ow);
            assert!(u.max_abs_diff(&bilinear_oracle(&m, oh, ow)) < 1e-9);
            let (lo, hi) = m.min_max();
            assert!(u.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Image::from_fn(3, 5, 1, |_, _, _| rng.random::<f64>());
        let g = Image::from_fn(12, 17, 1, |_, _, _| rng.random::<f64>());
        let lhs: f64 = upsample_map(&m, 12, 17).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample_adjoint(&g, 3, 5).data().iter().zip(m.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
