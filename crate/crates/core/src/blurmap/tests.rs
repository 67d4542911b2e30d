use super::*;
use crate::dp_formation::scenes::{generate_scene, SceneKind, SceneParams};
use crate::dp_formation::{render_dp_pair, LensModel, SceneSample};
use crate::vl_encoder::OracleStub;
use rand::{Rng, SeedableRng};

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn noise(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(h, w, 3, |_, _, _| r.random::<f64>())
}

fn stub() -> OracleStub {
    OracleStub::new(8).unwrap()
}

/// AUC straight from its definition: fraction of (positive, negative)
/// pairs ranked correctly, ties counting half.
fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn coherent(m: &BlurMap) -> bool {
    m.raw
        .data()
        .iter()
        .zip(m.normalized.data())
        .all(|(&r, &n)| r.is_finite() && (logistic(r) - n).abs() < 1e-6 && (0.0..=1.0).contains(&n))
}

#[test]
fn eta_dp_aware_examples() {
    let x = noise(6, 5, 1);
    let same = DPPair::new(x.clone(), x.clone()).unwrap();
    let e = eta_dp_aware(&same).unwrap();
    assert_eq!(e, e.hflip());

    let (l, r) = (noise(4, 5, 2), noise(4, 5, 3));
    let e = eta_dp_aware(&DPPair::new(l.clone(), r.clone()).unwrap()).unwrap();
    assert_eq!(e.shape(), (4, 10, 3));
    for y in 0..4 {
        for j in 0..5 {
            for c in 0..3 {
                assert_eq!(e.get(y, j, c), l.get(y, j, c));
                assert_eq!(e.get(y, 2 * 5 - 1 - j, c), r.get(y, j, c));
            }
        }
    }
    let bad = DPPair {
        left: noise(4, 5, 4),
        right: noise(4, 6, 5),
    };
    assert!(matches!(eta_dp_aware(&bad), Err(LdpError::Domain(_))));
}

#[test]
fn eta_dp_aware_on_focal_plane_render() {
    let lens = LensModel::default();
    let scene = SceneSample::new(noise(16, 12, 6), Image::filled(16, 12, 1, 1.0), lens).unwrap();
    let (pair, _, _) = render_dp_pair(&scene, 9).unwrap();
    let e = eta_dp_aware(&pair).unwrap();
    assert!(e.max_abs_diff(&e.hflip()) < 1e-6);
}

fn embedding(features: Image) -> DenseEmbedding {
    DenseEmbedding {
        features,
        patch_size: 8,
    }
}

fn random_unit_grid(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let mut f = Image::from_fn(h, w, c, |_, _, _| r.random::<f64>() - 0.5);
    for px in f.data_mut().chunks_exact_mut(c) {
        normalize_in_place(px);
    }
    f
}

#[test]
fn alpha_pool_examples() {
    // Mirror-symmetric grid is unchanged.
    let half = random_unit_grid(3, 2, 4, 7);
    let grid = half.hconcat(&half.hflip()).unwrap();
    let pooled = alpha_pool(&embedding(grid)).unwrap();
    assert!(pooled.features.max_abs_diff(&half) < 1e-15);

    // e1 on the left, e2 on the right.
    let grid = Image::from_fn(2, 4, 3, |_, x, c| {
        if (x < 2 && c == 0) || (x >= 2 && c == 1) {
            1.0
        } else {
            0.0
        }
    });
    let pooled = alpha_pool(&embedding(grid)).unwrap();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..2 {
        for j in 0..2 {
            let cell = pooled.cell(i, j);
            assert!((cell[0] - s).abs() < 1e-15 && (cell[1] - s).abs() < 1e-15 && cell[2] == 0.0);
        }
    }

    assert!(matches!(
        alpha_pool(&embedding(Image::zeros(2, 3, 4))),
        Err(LdpError::Shape(_))
    ));
}

#[test]
fn alpha_pool_matches_loop_oracle() {
    let grid = random_unit_grid(3, 6, 5, 8);
    let pooled = alpha_pool(&embedding(grid.clone())).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let mut avg: Vec<f64> = (0..5)
                .map(|k| 0.5 * grid.get(i, j, k) + 0.5 * grid.get(i, 6 - 1 - j, k))
                .collect();
            let n = avg.iter().map(|v| v * v).sum::<f64>().sqrt();
            avg.iter_mut().for_each(|v| *v /= n);
            for k in 0..5 {
                assert!((pooled.cell(i, j)[k] - avg[k]).abs() < 1e-12);
            }
        }
    }
}

fn text(t: Vec<f64>) -> TextEmbedding {
    TextEmbedding {
        t,
        prompt: String::new(),
    }
}

#[test]
fn similarity_examples() {
    let grid = random_unit_grid(2, 3, 4, 9);
    let cell: Vec<f64> = grid.pixel(1, 2).to_vec();
    let sim = similarity_map(&embedding(grid.clone()), &text(cell)).unwrap();
    assert!((sim.get(1, 2, 0) - 1.0).abs() < 1e-15);

    let f = Image::from_fn(1, 1, 4, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
    let sim = similarity_map(&embedding(f), &text(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
    assert_eq!(sim.get(0, 0, 0), 0.0);

    let mut t = vec![0.3, -0.2, 0.5, 0.1];
    normalize_in_place(&mut t);
    let sim = similarity_map(&embedding(grid.clone()), &text(t.clone())).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            let mut dot = 0.0;
            for k in 0..4 {
                dot += grid.get(i, j, k) * t[k];
            }
            assert!((sim.get(i, j, 0) - dot).abs() < 1e-12);
        }
    }
    assert!(matches!(
        similarity_map(&embedding(grid), &text(vec![1.0, 0.0])),
        Err(LdpError::Domain(_))
    ));
}

#[test]
fn sigma_examples() {
    let p = SigmaParams {
        tau: 0.1,
        center: Centering::Fixed(0.3),
    };
    let m = Image::filled(2, 2, 1, 0.3);
    assert!(sigma(&m, &p).unwrap().data().iter().all(|&v| v == 0.5));

    let mut r = rng(10);
    let x = Image::from_fn(5, 7, 1, |_, _, _| 0.3 + 0.6 * (r.random::<f64>() - 0.5));
    let back = sigma_inv(&sigma(&x, &p).unwrap(), 0.1, 0.3).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-9);

    let mean = SigmaParams {
        tau: 0.05,
        center: Centering::ImageMean,
    };
    let flat = Image::filled(3, 3, 1, 0.71);
    assert!(sigma(&flat, &mean).unwrap().data().iter().all(|&v| v == 0.5));

    assert!(matches!(
        sigma_inv(&Image::filled(1, 2, 1, 1.0), 0.1, 0.0),
        Err(LdpError::Domain(_))
    ));
}

fn scene(kind: SceneKind, seed: u64) -> SceneSample {
    let params = SceneParams {
        kind,
        ..SceneParams::default()
    };
    generate_scene(&params, seed).unwrap()
}

fn with_depth(s: &SceneSample, z: f64) -> SceneSample {
    SceneSample::new(s.sharp_image.clone(), Image::filled(64, 64, 1, z), s.lens).unwrap()
}

#[test]
fn blur_aware_sharp_scene_scores_lower_than_defocused() {
    let enc = stub();
    let prompts = PromptSet::default().blur_aware;
    let s = scene(SceneKind::Layered, 11);
    let (sharp, _, _) = render_dp_pair(&with_depth(&s, s.lens.focus_depth), 33).unwrap();
    let far = s.lens.depth_for_disparity(6.0).unwrap();
    let (blurred, _, _) = render_dp_pair(&with_depth(&s, far), 33).unwrap();
    let a = estimate_blur_aware(&sharp, &prompts, &enc).unwrap();
    let b = estimate_blur_aware(&blurred, &prompts, &enc).unwrap();
    assert!(coherent(&a) && coherent(&b));
    assert!(a.normalized.mean() < b.normalized.mean());
}

#[test]
fn constant_image_gives_constant_map() {
    let enc = stub();
    let flat = Image::filled(20, 28, 3, 0.4);
    let pair = DPPair::new(flat.clone(), flat).unwrap();
    for m in [
        estimate_blur_aware(&pair, &PromptSet::default().blur_aware, &enc).unwrap(),
        estimate_dp_aware(&pair, &PromptSet::default().dp_aware, &enc).unwrap(),
    ] {
        let (lo, hi) = m.raw.min_max();
        assert_eq!(lo, hi);
        assert_eq!(m.raw.shape(), (20, 28, 1));
    }
}

#[test]
fn blur_aware_half_sharp_composite_auc() {
    let enc = stub();
    let s = scene(SceneKind::TwoPlane, 12);
    let (pair, d, mask) = render_dp_pair(&s, 33).unwrap();
    let m = estimate_blur_aware(&pair, &PromptSet::default().blur_aware, &enc).unwrap();
    let auc = auc_pairs(m.normalized.data(), &mask.labels());
    assert!(auc >= 0.95, "AUC {auc}");
    assert!(d.d.data().contains(&0.0));
}

#[test]
fn dp_aware_focal_plane_is_below_half() {
    let enc = stub();
    for seed in 0..4 {
        let s = scene(SceneKind::Layered, 20 + seed);
        let (pair, _, _) = render_dp_pair(&with_depth(&s, s.lens.focus_depth), 33).unwrap();
        let m = estimate_dp_aware(&pair, &PromptSet::default().dp_aware, &enc).unwrap();
        assert!(coherent(&m));
        assert!(m.normalized.data().iter().all(|&v| v <= 0.5 + 1e-3));
    }
}

/// Shift the right view by `k` pixels with edge clamping.
fn shift(img: &Image, k: usize) -> Image {
    Image::from_fn(img.height(), img.width(), 3, |y, x, c| {
        img.get(y, x.saturating_sub(k), c)
    })
}

#[test]
fn equal_views_maximize_symmetry_logits() {
    let enc = stub();
    let sigma = SigmaParams::for_encoder(EncoderKind::OracleStub);
    let prompts = PromptSet::default().dp_aware;
    let x = noise(16, 24, 13);
    let base = dp_symmetry_logits(&DPPair::new(x.clone(), x.clone()).unwrap(), &prompts, &enc, &sigma)
        .unwrap();
    let mut best = base.clone();
    for k in 1..=4 {
        let pair = DPPair::new(x.clone(), shift(&x, k)).unwrap();
        let l = dp_symmetry_logits(&pair, &prompts, &enc, &sigma).unwrap();
        for (b, v) in best.data_mut().iter_mut().zip(l.data()) {
            *b = b.max(*v);
        }
    }
    assert_eq!(best, base);
}

#[test]
fn dp_aware_two_plane_separates() {
    let enc = stub();
    let s = scene(SceneKind::TwoPlane, 14);
    let (pair, _, mask) = render_dp_pair(&s, 33).unwrap();
    let m = estimate_dp_aware(&pair, &PromptSet::default().dp_aware, &enc).unwrap();
    let (mut blur, mut nb, mut sharp, mut ns) = (0.0, 0, 0.0, 0);
    for (&v, &l) in m.normalized.data().iter().zip(mask.mask.data()) {
        if l > 0.5 {
            blur += v;
            nb += 1;
        } else {
            sharp += v;
            ns += 1;
        }
    }
    assert!(blur / nb as f64 > sharp / ns as f64);
}

fn random_map(seed: u64, format: MapFormat) -> BlurMap {
    let mut r = rng(seed);
    BlurMap::from_raw(
        Image::from_fn(5, 6, 1, |_, _, _| 8.0 * r.random::<f64>() - 4.0),
        format,
    )
}

#[test]
fn ensemble_examples() {
    let a = random_map(15, MapFormat::DpAware);
    let e = ensemble(std::slice::from_ref(&a)).unwrap();
    assert_eq!(e.raw, a.raw);
    assert_eq!(e.normalized, a.normalized);
    assert_eq!(e.source_format, MapFormat::Ensemble);
    let e = ensemble(&[a.clone(), a.clone()]).unwrap();
    assert_eq!(e.raw, a.raw);
    assert!(matches!(ensemble(&[]), Err(LdpError::Domain(_))));
}

#[test]
fn ensemble_is_order_invariant() {
    let maps: Vec<BlurMap> = (0..8).map(|s| random_map(30 + s, MapFormat::BlurAware)).collect();
    let fwd = ensemble(&maps).unwrap();
    let mut rev = maps.clone();
    rev.reverse();
    rev.swap(1, 5);
    assert_eq!(ensemble(&rev).unwrap(), fwd);
    assert!(coherent(&fwd));
}

#[test]
fn ensemble_of_eight_prompts_on_two_plane_scene() {
    let enc = stub();
    let prompts = PromptSet::default();
    let s = scene(SceneKind::TwoPlane, 16);
    let (pair, _, mask) = render_dp_pair(&s, 33).unwrap();
    let labels = mask.labels();
    let ba = estimate_blur_aware(&pair, &prompts.blur_aware, &enc).unwrap();
    let dp = estimate_dp_aware(&pair, &prompts.dp_aware, &enc).unwrap();
    let ens = estimate_ensemble(&pair, &prompts, &enc).unwrap();
    assert!(coherent(&ens));
    let best = auc_pairs(ba.normalized.data(), &labels).max(auc_pairs(dp.normalized.data(), &labels));
    assert!(auc_pairs(ens.normalized.data(), &labels) >= best - 0.02);
}

#[test]
fn difference_variant_runs() {
    let enc = stub();
    let s = scene(SceneKind::TwoPlane, 17);
    let (pair, _, _) = render_dp_pair(&s, 9).unwrap();
    let m = estimate(&pair, MapFormat::Difference, &PromptSet::default(), &enc).unwrap();
    assert_eq!(m.source_format, MapFormat::Difference);
    assert!(coherent(&m));
}

#[test]
fn odd_sizes_are_padded_and_cropped() {
    let enc = stub();
    let pair = DPPair::new(noise(13, 21, 18), noise(13, 21, 19)).unwrap();
    for f in [MapFormat::BlurAware, MapFormat::DpAware, MapFormat::Ensemble] {
        let m = estimate(&pair, f, &PromptSet::default(), &enc).unwrap();
        assert_eq!(m.raw.shape(), (13, 21, 1));
        assert!(coherent(&m));
    }
}

#[test]
fn blur_aware_gradient_matches_map_and_finite_differences() {
    let enc = stub();
    let sigma = SigmaParams::for_encoder(EncoderKind::OracleStub);
    let prompts = PromptSet::default().blur_aware;
    let img = noise(12, 20, 20).map(|v| 0.2 + 0.6 * v);
    let (value, grad) = blur_aware_mean_and_grad(&img, &prompts, &enc, &sigma).unwrap();
    let map = blur_aware_of_image(&img, &prompts, &enc, &sigma).unwrap();
    assert!((value - map.raw.mean()).abs() < 1e-12);

    let h = 1e-6;
    for idx in [0, 31, 100, 377, 500, 719] {
        let mut p = img.clone();
        p.data_mut()[idx] += h;
        let mut m = img.clone();
        m.data_mut()[idx] -= h;
        let fp = blur_aware_mean_and_grad(&p, &prompts, &enc, &sigma).unwrap().0;
        let fm = blur_aware_mean_and_grad(&m, &prompts, &enc, &sigma).unwrap().0;
        let fd = (fp - fm) / (2.0 * h);
        assert!(
            (fd - grad.data()[idx]).abs() <= 1e-5 * fd.abs().max(1e-4),
            "{idx}: {fd} vs {}",
            grad.data()[idx]
        );
    }
}
