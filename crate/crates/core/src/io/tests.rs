use super::*;
use crate::deblur_net::{DeblurNet, NetConfig, Variant};
use crate::dp_formation::{render_dp_pair, scenes};

fn ramp(h: usize, w: usize, c: usize) -> Image {
    Image::from_fn(h, w, c, |y, x, ch| ((y * 7 + x * 3 + ch * 11) % 97) as f64 / 96.0)
}

#[test]
fn png_roundtrip_within_quantization() {
    let img = ramp(5, 7, 3);
    for (depth, step) in [(PngDepth::Eight, 255.0), (PngDepth::Sixteen, 65535.0)] {
        let back = decode_png(&encode_png(&img, depth).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img) <= 0.5 / step + 1e-12);
    }
    let gray = ramp(4, 3, 1);
    assert_eq!(decode_png(&encode_png(&gray, PngDepth::Eight).unwrap()).unwrap().channels(), 1);
}

#[test]
fn png_codes_are_exact_and_bytes_deterministic() {
    let img = Image::from_fn(2, 2, 3, |y, x, c| ((y * 2 + x) * 3 + c) as f64 / 255.0);
    let a = encode_png(&img, PngDepth::Eight).unwrap();
    assert_eq!(a, encode_png(&img, PngDepth::Eight).unwrap());
    assert_eq!(decode_png(&a).unwrap(), img);
}

#[test]
fn png_rejects_bad_input() {
    assert!(encode_png(&Image::zeros(2, 2, 2), PngDepth::Eight).is_err());
    assert!(encode_png(&Image::filled(2, 2, 3, f64::NAN), PngDepth::Eight).is_err());
    assert!(matches!(decode_png(b"not a png"), Err(LdpError::Data(_))));
}

#[test]
fn pfm_layout_matches_hand_built_bytes() {
    // 2x1 gray map; the bottom row comes first in the file.
    let img = Image::new(2, 1, 1, vec![1.5, -2.0]).unwrap();
    let mut expect = b"Pf\n1 2\n-1.0\n".to_vec();
    expect.extend_from_slice(&(-2.0f32).to_le_bytes());
    expect.extend_from_slice(&1.5f32.to_le_bytes());
    assert_eq!(encode_pfm(&img).unwrap(), expect);
}

#[test]
fn pfm_roundtrip_and_big_endian() {
    let img = ramp(3, 4, 3).map(|v| v * 10.0 - 3.0);
    let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
    let as_f32 = img.map(|v| v as f32 as f64);
    assert_eq!(back, as_f32);

    let mut be = b"Pf 2 1 1.0\n".to_vec();
    be.extend_from_slice(&0.25f32.to_be_bytes());
    be.extend_from_slice(&(-8.0f32).to_be_bytes());
    let m = decode_pfm(&be).unwrap();
    assert_eq!(m.data(), &[0.25, -8.0]);
    assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0").is_err());
}

#[test]
fn checkpoint_roundtrip_and_validation() {
    let cfg = NetConfig {
        widths: Some(vec![4, 6, 8]),
        ..NetConfig::small().with_variant(Variant::Concat)
    };
    let net = DeblurNet::new(cfg.clone()).unwrap();
    let ckpt = Checkpoint {
        net: cfg.clone(),
        params: net.init_params(3),
        meta: serde_json::json!({"step": 7}),
    };
    let bytes = encode_checkpoint(&ckpt).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(decode_checkpoint(&wrong_magic).is_err());
    let mut wrong_version = bytes.clone();
    wrong_version[8] = 9;
    assert!(decode_checkpoint(&wrong_version).unwrap_err().to_string().contains("version"));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    let short = Checkpoint {
        params: vec![0.0; 3],
        ..ckpt
    };
    assert!(matches!(encode_checkpoint(&short), Err(LdpError::Shape(_))));
}

#[test]
fn dataset_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let params = scenes::SceneParams {
        height: 16,
        width: 16,
        ..Default::default()
    };
    let scene = scenes::generate_scene(&params, 5).unwrap();
    let (pair, disparity, mask) = render_dp_pair(&scene, 8).unwrap();
    let rec = SceneRecord {
        pair,
        gt: Some(scene.sharp_image.clone()),
        disparity: Some(disparity.clone()),
        mask: Some(mask.clone()),
        meta: SceneMeta {
            lens: scene.lens,
            height: 16,
            width: 16,
            seed: Some(5),
            kind: Some(params.kind),
            n_layers: Some(8),
        },
    };
    write_scene(&dir.path().join("scene_0000"), &rec).unwrap();
    write_manifest(
        dir.path(),
        &Manifest::new(vec![ManifestEntry {
            name: "scene_0000".into(),
            seed: 5,
            kind: params.kind,
            lens: scene.lens,
        }]),
    )
    .unwrap();
    let all = read_dataset(dir.path()).unwrap();
    assert_eq!(all.len(), 1);
    let back = &all[0].1;
    assert_eq!(back.meta, rec.meta);
    assert_eq!(back.mask.as_ref().unwrap(), &mask);
    assert!(back.pair.left.max_abs_diff(&rec.pair.left) < 1e-5);
    assert!(back.gt.as_ref().unwrap().max_abs_diff(&scene.sharp_image) < 1e-5);
    assert!(back.disparity.as_ref().unwrap().d.max_abs_diff(&disparity.d) < 1e-5);

    std::fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap().len(), 1);
    assert!(read_dataset(&dir.path().join("scene_0000")).is_err());
}
