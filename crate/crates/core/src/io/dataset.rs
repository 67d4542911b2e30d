//! Dataset directories: one subdirectory per scene holding `left.png`,
//! `right.png`, `gt.png`, `disparity.pfm`, `mask.png` and `scene.json`,
//! plus a `manifest.json` at the top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_png, write_png, PngDepth};
use crate::dp_formation::scenes::SceneKind;
use crate::dp_formation::{BlurMask, DPPair, DisparityMap, LensModel};
use crate::error::{LdpError, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub lens: LensModel,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub kind: Option<SceneKind>,
    #[serde(default)]
    pub n_layers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub pair: DPPair,
    pub gt: Option<Image>,
    pub disparity: Option<DisparityMap>,
    pub mask: Option<BlurMask>,
    pub meta: SceneMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Subdirectory name.
    pub name: String,
    pub seed: u64,
    pub kind: SceneKind,
    pub lens: LensModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(scenes: Vec<ManifestEntry>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            scenes,
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| LdpError::Data(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = super::read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| LdpError::Data(format!("{}: {e}", path.display())))
}

pub fn write_scene(dir: &Path, rec: &SceneRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LdpError::io(dir, e))?;
    write_png(&dir.join("left.png"), &rec.pair.left, PngDepth::Sixteen)?;
    write_png(&dir.join("right.png"), &rec.pair.right, PngDepth::Sixteen)?;
    if let Some(gt) = &rec.gt {
        write_png(&dir.join("gt.png"), gt, PngDepth::Sixteen)?;
    }
    if let Some(d) = &rec.disparity {
        super::write_pfm(&dir.join("disparity.pfm"), &d.d)?;
    }
    if let Some(m) = &rec.mask {
        write_png(&dir.join("mask.png"), &m.mask, PngDepth::Eight)?;
    }
    super::write_bytes(&dir.join("scene.json"), &to_json(&rec.meta)?)
}

/// Read one scene. Only the two views are required; `scene.json` falls back
/// to the default lens when missing.
pub fn read_scene(dir: &Path) -> Result<SceneRecord> {
    let left = read_png(&dir.join("left.png"))?;
    let right = read_png(&dir.join("right.png"))?;
    if left.channels() != 3 || right.channels() != 3 {
        return Err(LdpError::Data(format!("{}: views must be RGB", dir.display())));
    }
    let pair = DPPair::new(left, right)?;
    let optional = |name: &str| -> Option<PathBuf> { Some(dir.join(name)).filter(|p| p.exists()) };
    let gt = optional("gt.png").map(|p| read_png(&p)).transpose()?;
    let disparity = optional("disparity.pfm")
        .map(|p| super::read_pfm(&p).map(|d| DisparityMap { d }))
        .transpose()?;
    let mask = optional("mask.png").map(|p| read_png(&p).map(|mask| BlurMask { mask })).transpose()?;
    let meta = match optional("scene.json") {
        Some(p) => from_json(&p)?,
        None => SceneMeta {
            lens: LensModel::default(),
            height: pair.height(),
            width: pair.width(),
            seed: None,
            kind: None,
            n_layers: None,
        },
    };
    let (h, w) = (pair.height(), pair.width());
    let fits = |img: &Image| img.height() == h && img.width() == w;
    if gt.as_ref().is_some_and(|g| !fits(g) || g.channels() != 3)
        || disparity.as_ref().is_some_and(|d| !fits(&d.d))
        || mask.as_ref().is_some_and(|m| !fits(&m.mask))
    {
        return Err(LdpError::Data(format!("{}: files disagree in size", dir.display())));
    }
    Ok(SceneRecord {
        pair,
        gt,
        disparity,
        mask,
        meta,
    })
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    super::write_bytes(&dir.join(MANIFEST_FILE), &to_json(manifest)?)
}

/// Read every scene of a dataset in manifest order, or in sorted
/// subdirectory order when there is no manifest.
pub fn read_dataset(dir: &Path) -> Result<Vec<(String, SceneRecord)>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let names: Vec<String> = if manifest_path.exists() {
        let m: Manifest = from_json(&manifest_path)?;
        if m.version != MANIFEST_VERSION {
            return Err(LdpError::Data(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        m.scenes.into_iter().map(|s| s.name).collect()
    } else {
        let mut names = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| LdpError::io(dir, e))? {
            let entry = entry.map_err(|e| LdpError::io(dir, e))?;
            if entry.path().join("left.png").exists() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        names
    };
    if names.is_empty() {
        return Err(LdpError::Data(format!("{}: no scenes found", dir.display())));
    }
    names
        .into_iter()
        .map(|n| read_scene(&dir.join(&n)).map(|r| (n, r)))
        .collect()
}
