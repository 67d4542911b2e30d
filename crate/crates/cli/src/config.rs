//! `RunConfig`: one JSON document with `data`, `encoder`, `net`, `loss`,
//! `train` and `eval` sections. Every field may be omitted.

use std::path::{Path, PathBuf};

use ldp_core::blurmap::{MapFormat, PromptSet};
use ldp_core::deblur_net::NetConfig;
use ldp_core::dp_formation::scenes::{self, SceneKind, SceneParams};
use ldp_core::dp_formation::LensModel;
use ldp_core::losses::LossConfig;
use ldp_core::train_eval::TrainConfig;
use ldp_core::vl_encoder::EncoderSpec;
use ldp_core::{LdpError, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            net: NetConfig::small(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Defaults reproduce the 20-scene evaluation suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_scenes: usize,
    pub first_seed: u64,
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    pub lens: LensModel,
    pub depth_min: f64,
    pub depth_max: f64,
    pub two_plane_disparity: f64,
    /// Depth layers used by the renderer.
    pub n_layers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = scenes::suite_params();
        Self {
            n_scenes: scenes::suite_seeds().count(),
            first_seed: scenes::suite_seeds().start,
            kind: p.kind,
            height: p.height,
            width: p.width,
            lens: p.lens,
            depth_min: p.depth_min,
            depth_max: p.depth_max,
            two_plane_disparity: p.two_plane_disparity,
            n_layers: ldp_core::dp_formation::RenderOptions::default().n_layers,
        }
    }
}

impl DataConfig {
    pub fn scene_params(&self) -> Result<SceneParams> {
        if self.n_layers == 0 {
            return Err(LdpError::config("data.n_layers", "must be positive"));
        }
        let p = SceneParams {
            kind: self.kind,
            height: self.height,
            width: self.width,
            lens: self.lens,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            two_plane_disparity: self.two_plane_disparity,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    #[default]
    Stub,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderChoice,
    /// Pretrained weights; `$LDP_WEIGHTS` when absent.
    pub weights: Option<PathBuf>,
    /// Prompt format of the map fed to the network.
    pub map_format: MapFormat,
    pub prompts: PromptSet,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderChoice::Stub,
            weights: None,
            map_format: MapFormat::Ensemble,
            prompts: PromptSet::default(),
        }
    }
}

impl EncoderConfig {
    pub fn spec(&self) -> EncoderSpec {
        match self.kind {
            EncoderChoice::Stub => EncoderSpec::stub(),
            EncoderChoice::Pretrained => EncoderSpec::pretrained(self.weights.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Warm timing runs; the median is reported.
    pub timing_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { timing_runs: 10 }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| LdpError::config("config", e.to_string()))?;
        if let Some(v) = value.get("version") {
            if v.as_u64() != Some(CONFIG_VERSION as u64) {
                return Err(LdpError::config(
                    "version",
                    format!("config version {v} is not supported (expected {CONFIG_VERSION})"),
                ));
            }
        }
        serde_json::from_value(value).map_err(|e| LdpError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LdpError::io(path, e))?;
        Self::from_json(&text)
    }

    /// The file at `path`, or the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let p = RunConfig::default().data.scene_params().unwrap();
        assert_eq!(p, scenes::suite_params());
    }

    #[test]
    fn defaults_round_trip() {
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        for bad in [
            r#"{"dta": {}}"#,
            r#"{"data": {"n_scene": 3}}"#,
            r#"{"train": {"stage3_steps": 1}}"#,
        ] {
            let e = RunConfig::from_json(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
        let e = RunConfig::from_json(r#"{"version": 2}"#).unwrap_err();
        assert!(e.to_string().contains("version"));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"data": {"n_scenes": 3}, "train": {"stage1_steps": 5}}"#).unwrap();
        assert_eq!(c.data.n_scenes, 3);
        assert_eq!(c.data.height, 64);
        assert_eq!(c.train.stage1_steps, 5);
        assert_eq!(c.train.stage2_steps, TrainConfig::default().stage2_steps);
    }

    #[test]
    fn bad_depth_range_names_the_field() {
        let c = RunConfig::from_json(r#"{"data": {"depth_min": 0.0}}"#).unwrap();
        let e = c.data.scene_params().unwrap_err();
        assert!(e.to_string().contains("data.depth_min"));
    }
}
