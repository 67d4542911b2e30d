//! Two-stage training, evaluation and the ablation harness.

pub mod metrics;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blurmap::{estimate, BlurMap, MapFormat, PromptSet};
use crate::deblur_net::{DeblurNet, Variant};
use crate::dp_formation::{center_view, render_dp_pair, DPPair, DisparityMap, SceneSample};
use crate::error::{LdpError, Result};
use crate::image::Image;
use crate::losses::{blur_aware_grad, blur_weighting_grad, charbonnier_grad, total_loss, LossConfig, LossReport};
use crate::vl_encoder::VisionLanguageEncoder;
use metrics::{best_threshold, blurmap_accuracy, disparity_metrics, mae, mse_rel, psnr, ssim};

/// Which losses the second stage optimizes. The first stage always uses
/// the Charbonnier term alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Char,
    CharBwl,
    CharBal,
    #[default]
    Total,
}

impl Objective {
    fn uses_bwl(self) -> bool {
        matches!(self, Objective::CharBwl | Objective::Total)
    }

    fn uses_bal(self) -> bool {
        matches!(self, Objective::CharBal | Objective::Total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub stage2_objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 20_000,
            stage2_steps: 4_000,
            lr_max: 2e-4,
            lr_min: 1e-6,
            batch: 4,
            patch_size: 128,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            stage2_objective: Objective::Total,
        }
    }
}

impl TrainConfig {
    /// The desk-scale schedule shortened tenfold for a CPU.
    pub fn cpu() -> Self {
        Self {
            stage1_steps: 2_000,
            stage2_steps: 400,
            patch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0) {
            return Err(LdpError::config("train.lr_min", "need lr_max > lr_min > 0"));
        }
        if self.batch == 0 {
            return Err(LdpError::config("train.batch", "must be positive"));
        }
        if self.patch_size == 0 {
            return Err(LdpError::config("train.patch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(LdpError::config("train.beta1", "Adam betas must lie in [0,1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(LdpError::config("train.adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π s / S))`.
pub fn cosine_lr(step: usize, stage_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    // Endpoints returned as given, so they hold without rounding error.
    if step == 0 {
        return lr_max;
    }
    if step >= stage_steps {
        return lr_min;
    }
    let t = step as f64 / stage_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One training or evaluation scene with its cached blur map.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub pair: DPPair,
    pub gt: Image,
    pub map: BlurMap,
    pub disparity: Option<DisparityMap>,
}

impl TrainSample {
    pub fn from_scene(
        scene: &SceneSample,
        n_layers: usize,
        format: MapFormat,
        prompts: &PromptSet,
        encoder: &dyn VisionLanguageEncoder,
    ) -> Result<Self> {
        let (pair, disparity, _) = render_dp_pair(scene, n_layers)?;
        let map = estimate(&pair, format, prompts, encoder)?;
        Ok(Self {
            pair,
            gt: scene.sharp_image.clone(),
            map,
            disparity: Some(disparity),
        })
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            pair: self.pair.crop(y, x, h, w)?,
            gt: self.gt.crop(y, x, h, w)?,
            map: BlurMap {
                raw: self.map.raw.crop(y, x, h, w)?,
                normalized: self.map.normalized.crop(y, x, h, w)?,
                source_format: self.map.source_format,
            },
            disparity: self
                .disparity
                .as_ref()
                .map(|d| d.d.crop(y, x, h, w).map(|d| DisparityMap { d }))
                .transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: u8,
    pub step: usize,
    pub global_step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    /// Value of the loss actually optimized at this step.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    Aborted { global_step: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training aborted.
    pub params: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub status: TrainStatus,
}

/// Loss report, optimized value and `∂objective/∂output` for one sample.
fn sample_loss(
    sample: &TrainSample,
    out: &Image,
    objective: Option<Objective>,
    loss: &LossConfig,
    prompts: &PromptSet,
    encoder: &dyn VisionLanguageEncoder,
) -> Result<(LossReport, f64, Image)> {
    let (char, mut grad) = charbonnier_grad(&sample.gt, out, loss.epsilon_charb)?;
    let (bwl, g_bwl) = blur_weighting_grad(&sample.gt, out, &sample.pair, &sample.map.normalized, loss.epsilon_denom)?;
    let (bal, g_bal) = blur_aware_grad(out, &prompts.blur_aware, encoder)?;
    let report = total_loss(char, bal, bwl, loss);
    let mut value = char;
    if let Some(obj) = objective {
        if obj.uses_bwl() {
            value += loss.lambda2 * bwl;
            grad = grad.zip_map(&g_bwl, |a, b| a + loss.lambda2 * b)?;
        }
        if obj.uses_bal() {
            value += loss.lambda1 * bal;
            grad = grad.zip_map(&g_bal, |a, b| a + loss.lambda1 * b)?;
        }
    }
    Ok((report, value, grad))
}

/// Two-stage training from a fresh initialization.
pub fn train(
    net: &DeblurNet,
    samples: &[TrainSample],
    loss: &LossConfig,
    config: &TrainConfig,
    prompts: &PromptSet,
    encoder: &dyn VisionLanguageEncoder,
    on_step: &mut dyn FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    train_from(net, net.init_params(config.seed), samples, loss, config, prompts, encoder, on_step)
}

/// Both stages starting from `params`.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    net: &DeblurNet,
    params: Vec<f64>,
    samples: &[TrainSample],
    loss: &LossConfig,
    config: &TrainConfig,
    prompts: &PromptSet,
    encoder: &dyn VisionLanguageEncoder,
    on_step: &mut dyn FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    let first = run_stage(net, params, samples, loss, config, Stage::First, prompts, encoder, 0, on_step)?;
    if first.status != TrainStatus::Completed {
        return Ok(first);
    }
    let offset = first.log.len();
    let second = run_stage(net, first.params, samples, loss, config, Stage::Second, prompts, encoder, offset, on_step)?;
    let mut log = first.log;
    log.extend(second.log);
    Ok(TrainOutcome {
        params: second.params,
        log,
        status: second.status,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Charbonnier only, `stage1_steps` steps.
    First,
    /// `stage2_objective`, `stage2_steps` steps.
    Second,
}

impl Stage {
    fn index(self) -> u8 {
        match self {
            Stage::First => 1,
            Stage::Second => 2,
        }
    }
}

/// One stage with its own cosine schedule, a fresh Adam state and a batch
/// stream that depends only on `(config.seed, stage)`. Running the stages
/// separately therefore reproduces [`train_from`] exactly, which lets
/// several second stages share one first stage.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    net: &DeblurNet,
    mut params: Vec<f64>,
    samples: &[TrainSample],
    loss: &LossConfig,
    config: &TrainConfig,
    stage: Stage,
    prompts: &PromptSet,
    encoder: &dyn VisionLanguageEncoder,
    global_offset: usize,
    on_step: &mut dyn FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    loss.validate()?;
    if params.len() != net.param_count() {
        return Err(LdpError::shape(format!(
            "{} parameters given, network has {}",
            params.len(),
            net.param_count()
        )));
    }
    if samples.is_empty() {
        return Err(LdpError::Data("training needs at least one sample".into()));
    }
    let p = config.patch_size;
    if let Some(s) = samples.iter().find(|s| s.height() < p || s.width() < p) {
        return Err(LdpError::Data(format!(
            "sample of {}×{} is smaller than the {p}×{p} patch",
            s.height(),
            s.width()
        )));
    }
    let (steps, objective) = match stage {
        Stage::First => (config.stage1_steps, None),
        Stage::Second => (config.stage2_steps, Some(config.stage2_objective)),
    };
    let stage_id = stage.index();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c ^ ((stage_id as u64) << 40));
    let mut adam = Adam::new(params.len(), config.beta1, config.beta2, config.adam_eps);
    let mut log = Vec::with_capacity(steps);
    let mut grads = vec![0.0; params.len()];
    let inv_b = 1.0 / config.batch as f64;
    for step in 0..steps {
        let global = global_offset + step;
        let lr = cosine_lr(step, steps, config.lr_max, config.lr_min);
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut run_batch = || -> Result<(LossReport, f64)> {
            let mut report = LossReport::default();
            let mut value = 0.0;
            for _ in 0..config.batch {
                let s = &samples[rng.random_range(0..samples.len())];
                let y = rng.random_range(0..=s.height() - p);
                let x = rng.random_range(0..=s.width() - p);
                let crop = s.crop(y, x, p, p)?;
                let (out, tape) = net.forward_train(&crop.pair, Some(&crop.map), &params)?;
                let (r, v, g) = sample_loss(&crop, &out, objective, loss, prompts, encoder)?;
                report.char += r.char * inv_b;
                report.bwl += r.bwl * inv_b;
                report.bal += r.bal * inv_b;
                value += v * inv_b;
                net.backward(&params, &tape, &g.map(|v| v * inv_b), &mut grads)?;
            }
            if !value.is_finite() || !grads.iter().all(|g| g.is_finite()) {
                return Err(LdpError::Numeric("non-finite loss or gradient".into()));
            }
            Ok((total_loss(report.char, report.bal, report.bwl, loss), value))
        };
        let (report, value) = match run_batch() {
            Ok(r) => r,
            Err(LdpError::Numeric(msg)) => {
                return Ok(TrainOutcome {
                    params,
                    log,
                    status: TrainStatus::Aborted {
                        global_step: global,
                        reason: format!("{msg} at stage {stage_id} step {step}"),
                    },
                })
            }
            Err(e) => return Err(e),
        };
        adam.step(&mut params, &grads, lr);
        let entry = LogEntry {
            stage: stage_id,
            step,
            global_step: global,
            lr,
            loss: report,
            objective: value,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        log,
        status: TrainStatus::Completed,
    })
}

/// Serde adapter writing `+inf` as `"inf"` and NaN as `"nan"`, which JSON
/// numbers cannot hold.
pub mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(match Repr::deserialize(d)? {
            Repr::Num(v) => v,
            Repr::Text(t) if t == "inf" => f64::INFINITY,
            Repr::Text(_) => f64::NAN,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_images: usize,
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub mse_rel: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blurmap_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blurmap_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_minus_abs_rho: Option<f64>,
    /// Median wall time of one restoration, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds_per_image: Option<f64>,
    /// Machine the timing was taken on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Dataset-mean restoration metrics of `restore(sample)` against ground truth.
pub fn evaluate_with(
    samples: &[TrainSample],
    mut restore: impl FnMut(&TrainSample) -> Result<Image>,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(LdpError::Data("evaluation needs at least one sample".into()));
    }
    let mut r = MetricsReport::default();
    for s in samples {
        let out = restore(s)?.clamp01();
        r.psnr += psnr(&s.gt, &out)?;
        r.ssim += ssim(&s.gt, &out)?;
        r.mae += mae(&s.gt, &out)?;
        r.mse_rel += mse_rel(&s.gt, &out)?;
    }
    let n = samples.len() as f64;
    r.n_images = samples.len();
    r.psnr /= n;
    r.ssim /= n;
    r.mae /= n;
    r.mse_rel /= n;
    Ok(r)
}

pub fn evaluate(net: &DeblurNet, params: &[f64], samples: &[TrainSample]) -> Result<MetricsReport> {
    evaluate_with(samples, |s| net.restore(&s.pair, Some(&s.map), params))
}

/// Metrics of the unprocessed center view.
pub fn evaluate_input(samples: &[TrainSample]) -> Result<MetricsReport> {
    evaluate_with(samples, |s| center_view(&s.pair))
}

/// Blur-map accuracy at a threshold swept on `validation`, plus the
/// affine-invariant disparity errors, averaged over `samples`.
pub fn evaluate_blurmaps(validation: &[TrainSample], samples: &[TrainSample]) -> Result<MetricsReport> {
    let with_gt = |set: &[TrainSample]| -> Result<Vec<(BlurMap, DisparityMap)>> {
        set.iter()
            .map(|s| {
                s.disparity
                    .clone()
                    .map(|d| (s.map.clone(), d))
                    .ok_or_else(|| LdpError::Data("blur-map evaluation needs ground-truth disparity".into()))
            })
            .collect()
    };
    let val = with_gt(validation)?;
    let test = with_gt(samples)?;
    if test.is_empty() {
        return Err(LdpError::Data("blur-map evaluation needs at least one sample".into()));
    }
    let refs: Vec<(&BlurMap, &DisparityMap)> = val.iter().map(|(m, d)| (m, d)).collect();
    let (threshold, _) = best_threshold(&refs)?;
    let n = test.len() as f64;
    let (mut acc, mut ai1, mut ai2, mut rho) = (0.0, 0.0, 0.0, 0.0);
    for (m, d) in &test {
        acc += blurmap_accuracy(m, d, threshold)?;
        let dm = disparity_metrics(&m.raw, d)?;
        ai1 += dm.ai1;
        ai2 += dm.ai2;
        rho += dm.one_minus_abs_rho;
    }
    Ok(MetricsReport {
        n_images: test.len(),
        blurmap_accuracy: Some(acc / n),
        blurmap_threshold: Some(threshold),
        ai1: Some(ai1 / n),
        ai2: Some(ai2 / n),
        one_minus_abs_rho: Some(rho / n),
        ..MetricsReport::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Option<Variant>,
    pub objective: Option<Objective>,
    /// `None` when the checkpoint was missing.
    pub metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Labels of the present rows, best PSNR first.
    pub psnr_order: Vec<String>,
}

/// One ablation candidate: a label and, if available, a trained network.
pub struct AblationEntry<'a> {
    pub label: String,
    pub objective: Option<Objective>,
    pub model: Option<(&'a DeblurNet, &'a [f64])>,
}

pub fn run_ablation(entries: &[AblationEntry], samples: &[TrainSample]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for e in entries {
        let metrics = match e.model {
            Some((net, params)) => Some(evaluate(net, params, samples)?),
            None => None,
        };
        rows.push(AblationRow {
            label: e.label.clone(),
            variant: e.model.map(|(n, _)| n.config().variant),
            objective: e.objective,
            metrics,
        });
    }
    let mut present: Vec<(&str, f64)> = rows
        .iter()
        .filter_map(|r| r.metrics.as_ref().map(|m| (r.label.as_str(), m.psnr)))
        .collect();
    present.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(AblationReport {
        psnr_order: present.into_iter().map(|(l, _)| l.to_string()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests;
