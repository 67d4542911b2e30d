use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ldp_core::blurmap::{estimate, BlurMap};
use ldp_core::deblur_net::DeblurNet;
use ldp_core::dp_formation::scenes::generate_scene;
use ldp_core::dp_formation::{center_view, render_dp_pair, DPPair};
use ldp_core::io::{
    load_checkpoint, read_dataset, read_png, save_checkpoint, write_manifest, write_pfm, write_png, write_scene,
    Checkpoint, Manifest, ManifestEntry, PngDepth, SceneMeta, SceneRecord, MANIFEST_FILE,
};
use ldp_core::train_eval::metrics::psnr;
use ldp_core::train_eval::{
    evaluate, inf_as_string, evaluate_input, run_stage, LogEntry, MetricsReport, Stage, TrainSample, TrainStatus,
};
use ldp_core::vl_encoder::{load_encoder, VisionLanguageEncoder};
use ldp_core::{Image, LdpError, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::EncoderArgs;

pub fn load(path: Option<PathBuf>) -> Result<RunConfig> {
    RunConfig::load_or_default(path.as_deref())
}

pub fn with_encoder(mut cfg: RunConfig, args: &EncoderArgs) -> RunConfig {
    let e = &mut cfg.encoder;
    e.kind = args.encoder.unwrap_or(e.kind);
    e.weights = args.weights.clone().or(e.weights.take());
    e.map_format = args.format.unwrap_or(e.map_format);
    cfg
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| LdpError::Data(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LdpError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| LdpError::io(path, e))
}

fn encoder(cfg: &RunConfig) -> Result<Box<dyn VisionLanguageEncoder>> {
    load_encoder(&cfg.encoder.spec())
}

fn read_pair(left: &Path, right: &Path) -> Result<DPPair> {
    let (l, r) = (read_png(left)?, read_png(right)?);
    if l.channels() != 3 || r.channels() != 3 {
        return Err(LdpError::Data("dual-pixel views must be RGB".into()));
    }
    DPPair::new(l, r)
}

fn map_for(cfg: &RunConfig, pair: &DPPair, enc: &dyn VisionLanguageEncoder) -> Result<BlurMap> {
    estimate(pair, cfg.encoder.map_format, &cfg.encoder.prompts, enc)
}

fn load_samples(cfg: &RunConfig, dir: &Path, enc: &dyn VisionLanguageEncoder) -> Result<Vec<TrainSample>> {
    read_dataset(dir)?
        .into_iter()
        .map(|(name, rec)| {
            let gt = rec
                .gt
                .ok_or_else(|| LdpError::Data(format!("{name}: no gt.png")))?;
            let map = map_for(cfg, &rec.pair, enc)?;
            Ok(TrainSample {
                pair: rec.pair,
                gt,
                map,
                disparity: rec.disparity,
            })
        })
        .collect()
}

fn load_net(path: &Path) -> Result<(DeblurNet, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    Ok((DeblurNet::new(ckpt.net.clone())?, ckpt))
}

/// CPU model, thread count and platform of this machine.
pub fn hardware() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown CPU".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{model}, {threads} thread{}, {}-{}",
        if threads == 1 { "" } else { "s" },
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let params = cfg.data.scene_params()?;
    if cfg.data.n_scenes == 0 {
        return Err(LdpError::config("data.n_scenes", "must be positive"));
    }
    if out.exists() {
        let entries: Vec<_> = std::fs::read_dir(out)
            .map_err(|e| LdpError::io(out, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| LdpError::io(out, e))?;
        if !entries.is_empty() {
            if !force {
                return Err(LdpError::config(
                    "--out",
                    format!("{} is not empty; pass --force to replace it", out.display()),
                ));
            }
            for e in entries {
                let name = e.file_name();
                let name = name.to_string_lossy();
                let path = e.path();
                if name.starts_with("scene_") && path.is_dir() {
                    std::fs::remove_dir_all(&path).map_err(|err| LdpError::io(&path, err))?;
                } else if name == MANIFEST_FILE {
                    std::fs::remove_file(&path).map_err(|err| LdpError::io(&path, err))?;
                }
            }
        }
    }
    create_dir(out)?;
    let mut entries = Vec::with_capacity(cfg.data.n_scenes);
    for i in 0..cfg.data.n_scenes {
        let seed = cfg.data.first_seed + i as u64;
        let scene = generate_scene(&params, seed)?;
        let (pair, disparity, mask) = render_dp_pair(&scene, cfg.data.n_layers)?;
        let name = format!("scene_{i:04}");
        let rec = SceneRecord {
            pair,
            gt: Some(scene.sharp_image.clone()),
            disparity: Some(disparity),
            mask: Some(mask),
            meta: SceneMeta {
                lens: scene.lens,
                height: params.height,
                width: params.width,
                seed: Some(seed),
                kind: Some(params.kind),
                n_layers: Some(cfg.data.n_layers),
            },
        };
        write_scene(&out.join(&name), &rec)?;
        entries.push(ManifestEntry {
            name,
            seed,
            kind: params.kind,
            lens: scene.lens,
        });
    }
    write_manifest(out, &Manifest::new(entries))
}

pub fn blurmap(cfg: &RunConfig, left: &Path, right: &Path, out: &Path, viz: Option<&Path>) -> Result<()> {
    let pair = read_pair(left, right)?;
    let enc = encoder(cfg)?;
    let map = map_for(cfg, &pair, enc.as_ref())?;
    write_pfm(out, &map.raw)?;
    if let Some(viz) = viz {
        write_png(viz, &map.normalized, PngDepth::Eight)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    #[serde(flatten)]
    status: TrainStatus,
    steps: usize,
    input: MetricsReport,
    #[serde(flatten)]
    restored: MetricsReport,
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    cfg.train.validate()?;
    cfg.loss.validate()?;
    let net = DeblurNet::new(cfg.net.clone())?;
    let enc = encoder(cfg)?;
    let samples = load_samples(cfg, data, enc.as_ref())?;
    create_dir(out)?;

    let log_path = out.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| LdpError::io(&log_path, e))?);
    let mut log_err = None;
    let mut on_step = |entry: &LogEntry| {
        if log_err.is_none() {
            let line = serde_json::to_string(entry).expect("log entries serialize");
            if let Err(e) = writeln!(log, "{line}") {
                log_err = Some(e);
            }
        }
    };

    let mut params = net.init_params(cfg.train.seed);
    let mut steps = 0;
    let mut status = TrainStatus::Completed;
    for (stage, name) in [(Stage::First, "ckpt_stage1.bin"), (Stage::Second, "ckpt_final.bin")] {
        let outcome = run_stage(
            &net,
            params,
            &samples,
            &cfg.loss,
            &cfg.train,
            stage,
            &cfg.encoder.prompts,
            enc.as_ref(),
            steps,
            &mut on_step,
        )?;
        steps += outcome.log.len();
        params = outcome.params;
        status = outcome.status;
        let done = status == TrainStatus::Completed;
        let meta = json!({
            "stage": if stage == Stage::First { 1 } else { 2 },
            "global_step": steps,
            "seed": cfg.train.seed,
            "objective": if stage == Stage::First { "char".into() } else { json!(cfg.train.stage2_objective) },
            "map_format": cfg.encoder.map_format,
            "completed": done,
        });
        let file = if done { name } else { "ckpt_aborted.bin" };
        save_checkpoint(
            &out.join(file),
            &Checkpoint {
                net: cfg.net.clone(),
                params: params.clone(),
                meta,
            },
        )?;
        if !done {
            break;
        }
    }
    if let Some(e) = log_err {
        return Err(LdpError::io(&log_path, e));
    }
    log.flush().map_err(|e| LdpError::io(&log_path, e))?;

    let mut restored = match status {
        TrainStatus::Completed => evaluate(&net, &params, &samples)?,
        TrainStatus::Aborted { .. } => MetricsReport::default(),
    };
    restored.label = Some(cfg.net.variant.name().to_string());
    let summary = TrainSummary {
        status: status.clone(),
        steps,
        input: evaluate_input(&samples)?,
        restored,
    };
    write_file(&out.join("metrics.json"), &to_json(&summary)?)?;
    match status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Aborted { global_step, reason } => Err(LdpError::Numeric(format!(
            "training aborted at step {global_step}: {reason}"
        ))),
    }
}

pub fn eval(cfg: &RunConfig, ckpt: Option<&Path>, data: &Path, report: &Path, label: Option<String>) -> Result<()> {
    if cfg.eval.timing_runs == 0 {
        return Err(LdpError::config("eval.timing_runs", "must be positive"));
    }
    let enc = encoder(cfg)?;
    let samples = load_samples(cfg, data, enc.as_ref())?;
    let model = ckpt.map(load_net).transpose()?;
    let first = &samples[0];
    let run_once = || -> Result<Image> {
        match &model {
            Some((net, c)) => {
                let map = if net.config().variant.needs_map() {
                    Some(map_for(cfg, &first.pair, enc.as_ref())?)
                } else {
                    None
                };
                net.restore(&first.pair, map.as_ref(), &c.params)
            }
            None => center_view(&first.pair),
        }
    };
    let mut metrics = match &model {
        Some((net, c)) => evaluate(net, &c.params, &samples)?,
        None => evaluate_input(&samples)?,
    };
    run_once()?;
    let mut times = Vec::with_capacity(cfg.eval.timing_runs);
    for _ in 0..cfg.eval.timing_runs {
        let t = Instant::now();
        run_once()?;
        times.push(t.elapsed().as_secs_f64());
    }
    metrics.seconds_per_image = Some(median(times));
    metrics.hardware = Some(hardware());
    metrics.label = Some(label.unwrap_or_else(|| match ckpt {
        Some(p) => p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
        None => "input".into(),
    }));
    write_file(report, &to_json(&metrics)?)
}

pub fn infer(cfg: &RunConfig, ckpt: &Path, left: &Path, right: &Path, out: &Path) -> Result<()> {
    let (net, c) = load_net(ckpt)?;
    let pair = read_pair(left, right)?;
    let enc = encoder(cfg)?;
    let map = map_for(cfg, &pair, enc.as_ref())?;
    let restored = net.restore(&pair, Some(&map), &c.params)?;
    write_png(out, &restored, PngDepth::Sixteen)
}

#[derive(Serialize)]
struct PipelineReport {
    map_format: ldp_core::blurmap::MapFormat,
    blurmap_seconds: f64,
    restore_seconds: f64,
    total_seconds: f64,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    quality: Option<Quality>,
    hardware: String,
}

#[derive(Serialize)]
struct Quality {
    #[serde(with = "inf_as_string")]
    psnr: f64,
    #[serde(with = "inf_as_string")]
    input_psnr: f64,
    #[serde(with = "inf_as_string")]
    psnr_gain: f64,
}

pub fn pipeline(cfg: &RunConfig, ckpt: &Path, left: &Path, right: &Path, gt: Option<&Path>, out: &Path) -> Result<()> {
    let created_dir = !out.exists();
    let written = [out.join("map.pfm"), out.join("restored.png"), out.join("report.json")];
    let result = pipeline_inner(cfg, ckpt, left, right, gt, out, &written);
    if result.is_err() {
        for p in &written {
            let _ = std::fs::remove_file(p);
        }
        if created_dir {
            let _ = std::fs::remove_dir(out);
        }
    }
    result
}

fn pipeline_inner(
    cfg: &RunConfig,
    ckpt: &Path,
    left: &Path,
    right: &Path,
    gt: Option<&Path>,
    out: &Path,
    [map_path, restored_path, report_path]: &[PathBuf; 3],
) -> Result<()> {
    let (net, c) = load_net(ckpt)?;
    let pair = read_pair(left, right)?;
    let gt = gt.map(read_png).transpose()?;
    let enc = encoder(cfg)?;
    create_dir(out)?;

    let t0 = Instant::now();
    let map = map_for(cfg, &pair, enc.as_ref())?;
    let blurmap_seconds = t0.elapsed().as_secs_f64();
    write_pfm(map_path, &map.raw)?;

    let t1 = Instant::now();
    let restored = net.restore(&pair, Some(&map), &c.params)?;
    let restore_seconds = t1.elapsed().as_secs_f64();
    write_png(restored_path, &restored, PngDepth::Sixteen)?;

    let quality = match &gt {
        Some(g) => {
            let out_psnr = psnr(g, &restored)?;
            let input_psnr = psnr(g, &center_view(&pair)?.clamp01())?;
            Some(Quality {
                psnr: out_psnr,
                input_psnr,
                psnr_gain: out_psnr - input_psnr,
            })
        }
        None => None,
    };
    let report = PipelineReport {
        map_format: cfg.encoder.map_format,
        blurmap_seconds,
        restore_seconds,
        total_seconds: blurmap_seconds + restore_seconds,
        quality,
        hardware: hardware(),
    };
    write_file(report_path, &to_json(&report)?)
}
