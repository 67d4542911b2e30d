//! `ldp`: dataset synthesis, blur maps, training, evaluation, inference and
//! plotting. Exit codes: 0 success, 2 usage or config, 3 data, 4 numeric.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldp_core::blurmap::MapFormat;
use ldp_core::deblur_net::Variant;
use ldp_core::dp_formation::scenes::SceneKind;
use ldp_core::train_eval::Objective;
use ldp_core::LdpError;
use serde::de::DeserializeOwned;

use config::EncoderChoice;

#[derive(Parser)]
#[command(name = "ldp", version, about = "Language-driven dual-pixel defocus deblurring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Parse a snake_case enum value through its serde name.
fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn map_format(s: &str) -> Result<MapFormat, String> {
    match s {
        "blur" => Ok(MapFormat::BlurAware),
        "dp" => Ok(MapFormat::DpAware),
        "ensemble" => Ok(MapFormat::Ensemble),
        "difference" => Ok(MapFormat::Difference),
        _ => Err("expected one of blur, dp, ensemble, difference".into()),
    }
}

#[derive(Args, Clone, Default)]
pub struct EncoderArgs {
    /// `stub` or `pretrained`.
    #[arg(long, value_parser = serde_enum::<EncoderChoice>)]
    pub encoder: Option<EncoderChoice>,
    /// Pretrained weights (defaults to $LDP_WEIGHTS).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Blur-map prompt format: blur, dp, ensemble or difference.
    #[arg(long, value_parser = map_format)]
    pub format: Option<MapFormat>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dual-pixel dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        n: Option<usize>,
        /// Seed of the first scene.
        #[arg(long)]
        seed: Option<u64>,
        /// `two_plane` or `layered`.
        #[arg(long, value_parser = serde_enum::<SceneKind>)]
        kind: Option<SceneKind>,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Estimate a blur map from a dual-pixel pair.
    Blurmap {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[command(flatten)]
        encoder: EncoderArgs,
        /// Raw logits as PFM.
        #[arg(long)]
        out: PathBuf,
        /// Normalized map as an 8-bit PNG.
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Two-stage training on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = serde_enum::<Variant>)]
        variant: Option<Variant>,
        /// Second-stage objective: char, char_bwl, char_bal or total.
        #[arg(long, value_parser = serde_enum::<Objective>)]
        objective: Option<Objective>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        stage1_steps: Option<usize>,
        #[arg(long)]
        stage2_steps: Option<usize>,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Restoration metrics and timing of a checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "input_baseline")]
        ckpt: Option<PathBuf>,
        /// Evaluate the unprocessed center view instead of a network.
        #[arg(long, conflicts_with = "ckpt")]
        input_baseline: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Point label for plots.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        timing_runs: Option<usize>,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Restore one dual-pixel pair.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Blur map then restoration, with per-stage timing.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Sharp reference; adds PSNR figures to the report.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Directory receiving map.pfm, restored.png and report.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// PSNR against inference time scatter from metrics files.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// SVG output.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> ldp_core::Result<()> {
    use commands::*;
    match cli.command {
        Command::Synth {
            config,
            out,
            n,
            seed,
            kind,
            force,
        } => {
            let mut cfg = load(config)?;
            cfg.data.n_scenes = n.unwrap_or(cfg.data.n_scenes);
            cfg.data.first_seed = seed.unwrap_or(cfg.data.first_seed);
            cfg.data.kind = kind.unwrap_or(cfg.data.kind);
            synth(&cfg, &out, force)
        }
        Command::Blurmap {
            config,
            left,
            right,
            encoder,
            out,
            viz,
        } => {
            let cfg = with_encoder(load(config)?, &encoder);
            blurmap(&cfg, &left, &right, &out, viz.as_deref())
        }
        Command::Train {
            config,
            data,
            out,
            variant,
            objective,
            seed,
            stage1_steps,
            stage2_steps,
            encoder,
        } => {
            let mut cfg = with_encoder(load(config)?, &encoder);
            cfg.net.variant = variant.unwrap_or(cfg.net.variant);
            let t = &mut cfg.train;
            t.stage2_objective = objective.unwrap_or(t.stage2_objective);
            t.seed = seed.unwrap_or(t.seed);
            t.stage1_steps = stage1_steps.unwrap_or(t.stage1_steps);
            t.stage2_steps = stage2_steps.unwrap_or(t.stage2_steps);
            train(&cfg, &data, &out)
        }
        Command::Eval {
            config,
            ckpt,
            input_baseline: _,
            data,
            report,
            label,
            timing_runs,
            encoder,
        } => {
            let mut cfg = with_encoder(load(config)?, &encoder);
            cfg.eval.timing_runs = timing_runs.unwrap_or(cfg.eval.timing_runs);
            eval(&cfg, ckpt.as_deref(), &data, &report, label)
        }
        Command::Infer {
            config,
            ckpt,
            left,
            right,
            out,
            encoder,
        } => {
            let cfg = with_encoder(load(config)?, &encoder);
            infer(&cfg, &ckpt, &left, &right, &out)
        }
        Command::Pipeline {
            config,
            ckpt,
            left,
            right,
            gt,
            out,
            encoder,
        } => {
            let cfg = with_encoder(load(config)?, &encoder);
            pipeline(&cfg, &ckpt, &left, &right, gt.as_deref(), &out)
        }
        Command::Plot { metrics, out } => plot::plot_files(&metrics, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ldp: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &LdpError) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
