//! `sonodiff` command line. Each subcommand is a thin wrapper over the library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use base64::Engine as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sonodiff::checkpoint::{Checkpoint, Stage};
use sonodiff::data::{busi_mix, ingest_busi, synth_generate, Dataset, BUSI_COUNTS, CLASS_NAMES};
use sonodiff::evaluator::experiments::{augment_from_config, coverage_from_config, mask_iou_from_config, EvalConfig};
use sonodiff::generate::{generate, write_generation, GenerationRequest, Models};
use sonodiff::service::{serve, ServiceConfig};
use sonodiff::trainer::{train_stage, TrainConfig};
use sonodiff::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "sonodiff", version, about = "Latent diffusion for breast ultrasound phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (file or directory, per command).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural phantom dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 780)]
        n: usize,
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', default_value = "0.7,0.15,0.15")]
        split: Vec<f64>,
    },
    /// Convert a BUSI-layout directory into a dataset.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Directory holding `normal/`, `benign/`, `malignant/`.
        #[arg(long)]
        busi: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.7,0.15,0.15")]
        split: Vec<f64>,
    },
    /// Train one stage.
    Train {
        stage: StageArg,
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the configured total step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample images from trained checkpoints.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        class_id: Option<usize>,
        /// Binary mask PNG (64×64); needs a control checkpoint.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 3.0)]
        guidance: f64,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
    },
    /// Classifier and mask-adherence experiments.
    Evaluate {
        experiment: Experiment,
        #[command(flatten)]
        common: Common,
    },
    /// Run the invariant suite and check checkpoint files.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Fewer seeds and tuples.
        #[arg(long)]
        quick: bool,
        /// Checkpoint files whose integrity to check.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// HTTP generation service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
    },
}

#[derive(Args, Clone, Default)]
struct CheckpointArgs {
    #[arg(long)]
    codec: Option<PathBuf>,
    #[arg(long)]
    diffusion: Option<PathBuf>,
    #[arg(long)]
    control: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Codec,
    Diffusion,
    Control,
    Classifier,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Codec => Stage::Codec,
            StageArg::Diffusion => Stage::Diffusion,
            StageArg::Control => Stage::Control,
            StageArg::Classifier => Stage::Classifier,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Augment,
    Coverage,
    MaskIou,
}

fn split3(v: &[f64]) -> Result<[f64; 3]> {
    v.try_into().map_err(|_| Error::InvalidArgument(format!("--split needs three fractions, got {}", v.len())))
}

fn need_out(common: &Common, what: &str) -> Result<PathBuf> {
    common.out.clone().ok_or_else(|| Error::InvalidArgument(format!("--out {what} is required")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn service_config(common: &Common, ckpt: &CheckpointArgs) -> Result<ServiceConfig> {
    let mut cfg = match &common.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(p) = &ckpt.codec {
        cfg.codec = p.clone();
    }
    if let Some(p) = &ckpt.diffusion {
        cfg.diffusion = p.clone();
    }
    if let Some(p) = &ckpt.control {
        cfg.control = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common, n, split } => {
            let out = need_out(&common, "<dir>")?;
            let seed = common.seed.unwrap_or(0);
            let mut ds = synth_generate(n, busi_mix(), seed)?;
            ds.split(split3(&split)?, seed)?;
            let m = ds.save(&out)?;
            println!("wrote {} phantoms to {} counts={:?}", m.entries.len(), out.display(), m.counts);
        }
        Command::Ingest { common, busi, split } => {
            let out = need_out(&common, "<dir>")?;
            let report = ingest_busi(&busi)?;
            for (p, e) in &report.errors {
                eprintln!("skipped {}: {e}", p.display());
            }
            let mut ds: Dataset = report.dataset;
            ds.seed = common.seed.unwrap_or(0);
            ds.split(split3(&split)?, ds.seed)?;
            let counts = ds.counts();
            ds.save(&out)?;
            println!(
                "ingested {} images counts={counts:?} (reference {BUSI_COUNTS:?}) skipped={}",
                ds.len(),
                report.errors.len()
            );
        }
        Command::Train { stage, common, resume, steps } => {
            let path = common.config.as_ref().ok_or_else(|| Error::InvalidArgument("--config is required".into()))?;
            let mut cfg = TrainConfig::load(path)?;
            let stage = Stage::from(stage);
            if cfg.stage != stage {
                return Err(Error::StageMismatch { expected: stage.name().into(), found: cfg.stage.name().into() });
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(o) = common.out {
                cfg.out = o;
            }
            if let Some(r) = resume {
                cfg.resume = Some(r);
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let (out, hash) = train_stage(&cfg)?;
            let last = out.losses.last().copied().unwrap_or(f64::NAN);
            println!("{} checkpoint {} hash={hash} steps={} last_loss={last:.6}", stage.name(), cfg.out.display(), cfg.steps);
        }
        Command::Generate { common, ckpt, prompt, class_id, mask, count, steps, guidance, eta } => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("generated"));
            let cfg = service_config(&common, &ckpt)?;
            let mask = match mask {
                Some(p) => {
                    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                    Some(base64::engine::general_purpose::STANDARD.encode(bytes))
                }
                None => None,
            };
            let req =
                GenerationRequest { prompt, class_id, mask, steps, guidance, eta, seed: common.seed.unwrap_or(0), count };
            req.validate()?;
            let models = Models::load(&cfg.codec, &cfg.diffusion, cfg.control.as_deref())?;
            let g = generate(&models, &req)?;
            write_generation(&out, &models, &req, &g)?;
            println!(
                "wrote {} {} images to {} seed={} ms={}",
                g.pngs.len(),
                CLASS_NAMES[g.class_id],
                out.display(),
                g.seed_used,
                g.timings.total_ms
            );
        }
        Command::Evaluate { experiment, common } => {
            let mut cfg = match &common.config {
                Some(p) => EvalConfig::load(p)?,
                None => return Err(Error::InvalidArgument("--config is required".into())),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
                if let Some(c) = cfg.coverage.as_mut() {
                    c.seed = s;
                }
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("report.json"));
            match experiment {
                Experiment::Augment => {
                    let r = augment_from_config(&cfg)?;
                    write_json(&out, &r)?;
                    println!(
                        "augment baseline_auc={:.4} augmented_auc={:.4} delta={:+.4} generated={} within_tolerance={}",
                        r.baseline.auc_macro, r.augmented.auc_macro, r.delta_auc, r.generated, r.within_tolerance
                    );
                }
                Experiment::Coverage => {
                    let r = coverage_from_config(&cfg)?;
                    write_json(&out, &r)?;
                    println!(
                        "coverage fraction={} auc={:.4} null_q997={:.4} beats_null={}",
                        r.fraction, r.report.auc_macro, r.null_q997, r.beats_null
                    );
                }
                Experiment::MaskIou => {
                    let r = mask_iou_from_config(&cfg)?;
                    write_json(&out, &r)?;
                    println!("mask-iou masks={} mean={:.4} null={:.4} ratio={:.2}", r.masks, r.mean_iou, r.null_mean, r.ratio);
                }
            }
        }
        Command::Verify { common, quick, checkpoints } => {
            let mut failed = 0;
            for p in &checkpoints {
                let (ck, hash) = Checkpoint::load(p)?;
                println!("checkpoint {} stage={} hash={hash} pass", p.display(), ck.header.stage.name());
            }
            let checks = verify::run_suite(quick, common.seed.unwrap_or(0))?;
            for c in &checks {
                println!("{}", c.line());
                failed += usize::from(!c.passed);
            }
            if let Some(out) = &common.out {
                write_json(out, &checks)?;
            }
            if failed > 0 {
                return Err(Error::InvalidArgument(format!("{failed} of {} checks failed", checks.len())));
            }
        }
        Command::Serve { common, ckpt, port, host } => {
            let mut cfg = service_config(&common, &ckpt)?;
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(h) = host {
                cfg.host = h;
            }
            println!("listening on http://{}:{}", cfg.host, cfg.port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(serve(cfg))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::to_string(&e.to_string()).expect("string serializes");
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
