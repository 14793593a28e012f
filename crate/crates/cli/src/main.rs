use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use tgqn::objective_metrics::METRICS_CSV_HEADER;
use tgqn::pipeline::{
    dump_attention, evaluate, load_checkpoint, render_episode, split_dataset, train_until,
    EvalProtocol, RunConfig, Variant,
};
use tgqn::scene_forge::{generate_dataset, read_shard, CameraMode, EpisodeConfig, GeneratorConfig};

#[derive(Parser)]
#[command(
    name = "tgqn",
    version,
    about = "Sequential novel-view synthesis with multi-view attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Attention mask for training and evaluation.
    #[arg(long)]
    masked: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset shard of procedural rooms.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 10)]
        views: usize,
        #[arg(long, default_value = "ring")]
        camera: String,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// TOML scene generator settings.
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint, log and held-out metrics to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Halt after this many steps without shortening the schedules.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a checkpoint on held-out scenes; writes metrics.csv and metrics.toml to --out.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Number of evaluation scenes (default: every held-out scene).
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Write contexts, ground truth and prediction for one scene as a PNG strip.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Dump attention scores of a T-GQN checkpoint for one scene.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: tgqn::TgqnError| e.to_string())
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    if let Some(m) = common.masked {
        cfg.masked = m;
        cfg.eval_masked = m;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.dataset {
        cfg.train_dataset = d.clone();
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = common.steps {
        cfg.max_steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .with_context(|| format!("--{flag} is required"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Datagen {
            common,
            scenes,
            views,
            camera,
            image_size,
            generator,
        } => {
            let out = require(&common.out, "out")?;
            let mode = CameraMode::parse(&camera)
                .with_context(|| format!("unknown camera mode {camera:?}"))?;
            let generator = match generator {
                Some(p) => toml::from_str::<GeneratorConfig>(&fs::read_to_string(&p)?)
                    .with_context(|| format!("{}", p.display()))?,
                None => GeneratorConfig::default(),
            };
            let base = EpisodeConfig {
                generator,
                image_size,
                ..EpisodeConfig::default()
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let header =
                generate_dataset(scenes, views, mode, common.seed.unwrap_or(0), out, &base)?;
            info!(
                "wrote {} scenes x {} views to {}",
                header.num_scenes,
                header.views_per_scene,
                out.display()
            );
        }
        Command::Train { common, stop_after } => {
            let cfg = run_config(&common)?;
            let (_, episodes) = read_shard(&cfg.train_dataset)?;
            let report = train_until(&cfg, &episodes, true, stop_after.unwrap_or(cfg.max_steps))?;
            let last = report.records.last();
            info!(
                "finished {} steps, final loss {:.3}; outputs in {}",
                report.records.len(),
                last.map_or(f64::NAN, |r| r.loss),
                cfg.out_dir.display()
            );
        }
        Command::Eval {
            common,
            scenes,
            repeats,
        } => {
            let ckpt_path = require(&common.checkpoint, "checkpoint")?;
            let ckpt = load_checkpoint(ckpt_path, None)?;
            let mut cfg = ckpt.manifest.config.clone();
            if let Some(m) = common.masked {
                cfg.eval_masked = m;
            }
            let seed = common.seed.unwrap_or(cfg.eval_seed);
            let dataset = common
                .dataset
                .clone()
                .or(cfg.eval_dataset.clone())
                .unwrap_or(cfg.train_dataset.clone());
            let (_, episodes) = read_shard(&dataset)?;
            // The training shard is scored on its held-out tail only.
            let heldout = if dataset == cfg.train_dataset {
                split_dataset(&episodes, cfg.holdout_fraction).1
            } else {
                &episodes[..]
            };
            let protocol = EvalProtocol {
                num_views: cfg.num_views,
                num_scenes: scenes.unwrap_or(heldout.len()),
                repeats: repeats.unwrap_or(cfg.eval_repeats),
                seed,
                ordered: cfg.order_eval,
            };
            let model = ckpt.model()?;
            let report = evaluate(&model, &ckpt.params, heldout, &protocol, cfg.eval_masked)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&out)?;
            fs::write(
                out.join("metrics.csv"),
                format!(
                    "{METRICS_CSV_HEADER}\n{}\n",
                    report.csv_row(cfg.variant.as_str(), cfg.seed)
                ),
            )?;
            fs::write(out.join("metrics.toml"), report.to_toml())?;
            println!(
                "{METRICS_CSV_HEADER}\n{}",
                report.csv_row(cfg.variant.as_str(), cfg.seed)
            );
        }
        Command::Render { common, scene } => {
            let ckpt = load_checkpoint(require(&common.checkpoint, "checkpoint")?, None)?;
            let (_, episodes) = read_shard(require(&common.dataset, "dataset")?)?;
            let Some(ep) = episodes.get(scene) else {
                bail!("dataset has {} scenes", episodes.len())
            };
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("render.png"));
            render_episode(
                &ckpt,
                ep,
                &out,
                common.seed.unwrap_or(ckpt.manifest.config.eval_seed),
            )?;
            info!("wrote {}", out.display());
        }
        Command::Attn { common, scene } => {
            let ckpt = load_checkpoint(require(&common.checkpoint, "checkpoint")?, None)?;
            let (_, episodes) = read_shard(require(&common.dataset, "dataset")?)?;
            let Some(ep) = episodes.get(scene) else {
                bail!("dataset has {} scenes", episodes.len())
            };
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("attention"));
            for p in dump_attention(&ckpt, ep, &out)? {
                info!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
