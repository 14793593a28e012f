use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::Adam;
use crate::error::{Result, TgqnError};
use crate::objective_metrics::{sigma_schedule, METRICS_CSV_HEADER};
use crate::params::{ParamStore, Session};
use crate::scene_forge::{write_shard, CameraMode, Episode, ShardHeader};
use crate::seeds::{derive_seed, rng_for};
use crate::seq_decoder::{Mode, NoiseStream};

use super::checkpoint::{save_checkpoint, Checkpoint, Manifest, MetricPoint};
use super::config::RunConfig;
use super::context::{order_observations, Batch, OrderedContext};
use super::evaluate::{evaluate, split_dataset, EvalProtocol};
use super::model::Model;

pub const TRAIN_LOG_HEADER: &str = "step,loss,recon,kl,sigma,lr";

/// One logged optimisation step (values before the update).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub sigma: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.recon, self.kl, self.sigma, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Every step, not only the logged ones.
    pub records: Vec<StepRecord>,
    pub checkpoint: Checkpoint,
}

/// Draws the contexts of training step `step`: per example a random episode,
/// a random query view and `num_views` other views.
pub fn sample_batch(
    cfg: &RunConfig,
    episodes: &[Episode],
    step: u64,
) -> Result<Vec<OrderedContext>> {
    if episodes.is_empty() {
        return Err(TgqnError::config("training split is empty"));
    }
    let mut rng = rng_for(derive_seed(cfg.seed, 0xBA7C), step);
    (0..cfg.batch_size)
        .map(|_| {
            let ep = &episodes[rng.random_range(0..episodes.len())];
            let v = ep.views.len();
            if v <= cfg.num_views {
                return Err(TgqnError::config(format!(
                    "episodes have {v} views, need more than {}",
                    cfg.num_views
                )));
            }
            let picks = sample(&mut rng, v, cfg.num_views + 1).into_vec();
            let query = &ep.views[picks[0]];
            let obs: Vec<_> = picks[1..].iter().map(|&i| ep.views[i].clone()).collect();
            if cfg.order_train {
                order_observations(&obs, query)
            } else {
                OrderedContext::in_given_order(&obs, query)
            }
        })
        .collect()
}

fn dump_batch(cfg: &RunConfig, contexts: &[OrderedContext], step: u64) -> PathBuf {
    let path = cfg.out_dir.join(format!("nonfinite_step{step}.tgqn"));
    let episodes: Vec<Episode> = contexts
        .iter()
        .map(|c| {
            let mut views = c.observations.clone();
            views.push(c.query.clone());
            Episode { scene: None, views }
        })
        .collect();
    let header = ShardHeader {
        image_size: cfg.image_size,
        views_per_scene: cfg.num_views + 1,
        num_scenes: episodes.len(),
        camera_mode: CameraMode::Ring,
        seed: step,
    };
    if let Err(e) = fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| TgqnError::io(&cfg.out_dir, e))
        .and_then(|_| write_shard(&path, &header, &episodes))
    {
        log::error!("could not dump offending batch: {e}");
    }
    path
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| TgqnError::io(path, e))
}

/// Output files of a training run inside `out_dir`.
pub fn run_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join("checkpoint.tgqc"),
        out_dir.join("train_log.csv"),
        out_dir.join("heldout_metrics.csv"),
    )
}

/// Full training run. With `write_files`, the log, held-out metrics and
/// checkpoints go to `cfg.out_dir`.
pub fn train(cfg: &RunConfig, episodes: &[Episode], write_files: bool) -> Result<TrainReport> {
    train_until(cfg, episodes, write_files, cfg.max_steps)
}

/// [`train`] halted after `stop` steps; the schedules still span `max_steps`.
pub fn train_until(
    cfg: &RunConfig,
    episodes: &[Episode],
    write_files: bool,
    stop: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let stop = stop.min(cfg.max_steps);
    if let Some(ep) = episodes.first() {
        if ep.views[0].frame.size() != cfg.image_size {
            return Err(TgqnError::config(format!(
                "dataset image_size {} does not match config image_size {}",
                ep.views[0].frame.size(),
                cfg.image_size
            )));
        }
    }
    let (train_split, heldout) = split_dataset(episodes, cfg.holdout_fraction);
    let (model, mut params) = Model::new::<f32>(cfg, cfg.seed)?;
    info!(
        "{} model with {} parameters, {} training scenes",
        cfg.variant,
        params.num_scalars(),
        train_split.len()
    );
    let mut adam = Adam::new();
    let sigma_cfg = cfg.sigma();
    let (ckpt_path, log_path, metrics_path) = run_paths(&cfg.out_dir);
    if write_files {
        fs::create_dir_all(&cfg.out_dir).map_err(|e| TgqnError::io(&cfg.out_dir, e))?;
    }
    let mut records = Vec::with_capacity(stop as usize);
    let mut log_text = format!("{TRAIN_LOG_HEADER}\n");
    let mut metrics_text = format!("step,{METRICS_CSV_HEADER}\n");
    let mut history = Vec::new();
    let protocol = EvalProtocol {
        num_views: cfg.num_views,
        num_scenes: cfg.eval_scenes.min(heldout.len()),
        repeats: cfg.eval_repeats,
        seed: cfg.eval_seed,
        ordered: cfg.order_eval,
    };

    let held_out_eval = |step: u64,
                         params: &ParamStore<f32>,
                         history: &mut Vec<MetricPoint>,
                         text: &mut String|
     -> Result<()> {
        if protocol.num_scenes == 0 {
            return Ok(());
        }
        let report = evaluate(&model, params, heldout, &protocol, cfg.eval_masked)?;
        info!(
            "step {step}: held-out L1 {:.3} L2 {:.3} SSIM {:.4}",
            report.l1_mean, report.l2_mean, report.ssim_mean
        );
        history.push(MetricPoint {
            step,
            l1: report.l1_mean,
            l2: report.l2_mean,
            ssim: report.ssim_mean,
        });
        writeln!(
            text,
            "{step},{}",
            report.csv_row(cfg.variant.as_str(), cfg.seed)
        )
        .unwrap();
        Ok(())
    };

    for step in 0..stop {
        let sigma = sigma_schedule(step, &sigma_cfg);
        let lr = cfg.learning_rate(step);
        let contexts = sample_batch(cfg, train_split, step)?;
        let batch = Batch::<f32>::new(&contexts)?;
        let grads = {
            let mut s = Session::new(&params);
            let mut noise = NoiseStream::new(derive_seed(derive_seed(cfg.seed, 0x4015E), step));
            let fwd = model.forward(&mut s, &batch, Mode::Training, cfg.masked, &mut noise)?;
            let loss = model.loss(&mut s, &fwd, cfg.beta, sigma)?;
            let total = s.value(loss.total).item() as f64;
            let recon: f64 = loss.recon.iter().map(|&v| s.value(v).item() as f64).sum();
            let kl: f64 = loss
                .kl
                .iter()
                .flatten()
                .map(|&v| s.value(v).item() as f64)
                .sum();
            if !total.is_finite() {
                let dump = dump_batch(cfg, &contexts, step);
                return Err(TgqnError::NonFiniteLoss { step, dump });
            }
            let rec = StepRecord {
                step,
                loss: total,
                recon,
                kl,
                sigma,
                lr,
            };
            if step % cfg.log_every.max(1) == 0 || step + 1 == stop {
                info!("step {step}: loss {total:.3} recon {recon:.3} kl {kl:.4} sigma {sigma:.3}");
                writeln!(log_text, "{}", rec.csv_row()).unwrap();
            }
            records.push(rec);
            s.param_grads(loss.total)
        };
        let grad_refs: Vec<_> = grads.iter().map(Option::as_ref).collect();
        adam.update(lr, &mut params.tensors_mut(), &grad_refs);

        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != stop {
            held_out_eval(done, &params, &mut history, &mut metrics_text)?;
        }
        if write_files
            && cfg.checkpoint_every > 0
            && done % cfg.checkpoint_every == 0
            && done != stop
        {
            let manifest = Manifest {
                step: done,
                sigma,
                config: cfg.clone(),
                metric_history: history.clone(),
            };
            save_checkpoint(&ckpt_path, &manifest, &params)?;
            write_text(&log_path, &log_text)?;
        }
    }
    held_out_eval(stop, &params, &mut history, &mut metrics_text)?;
    let manifest = Manifest {
        step: stop,
        sigma: sigma_schedule(stop, &sigma_cfg),
        config: cfg.clone(),
        metric_history: history,
    };
    if write_files {
        save_checkpoint(&ckpt_path, &manifest, &params)?;
        write_text(&log_path, &log_text)?;
        write_text(&metrics_path, &metrics_text)?;
    }
    Ok(TrainReport {
        records,
        checkpoint: Checkpoint { manifest, params },
    })
}
