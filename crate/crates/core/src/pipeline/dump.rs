use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::attention_core::AttentionTensor;
use crate::error::{Result, TgqnError};
use crate::params::Session;
use crate::scene_forge::{Episode, Frame};
use crate::seq_decoder::{Mode, NoiseStream};

use super::checkpoint::Checkpoint;
use super::config::Variant;
use super::context::{order_observations, Batch, OrderedContext};
use super::evaluate::predict_queries;
use super::model::Model;

pub const ATTENTION_CSV_HEADER: &str = "layer,head,step,view,score";
const CELL: usize = 32;

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TgqnError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| TgqnError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = enc.write_header().map_err(to_err)?;
    w.write_image_data(data).map_err(to_err)?;
    w.finish().map_err(to_err)
}

/// Writes frames side by side as one RGB PNG.
pub fn write_frame_strip(path: &Path, frames: &[&Frame]) -> Result<()> {
    let size = frames
        .first()
        .ok_or_else(|| TgqnError::contract("no frames to write"))?
        .size();
    let width = size * frames.len();
    let mut data = vec![0u8; width * size * 3];
    for (i, f) in frames.iter().enumerate() {
        let bytes = f.to_u8();
        for r in 0..size {
            let dst = (r * width + i * size) * 3;
            data[dst..dst + size * 3].copy_from_slice(&bytes[r * size * 3..(r + 1) * size * 3]);
        }
    }
    write_png(path, width, size, png::ColorType::Rgb, &data)
}

/// Grayscale image of `rows` (values in `[0, 1]`), each cell `CELL` pixels wide.
fn write_matrix_png(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let (h, w) = (rows.len(), rows.first().map_or(0, Vec::len));
    let mut data = vec![0u8; h * w * CELL * CELL];
    for y in 0..h * CELL {
        for x in 0..w * CELL {
            data[y * w * CELL + x] =
                (rows[y / CELL][x / CELL].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    write_png(path, w * CELL, h * CELL, png::ColorType::Grayscale, &data)
}

/// Context used for dumps: the first `N` views against view `N` as query.
pub fn dump_context(episode: &Episode, num_views: usize, ordered: bool) -> Result<OrderedContext> {
    if episode.views.len() <= num_views {
        return Err(TgqnError::config(format!(
            "episode needs more than {num_views} views"
        )));
    }
    let obs = &episode.views[..num_views];
    let query = &episode.views[num_views];
    if ordered {
        order_observations(obs, query)
    } else {
        OrderedContext::in_given_order(obs, query)
    }
}

/// CSV text of every layer/head score, one line per (step, view) cell.
pub fn attention_csv(att: &AttentionTensor) -> String {
    let mut s = format!("{ATTENTION_CSV_HEADER}\n");
    for (l, layer) in att.scores.iter().enumerate() {
        for (h, head) in layer.iter().enumerate() {
            for (i, row) in head.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    writeln!(s, "{},{},{},{},{v}", l + 1, h + 1, i + 1, j + 1).unwrap();
                }
            }
        }
    }
    s
}

/// Attention scores of a T-GQN checkpoint on one episode: `attention.csv`
/// plus one grayscale PNG per rendering step showing the head-averaged
/// last-layer rows seen up to that step. Returns the written paths.
pub fn dump_attention(
    ckpt: &Checkpoint,
    episode: &Episode,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let cfg = &ckpt.manifest.config;
    if cfg.variant != Variant::Tgqn {
        return Err(TgqnError::UnsupportedVariant {
            expected: "tgqn".into(),
            found: cfg.variant.to_string(),
        });
    }
    let model = ckpt.model()?;
    let ctx = dump_context(episode, cfg.num_views, cfg.order_eval)?;
    let mut s = Session::inference(&ckpt.params);
    let batch = Batch::<f32>::new(std::slice::from_ref(&ctx))?;
    let fwd = model.forward(
        &mut s,
        &batch,
        Mode::Generation,
        cfg.eval_masked,
        &mut NoiseStream::new(cfg.eval_seed),
    )?;
    let att = model
        .attention_scores(&s, &fwd, 0)
        .expect("tgqn forward yields attention");
    fs::create_dir_all(out_dir).map_err(|e| TgqnError::io(out_dir, e))?;
    let mut written = Vec::new();
    let csv = out_dir.join("attention.csv");
    fs::write(&csv, attention_csv(&att)).map_err(|e| TgqnError::io(&csv, e))?;
    written.push(csv);
    let mean = att.mean_last_layer();
    for step in 1..=mean.len() {
        let rows: Vec<Vec<f64>> = mean
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if i < step {
                    r.clone()
                } else {
                    vec![0.0; r.len()]
                }
            })
            .collect();
        let path = out_dir.join(format!("attention_step{step}.png"));
        write_matrix_png(&path, &rows)?;
        written.push(path);
    }
    Ok(written)
}

/// Contexts, ground-truth query and predicted query side by side.
pub fn render_episode(
    ckpt: &Checkpoint,
    episode: &Episode,
    out_path: &Path,
    noise_seed: u64,
) -> Result<()> {
    let cfg = &ckpt.manifest.config;
    let model: Model = ckpt.model()?;
    let ctx = dump_context(episode, cfg.num_views, cfg.order_eval)?;
    let pred = predict_queries(
        &model,
        &ckpt.params,
        std::slice::from_ref(&ctx),
        cfg.eval_masked,
        noise_seed,
    )?;
    let mut frames: Vec<&Frame> = ctx.observations.iter().map(|v| &v.frame).collect();
    frames.push(&ctx.query.frame);
    frames.push(&pred[0]);
    write_frame_strip(out_path, &frames)
}
