use rand::seq::SliceRandom;

use crate::error::{Result, TgqnError};
use crate::objective_metrics::{pixel_l1, pixel_l2, ssim, MetricsReport};
use crate::params::{ParamStore, Session};
use crate::repr_encoder::tensor_to_frames;
use crate::scene_forge::{Episode, Frame};
use crate::seeds::{derive_seed, rng_for};
use crate::seq_decoder::{Mode, NoiseStream};

use super::context::{order_observations, Batch, OrderedContext};
use super::model::Model;

/// Splits off the last `fraction` of the episodes for evaluation. With a
/// single episode both halves are that episode.
pub fn split_dataset(episodes: &[Episode], fraction: f64) -> (&[Episode], &[Episode]) {
    if episodes.len() <= 1 {
        return (episodes, episodes);
    }
    let held = ((episodes.len() as f64 * fraction).floor() as usize).clamp(1, episodes.len() - 1);
    episodes.split_at(episodes.len() - held)
}

/// How evaluation contexts are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalProtocol {
    pub num_views: usize,
    pub num_scenes: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Sort contexts by distance to each query instead of keeping the
    /// random draw order.
    pub ordered: bool,
}

/// Draws the contexts for one scene and repeat: `num_views` random views in
/// random order, every other view of the episode becomes a query.
pub fn eval_contexts(
    episode: &Episode,
    protocol: &EvalProtocol,
    scene: usize,
    repeat: usize,
) -> Result<Vec<OrderedContext>> {
    let v = episode.views.len();
    if v <= protocol.num_views {
        return Err(TgqnError::config(format!(
            "episode has {v} views, need more than {}",
            protocol.num_views
        )));
    }
    let mut rng = rng_for(derive_seed(protocol.seed, scene as u64), repeat as u64);
    let mut idx: Vec<usize> = (0..v).collect();
    idx.shuffle(&mut rng);
    let context: Vec<_> = idx[..protocol.num_views]
        .iter()
        .map(|&i| episode.views[i].clone())
        .collect();
    idx[protocol.num_views..]
        .iter()
        .map(|&q| {
            let query = &episode.views[q];
            if protocol.ordered {
                order_observations(&context, query)
            } else {
                OrderedContext::in_given_order(&context, query)
            }
        })
        .collect()
}

/// Scores `predict` over the protocol; `predict` gets the contexts of one
/// scene and repeat and returns one frame per context.
pub fn evaluate_with(
    episodes: &[Episode],
    protocol: &EvalProtocol,
    mut predict: impl FnMut(&[OrderedContext], usize, usize) -> Result<Vec<Frame>>,
) -> Result<MetricsReport> {
    if protocol.num_scenes > episodes.len() {
        return Err(TgqnError::config(format!(
            "asked for {} evaluation scenes, dataset split has {}",
            protocol.num_scenes,
            episodes.len()
        )));
    }
    let (mut l1, mut l2, mut ss) = (Vec::new(), Vec::new(), Vec::new());
    for (scene, ep) in episodes.iter().take(protocol.num_scenes).enumerate() {
        for repeat in 0..protocol.repeats {
            let contexts = eval_contexts(ep, protocol, scene, repeat)?;
            let frames = predict(&contexts, scene, repeat)?;
            if frames.len() != contexts.len() {
                return Err(TgqnError::contract(
                    "predictor returned the wrong number of frames",
                ));
            }
            for (ctx, pred) in contexts.iter().zip(&frames) {
                l1.push(pixel_l1(pred, &ctx.query.frame)?);
                l2.push(pixel_l2(pred, &ctx.query.frame)?);
                ss.push(ssim(pred, &ctx.query.frame)?);
            }
        }
    }
    MetricsReport::from_samples(&l1, &l2, &ss)
}

/// Generation-mode predictions of the query views; the decoder never sees
/// a target frame.
pub fn predict_queries(
    model: &Model,
    params: &ParamStore<f32>,
    contexts: &[OrderedContext],
    masked: bool,
    noise_seed: u64,
) -> Result<Vec<Frame>> {
    let mut s = Session::inference(params);
    let batch = Batch::<f32>::new(contexts)?;
    let fwd = model.forward(
        &mut s,
        &batch,
        Mode::Generation,
        masked,
        &mut NoiseStream::new(noise_seed),
    )?;
    tensor_to_frames(s.value(Model::query_prediction(&fwd)))
}

/// Held-out metrics of a trained model.
pub fn evaluate(
    model: &Model,
    params: &ParamStore<f32>,
    episodes: &[Episode],
    protocol: &EvalProtocol,
    masked: bool,
) -> Result<MetricsReport> {
    let size = model.encoder.cfg.image_size;
    if let Some(ep) = episodes
        .iter()
        .find(|e| e.views.iter().any(|v| v.frame.size() != size))
    {
        let found = ep
            .views
            .iter()
            .map(|v| v.frame.size())
            .find(|&s| s != size)
            .unwrap_or(0);
        return Err(TgqnError::config(format!(
            "dataset image_size {found} does not match model image_size {size}"
        )));
    }
    evaluate_with(episodes, protocol, |contexts, scene, repeat| {
        let seed = derive_seed(
            derive_seed(protocol.seed ^ 0xE7A1, scene as u64),
            repeat as u64,
        );
        predict_queries(model, params, contexts, masked, seed)
    })
}
