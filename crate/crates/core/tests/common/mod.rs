#![allow(dead_code)]

pub mod gradient;
pub mod oracles;

use tgqn::autograd::{Real, Tensor};
use tgqn::params::{ParamStore, Session};
use tgqn::pipeline::{order_observations, Batch, Model, OrderedContext, RunConfig, Variant};
use tgqn::scene_forge::{dataset_episode, Episode, EpisodeConfig};
use tgqn::seq_decoder::{Mode, NoiseStream};

/// 8x8 images, N = 2, M = 2, d = 16, one layer with two heads.
pub fn micro_config(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        num_views: 2,
        cores: 2,
        d: 16,
        layers: 1,
        heads: 2,
        ff_multiplier: 2,
        z_channels: 3,
        core_channels: 4,
        canvas_channels: 4,
        down_channels: 2,
        image_size: 8,
        batch_size: 2,
        ..RunConfig::default()
    }
}

pub fn episodes(count: usize, image_size: usize, seed: u64) -> Vec<Episode> {
    let cfg = EpisodeConfig {
        image_size,
        ..EpisodeConfig::default()
    };
    (0..count)
        .map(|i| dataset_episode(seed, i, &cfg).unwrap())
        .collect()
}

/// `batch` contexts of `n` views, one per episode, query = view `n`.
pub fn contexts(eps: &[Episode], n: usize, ordered: bool) -> Vec<OrderedContext> {
    eps.iter()
        .map(|ep| {
            if ordered {
                order_observations(&ep.views[..n], &ep.views[n]).unwrap()
            } else {
                OrderedContext::in_given_order(&ep.views[..n], &ep.views[n]).unwrap()
            }
        })
        .collect()
}

/// Total training loss of `model` at `params`, with fixed noise.
pub fn total_loss<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    batch: &Batch<T>,
    masked: bool,
    beta: f64,
    sigma: f64,
    noise_seed: u64,
) -> f64 {
    let mut s = Session::inference(params);
    let fwd = model
        .forward(
            &mut s,
            batch,
            Mode::Training,
            masked,
            &mut NoiseStream::new(noise_seed),
        )
        .unwrap();
    let loss = model.loss(&mut s, &fwd, beta, sigma).unwrap();
    s.value(loss.total).item().to_f64_lossy()
}

/// Analytic gradients of the total loss in store order.
pub fn loss_grads<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    batch: &Batch<T>,
    masked: bool,
    beta: f64,
    sigma: f64,
    noise_seed: u64,
) -> Vec<Option<Tensor<T>>> {
    let mut s = Session::new(params);
    let fwd = model
        .forward(
            &mut s,
            batch,
            Mode::Training,
            masked,
            &mut NoiseStream::new(noise_seed),
        )
        .unwrap();
    let loss = model.loss(&mut s, &fwd, beta, sigma).unwrap();
    s.param_grads(loss.total)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` around `x` in f64.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}
