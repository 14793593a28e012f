//! Finite-difference check of the total loss on the micro model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgqn::params::{ParamId, ParamStore};
use tgqn::pipeline::{Batch, Model, Variant};

use super::{central_diff, contexts, episodes, loss_grads, micro_config, rel_err, total_loss};

pub const BETA: f64 = 3.0;
pub const SIGMA: f64 = 0.8;
pub const SAMPLES: usize = 240;

/// Parameter coordinates spread over every tensor of the store.
fn sample_coords(sizes: &[(ParamId, usize)], rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let per = SAMPLES.div_ceil(sizes.len());
    sizes
        .iter()
        .flat_map(|&(id, len)| {
            (0..per.min(len))
                .map(|_| (id, rng.random_range(0..len)))
                .collect::<Vec<_>>()
        })
        .collect()
}

pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Compares analytic gradients (f32 or f64) with f64 central differences of
/// step `eps`; `floor` bounds the denominator of the relative error.
pub fn gradient_check(
    variant: Variant,
    analytic_f32: bool,
    eps: f64,
    floor: f64,
    tol: f64,
) -> GradReport {
    let cfg = micro_config(variant);
    let (model, mut params) = Model::new::<f32>(&cfg, 21).unwrap();
    randomize_zero_weights(&mut params, 23);
    let params64 = params.cast::<f64>();
    let eps_data = episodes(cfg.batch_size, cfg.image_size, 21);
    let ctxs = contexts(&eps_data, cfg.num_views, true);
    let batch64 = Batch::<f64>::new(&ctxs).unwrap();
    let grads: Vec<Option<Vec<f64>>> = if analytic_f32 {
        let batch = Batch::<f32>::new(&ctxs).unwrap();
        loss_grads(&model, &params, &batch, true, BETA, SIGMA, 4)
            .into_iter()
            .map(|g| g.map(|t| t.to_f64_vec()))
            .collect()
    } else {
        loss_grads(&model, &params64, &batch64, true, BETA, SIGMA, 4)
            .into_iter()
            .map(|g| g.map(|t| t.to_f64_vec()))
            .collect()
    };
    let sizes: Vec<_> = params64
        .ids()
        .map(|id| (id, params64.get(id).len()))
        .collect();
    let coords = sample_coords(&sizes, &mut ChaCha8Rng::seed_from_u64(22));
    let mut report = GradReport {
        checked: 0,
        worst: 0.0,
        failures: vec![],
    };
    for (id, idx) in coords {
        let an = grads[id.index()].as_ref().map_or(0.0, |g| g[idx]);
        let fd = central_diff(
            |v| {
                let mut p = params64.clone();
                p.get_mut(id).data_mut()[idx] = v;
                total_loss(&model, &p, &batch64, true, BETA, SIGMA, 4)
            },
            params64.get(id).data()[idx],
            eps,
        );
        let err = rel_err(an, fd, floor);
        report.checked += 1;
        report.worst = report.worst.max(err);
        if err >= tol {
            report.failures.push(format!(
                "{}[{idx}]: analytic {an} vs fd {fd}",
                params64.name(id)
            ));
        }
    }
    report
}

/// The latent heads start at zero, which makes every posterior equal its
/// prior; refill them with the usual fan-in bound so the KL terms are
/// checked away from that point.
pub fn randomize_zero_weights(params: &mut ParamStore<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let zero = params.get(id).data().iter().all(|&v| v == 0.0);
        if params.name(id).ends_with(".w") && zero {
            let shape = params.get(id).shape().to_vec();
            let bound = (3.0 / shape[1..].iter().product::<usize>() as f32).sqrt();
            for v in params.get_mut(id).data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
}
