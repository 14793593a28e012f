//! Loss terms, the pixel-noise schedule and image-quality metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Result, TgqnError};
use crate::scene_forge::Frame;
use crate::seq_decoder::{LatentGaussian, StepNodes, StepOutput};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Per-step reconstruction terms and per-step, per-core KL terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon_per_step: Vec<f64>,
    pub kl_per_step_per_core: Vec<Vec<f64>>,
    pub beta: f64,
    pub sigma: f64,
}

impl LossBreakdown {
    pub fn recon_sum(&self) -> f64 {
        self.recon_per_step.iter().sum()
    }

    pub fn kl_sum(&self) -> f64 {
        self.kl_per_step_per_core.iter().flatten().sum()
    }
}

/// KL(q || p) between diagonal Gaussians, summed over latent dimensions
/// and averaged over the leading batch axis.
pub fn kl_diag_gaussian<T: Real>(q: &LatentGaussian<T>, p: &LatentGaussian<T>) -> Result<f64> {
    let shape = q.mean.shape();
    if [
        q.log_variance.shape(),
        p.mean.shape(),
        p.log_variance.shape(),
    ]
    .iter()
    .any(|s| *s != shape)
    {
        return Err(TgqnError::contract("kl_diag_gaussian shape mismatch"));
    }
    let batch = shape.first().copied().unwrap_or(1).max(1);
    let mut total = 0.0;
    for i in 0..q.mean.len() {
        let (qm, qv) = (
            q.mean.data()[i].to_f64_lossy(),
            q.log_variance.data()[i].to_f64_lossy(),
        );
        let (pm, pv) = (
            p.mean.data()[i].to_f64_lossy(),
            p.log_variance.data()[i].to_f64_lossy(),
        );
        let diff = qm - pm;
        total += 0.5 * (pv - qv + ((qv - pv).exp() + diff * diff * (-pv).exp()) - 1.0);
    }
    Ok(total / batch as f64)
}

/// The two parts of the Gaussian negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconTerms {
    /// `sum (t - p)^2 / (2 sigma^2)`.
    pub quadratic: f64,
    /// `P * (ln sigma + ln(2 pi) / 2)`.
    pub log_normalizer: f64,
}

impl ReconTerms {
    pub fn total(&self) -> f64 {
        self.quadratic + self.log_normalizer
    }
}

fn recon_terms_slices(target: &[f64], predicted: &[f64], sigma: f64) -> Result<ReconTerms> {
    if !(sigma > 0.0) {
        return Err(TgqnError::contract(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if target.len() != predicted.len() {
        return Err(TgqnError::contract("recon_nll shape mismatch"));
    }
    let sq: f64 = target
        .iter()
        .zip(predicted)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok(ReconTerms {
        quadratic: sq / (2.0 * sigma * sigma),
        log_normalizer: target.len() as f64 * (sigma.ln() + 0.5 * LN_2PI),
    })
}

pub fn recon_terms(target: &Frame, predicted: &Frame, sigma: f64) -> Result<ReconTerms> {
    if target.size() != predicted.size() {
        return Err(TgqnError::contract("recon_nll frame sizes differ"));
    }
    let f = |fr: &Frame| fr.pixels().iter().map(|&v| v as f64).collect::<Vec<_>>();
    recon_terms_slices(&f(target), &f(predicted), sigma)
}

/// Negative log-likelihood of `target` under `N(predicted, sigma^2)` per
/// pixel and channel, normalising constant included.
pub fn recon_nll(target: &Frame, predicted: &Frame, sigma: f64) -> Result<f64> {
    Ok(recon_terms(target, predicted, sigma)?.total())
}

/// Batch-mean NLL for `[B, ...]` tensors.
pub fn recon_nll_batch<T: Real>(
    target: &Tensor<T>,
    predicted: &Tensor<T>,
    sigma: f64,
) -> Result<f64> {
    if target.shape() != predicted.shape() {
        return Err(TgqnError::contract("recon_nll shape mismatch"));
    }
    let batch = target.shape().first().copied().unwrap_or(1).max(1);
    Ok(
        recon_terms_slices(&target.to_f64_vec(), &predicted.to_f64_vec(), sigma)?.total()
            / batch as f64,
    )
}

/// `sum_n recon_n + beta * sum_n sum_m KL(q_n^m || pi_n^m)`.
pub fn tgqn_loss<T: Real>(
    outputs: &[StepOutput<T>],
    targets: &[Tensor<T>],
    beta: f64,
    sigma: f64,
) -> Result<LossBreakdown> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(TgqnError::contract(
            "tgqn_loss needs one target per step output",
        ));
    }
    let mut recon_per_step = Vec::with_capacity(outputs.len());
    let mut kl_per_step_per_core = Vec::with_capacity(outputs.len());
    for (out, target) in outputs.iter().zip(targets) {
        if out.posteriors.len() != out.priors.len() || out.posteriors.is_empty() {
            return Err(TgqnError::contract(
                "loss needs training-mode outputs with posteriors",
            ));
        }
        recon_per_step.push(recon_nll_batch(target, &out.predicted, sigma)?);
        kl_per_step_per_core.push(
            out.posteriors
                .iter()
                .zip(&out.priors)
                .map(|(q, p)| kl_diag_gaussian(q, p))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let recon: f64 = recon_per_step.iter().sum();
    let kl: f64 = kl_per_step_per_core.iter().flatten().sum();
    Ok(LossBreakdown {
        total: recon + beta * kl,
        recon_per_step,
        kl_per_step_per_core,
        beta,
        sigma,
    })
}

/// Single-step loss with unit KL weight.
pub fn gqn_loss<T: Real>(
    output: &StepOutput<T>,
    target: &Tensor<T>,
    sigma: f64,
) -> Result<LossBreakdown> {
    tgqn_loss(
        std::slice::from_ref(output),
        std::slice::from_ref(target),
        1.0,
        sigma,
    )
}

/// Differentiable version of [`tgqn_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossNodes {
    pub total: Var,
    pub recon: Vec<Var>,
    pub kl: Vec<Vec<Var>>,
}

pub fn loss_nodes<T: Real>(
    g: &mut Graph<T>,
    steps: &[StepNodes],
    targets: &[Tensor<T>],
    beta: f64,
    sigma: f64,
) -> Result<LossNodes> {
    if steps.len() != targets.len() || steps.is_empty() {
        return Err(TgqnError::contract("loss needs one target per step"));
    }
    if !(sigma > 0.0) {
        return Err(TgqnError::contract(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let mut recon = Vec::new();
    let mut kl = Vec::new();
    for (step, target) in steps.iter().zip(targets) {
        if step.posteriors.len() != step.priors.len() || step.posteriors.is_empty() {
            return Err(TgqnError::contract(
                "loss needs training-mode outputs with posteriors",
            ));
        }
        recon.push(g.gaussian_nll(step.predicted, target, T::from_f64_lossy(sigma)));
        kl.push(
            step.posteriors
                .iter()
                .zip(&step.priors)
                .map(|(q, p)| g.kl_diag(q.mean, q.log_variance, p.mean, p.log_variance))
                .collect::<Vec<_>>(),
        );
    }
    let mut total = recon[0];
    for &r in &recon[1..] {
        total = g.add(total, r);
    }
    let flat: Vec<Var> = kl.iter().flatten().copied().collect();
    let mut kl_sum = flat[0];
    for &k in &flat[1..] {
        kl_sum = g.add(kl_sum, k);
    }
    let weighted = g.scale(kl_sum, T::from_f64_lossy(beta));
    let total = g.add(total, weighted);
    Ok(LossNodes { total, recon, kl })
}

/// Linear anneal from `start` to `end` over the first `fraction` of `max_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub start: f64,
    pub end: f64,
    pub fraction: f64,
    pub max_steps: u64,
}

impl SigmaSchedule {
    pub fn new(max_steps: u64) -> Self {
        SigmaSchedule {
            start: 2.0,
            end: 0.7,
            fraction: 0.8,
            max_steps,
        }
    }
}

pub fn sigma_schedule(step: u64, cfg: &SigmaSchedule) -> f64 {
    let span = cfg.fraction * cfg.max_steps as f64;
    if span <= 0.0 || step as f64 >= span {
        return cfg.end;
    }
    cfg.start + (cfg.end - cfg.start) * (step as f64 / span)
}

fn check_sizes(a: &Frame, b: &Frame) -> Result<()> {
    if a.size() != b.size() {
        return Err(TgqnError::contract(format!(
            "frame sizes differ: {} vs {}",
            a.size(),
            b.size()
        )));
    }
    Ok(())
}

/// Mean absolute difference on the 0-255 scale.
pub fn pixel_l1(a: &Frame, b: &Frame) -> Result<f64> {
    check_sizes(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (255.0 * x as f64 - 255.0 * y as f64).abs())
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// Root-mean-square difference on the 0-255 scale.
pub fn pixel_l2(a: &Frame, b: &Frame) -> Result<f64> {
    check_sizes(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = 255.0 * x as f64 - 255.0 * y as f64;
            d * d
        })
        .sum();
    Ok((sum / a.pixels().len() as f64).sqrt())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable weighted mean over every fully contained window.
fn filter_valid(img: &[f64], size: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let out = size + 1 - k;
    let mut rows = vec![0.0; size * out];
    for r in 0..size {
        for c in 0..out {
            rows[r * out + c] = (0..k).map(|i| w[i] * img[r * size + c + i]).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for r in 0..out {
        for c in 0..out {
            res[r * out + c] = (0..k).map(|i| w[i] * rows[(r + i) * out + c]).sum();
        }
    }
    res
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, data range 1, over the valid region, averaged over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_sizes(a, b)?;
    let size = a.size();
    if size < SSIM_WINDOW {
        return Err(TgqnError::contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {size}"
        )));
    }
    let w = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a
            .pixels()
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = b
            .pixels()
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| v as f64)
            .collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, size, &w);
        let my = filter_valid(&y, size, &w);
        let mxx = filter_valid(&prod(&x, &x), size, &w);
        let myy = filter_valid(&prod(&y, &y), size, &w);
        let mxy = filter_valid(&prod(&x, &y), size, &w);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Aggregated evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub l1_mean: f64,
    pub l1_std: f64,
    pub l2_mean: f64,
    pub l2_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub num_images: usize,
}

pub const METRICS_CSV_HEADER: &str =
    "variant,seed,l1_mean,l1_std,l2_mean,l2_std,ssim_mean,ssim_std,num_images";

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    /// Population mean and standard deviation of per-image scores.
    pub fn from_samples(l1: &[f64], l2: &[f64], ssim: &[f64]) -> Result<Self> {
        if l1.len() != l2.len() || l1.len() != ssim.len() {
            return Err(TgqnError::contract("metric sample lists differ in length"));
        }
        let (l1_mean, l1_std) = mean_std(l1);
        let (l2_mean, l2_std) = mean_std(l2);
        let (ssim_mean, ssim_std) = mean_std(ssim);
        Ok(MetricsReport {
            l1_mean,
            l1_std,
            l2_mean,
            l2_std,
            ssim_mean,
            ssim_std,
            num_images: l1.len(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metrics serialise")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| TgqnError::config(format!("metrics report: {e}")))
    }

    /// One CSV row matching [`METRICS_CSV_HEADER`].
    pub fn csv_row(&self, variant: &str, seed: u64) -> String {
        let mut s = String::new();
        write!(
            s,
            "{variant},{seed},{},{},{},{},{},{},{}",
            self.l1_mean,
            self.l1_std,
            self.l2_mean,
            self.l2_std,
            self.ssim_mean,
            self.ssim_std,
            self.num_images
        )
        .unwrap();
        s
    }
}
