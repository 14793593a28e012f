//! Independent reference implementations shared by the test targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tgqn::autograd::Tensor;
use tgqn::scene_forge::Frame;
use tgqn::seq_decoder::{init_state, DecoderConfig, LatentGaussian, StepOutput};

pub fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Frame {
    Frame::new(
        size,
        (0..size * size * 3).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

pub fn formula_frame(kind: u32, size: usize) -> Frame {
    let mut px = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            for ch in 0..3 {
                let (r, c, ch) = (r as f64, c as f64, ch as f64);
                let v = match kind {
                    0 => 0.5 + 0.4 * (0.7 * r + 1.3 * c + ch).sin(),
                    1 => {
                        0.5 + 0.35
                            * (0.5 * r - 0.9 * c + 2.0 * ch).cos()
                            * (0.2 * c + 0.1 * r).sin()
                    }
                    3 => 0.45 + 0.36 * (0.7 * r + 1.3 * c + ch).sin() + 0.05 * (1.7 * r * c).cos(),
                    _ => ((r as u64 * 7 + c as u64 * 13 + ch as u64 * 5) % 17) as f64 / 16.0,
                };
                px.push(v as f32);
            }
        }
    }
    Frame::new(size, px).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(
        shape,
        &(0..n)
            .map(|_| rng.random_range(-scale..scale))
            .collect::<Vec<_>>(),
    )
}

/// Monte Carlo estimate of KL(q || p) and its standard error.
pub fn kl_monte_carlo(
    q: &LatentGaussian<f64>,
    p: &LatentGaussian<f64>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let log_density = |x: f64, m: f64, lv: f64| {
        -0.5 * (lv + (x - m).powi(2) / lv.exp() + (2.0 * std::f64::consts::PI).ln())
    };
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut v = 0.0;
        for i in 0..q.mean.len() {
            let (qm, qv) = (q.mean.data()[i], q.log_variance.data()[i]);
            let (pm, pv) = (p.mean.data()[i], p.log_variance.data()[i]);
            let e: f64 = StandardNormal.sample(rng);
            let x = qm + (0.5 * qv).exp() * e;
            v += log_density(x, qm, qv) - log_density(x, pm, pv);
        }
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
    (mean, se)
}

pub fn naive_nll(t: &Frame, p: &Frame, sigma: f64) -> f64 {
    let mut total = 0.0;
    for r in 0..t.size() {
        for c in 0..t.size() {
            for ch in 0..3 {
                let d = t.get(r, c, ch) as f64 - p.get(r, c, ch) as f64;
                total += 0.5 * (d / sigma).powi(2)
                    + sigma.ln()
                    + 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
        }
    }
    total
}

pub fn step_output(rng: &mut ChaCha8Rng, cores: usize) -> (StepOutput<f64>, Tensor<f64>) {
    let cfg = DecoderConfig {
        image_size: 8,
        d: 16,
        cores,
        z_channels: 3,
        core_channels: 4,
        canvas_channels: 4,
        down_channels: 2,
        kernel: 3,
    };
    let shape = [2, 3, 2, 2];
    let mut lat = || LatentGaussian {
        mean: gaussian(rng, &shape, 1.0),
        log_variance: gaussian(rng, &shape, 1.0),
    };
    let priors = (0..cores).map(|_| lat()).collect();
    let posteriors = (0..cores).map(|_| lat()).collect();
    let pred = gaussian(rng, &[2, 3, 8, 8], 0.5).map(|v| v + 0.5);
    let target = gaussian(rng, &[2, 3, 8, 8], 0.5).map(|v| v + 0.5);
    let state = init_state(&cfg, 2);
    (
        StepOutput {
            predicted: pred,
            priors,
            posteriors,
            state_in: state.clone(),
            state_out: state,
        },
        target,
    )
}

/// Direct 11x11 windowed SSIM over every valid window position.
pub fn naive_ssim(a: &Frame, b: &Frame) -> f64 {
    let s = a.size();
    let mut w = [[0.0f64; 11]; 11];
    let mut norm = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for ch in 0..3 {
        let mut sum = 0.0;
        for y in 0..=s - 11 {
            for x in 0..=s - 11 {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = w[i][j] / norm;
                        let (p, q) = (
                            a.get(y + i, x + j, ch) as f64,
                            b.get(y + i, x + j, ch) as f64,
                        );
                        mx += k * p;
                        my += k * q;
                        mxx += k * p * p;
                        myy += k * q * q;
                        mxy += k * p * q;
                    }
                }
                let (vx, vy, cxy) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += sum / ((s - 10) * (s - 10)) as f64;
    }
    total / 3.0
}

// Values from scikit-image 0.25.2 `structural_similarity` with
// gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
// data_range=1.0, channel_axis=2 on the same formula images.
pub const SKIMAGE_SSIM: &[(usize, u32, u32, f64)] = &[
    (11, 0, 1, 0.06962108229937217),
    (11, 0, 2, -0.016303881396083474),
    (11, 1, 2, -0.01596137081436286),
    (11, 0, 3, 0.9792888626594003),
    (16, 0, 1, 0.011290392005405442),
    (16, 0, 2, 0.009274691794729123),
    (16, 1, 2, 0.04546497451347747),
    (16, 0, 3, 0.9810246039719939),
    (32, 0, 1, 0.008498055936963901),
    (32, 0, 2, 0.005365691998357154),
    (32, 1, 2, 0.028301559794373394),
    (32, 0, 3, 0.9797190275137474),
];
