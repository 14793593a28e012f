//! Sequential DRAW-style decoder: M convolutional LSTM generation and
//! inference cores writing to a shared canvas, with every state carried
//! over from one rendering step to the next.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Result, TgqnError};
use crate::params::{Conv2dLayer, ConvT2dLayer, LinearLayer, ParamBuilder, Session};
use crate::repr_encoder::{tensor_to_frames, POSE_DIM};
use crate::scene_forge::Frame;

/// Spatial reduction between image and core grid.
pub const GRID_SCALE: usize = 4;
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub image_size: usize,
    /// Width of the conditioning representation.
    pub d: usize,
    /// Number of generation/inference core pairs.
    pub cores: usize,
    pub z_channels: usize,
    pub core_channels: usize,
    pub canvas_channels: usize,
    /// Channels of the downsampled canvas and target fed to the cores.
    pub down_channels: usize,
    /// Odd kernel size of the LSTM gate and latent convolutions.
    pub kernel: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cores == 0 {
            return Err(TgqnError::config("decoder needs at least one core"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(GRID_SCALE) {
            return Err(TgqnError::config(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(TgqnError::config(format!(
                "decoder kernel {} must be odd",
                self.kernel
            )));
        }
        if [
            self.d,
            self.z_channels,
            self.core_channels,
            self.canvas_channels,
            self.down_channels,
        ]
        .contains(&0)
        {
            return Err(TgqnError::config("decoder widths must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / GRID_SCALE
    }
}

/// Convolutional LSTM cell whose gates also receive a per-example bias
/// computed from the conditioning vector.
#[derive(Debug, Clone, PartialEq)]
struct ConvLstm {
    gates: Conv2dLayer,
    cond: LinearLayer,
    channels: usize,
}

impl ConvLstm {
    fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        cond: usize,
        c: usize,
        k: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(ConvLstm {
            gates: Conv2dLayer::new(&mut s, "gates", c_in + c, 4 * c, k, 1, k / 2)?,
            cond: LinearLayer::new(&mut s, "cond", cond, 4 * c)?,
            channels: c,
        })
    }

    fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        input: Var,
        cond: Var,
        state: CoreNodes,
    ) -> CoreNodes {
        let c = self.channels;
        let x = s.graph.concat(&[input, state.hidden]);
        let pre = self.gates.forward(s, x);
        let bias = self.cond.forward(s, cond);
        let pre = s.graph.add_spatial(pre, bias);
        let i = s.graph.slice(pre, 0, c);
        let i = s.graph.sigmoid(i);
        let f = s.graph.slice(pre, c, c);
        let f = s.graph.sigmoid(f);
        let o = s.graph.slice(pre, 2 * c, c);
        let o = s.graph.sigmoid(o);
        let g = s.graph.slice(pre, 3 * c, c);
        let g = s.graph.tanh(g);
        let keep = s.graph.mul(f, state.cell);
        let write = s.graph.mul(i, g);
        let cell = s.graph.add(keep, write);
        let t = s.graph.tanh(cell);
        let hidden = s.graph.mul(o, t);
        CoreNodes { cell, hidden }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CoreParams {
    canvas_down: Conv2dLayer,
    gen: ConvLstm,
    inf: ConvLstm,
    prior: Conv2dLayer,
    posterior: Conv2dLayer,
    upsample: ConvT2dLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    cores: Vec<CoreParams>,
    target_down: Conv2dLayer,
    head: Conv2dLayer,
}

impl Decoder {
    pub fn new<T: Real>(cfg: DecoderConfig, pb: &mut ParamBuilder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let (c, z, u, dn, k) = (
            cfg.core_channels,
            cfg.z_channels,
            cfg.canvas_channels,
            cfg.down_channels,
            cfg.kernel,
        );
        let cond = cfg.d + POSE_DIM;
        let cores = (0..cfg.cores)
            .map(|m| {
                let mut s = pb.scope(&format!("core{m}"));
                Ok(CoreParams {
                    canvas_down: Conv2dLayer::new(
                        &mut s,
                        "canvas_down",
                        u,
                        dn,
                        GRID_SCALE,
                        GRID_SCALE,
                        0,
                    )?,
                    gen: ConvLstm::new(&mut s, "gen", z + dn, cond, c, k)?,
                    inf: ConvLstm::new(&mut s, "inf", 2 * dn + c, cond, c, k)?,
                    prior: Conv2dLayer::zeroed(&mut s, "prior", c, 2 * z, k, 1, k / 2)?,
                    posterior: Conv2dLayer::zeroed(&mut s, "posterior", c, 2 * z, k, 1, k / 2)?,
                    upsample: ConvT2dLayer::new(&mut s, "upsample", c, u, GRID_SCALE)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            cfg,
            cores,
            target_down: Conv2dLayer::new(pb, "target_down", 3, dn, GRID_SCALE, GRID_SCALE, 0)?,
            head: Conv2dLayer::new(pb, "head", u, 3, 1, 1, 0)?,
        })
    }
}

/// Cell and hidden maps of one core, `[B, c, g, g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreState<T> {
    pub cell: Tensor<T>,
    pub hidden: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T> {
    pub gen: Vec<CoreState<T>>,
    pub inf: Vec<CoreState<T>>,
    /// `[B, c_u, S, S]`.
    pub canvas: Tensor<T>,
}

impl<T: Real> DecoderState<T> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        let cores = |a: &[CoreState<T>], b: &[CoreState<T>]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| x.cell.bit_eq(&y.cell) && x.hidden.bit_eq(&y.hidden))
        };
        cores(&self.gen, &other.gen)
            && cores(&self.inf, &other.inf)
            && self.canvas.bit_eq(&other.canvas)
    }

    pub fn all_finite(&self) -> bool {
        self.gen
            .iter()
            .chain(&self.inf)
            .all(|c| c.cell.all_finite() && c.hidden.all_finite())
            && self.canvas.all_finite()
    }
}

/// All-zero decoder state for a batch of `batch` examples.
pub fn init_state<T: Real>(cfg: &DecoderConfig, batch: usize) -> DecoderState<T> {
    let g = cfg.grid();
    let core = || CoreState {
        cell: Tensor::zeros(&[batch, cfg.core_channels, g, g]),
        hidden: Tensor::zeros(&[batch, cfg.core_channels, g, g]),
    };
    DecoderState {
        gen: (0..cfg.cores).map(|_| core()).collect(),
        inf: (0..cfg.cores).map(|_| core()).collect(),
        canvas: Tensor::zeros(&[batch, cfg.canvas_channels, cfg.image_size, cfg.image_size]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoreNodes {
    pub cell: Var,
    pub hidden: Var,
}

/// Graph handles of a [`DecoderState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateNodes {
    pub gen: Vec<CoreNodes>,
    pub inf: Vec<CoreNodes>,
    pub canvas: Var,
}

impl StateNodes {
    pub fn bind<T: Real>(g: &mut Graph<T>, state: &DecoderState<T>) -> Self {
        let mut core = |c: &CoreState<T>| CoreNodes {
            cell: g.constant(c.cell.clone()),
            hidden: g.constant(c.hidden.clone()),
        };
        let gen = state.gen.iter().map(&mut core).collect();
        let inf = state.inf.iter().map(&mut core).collect();
        StateNodes {
            gen,
            inf,
            canvas: g.constant(state.canvas.clone()),
        }
    }

    pub fn read<T: Real>(&self, g: &Graph<T>) -> DecoderState<T> {
        let core = |c: &CoreNodes| CoreState {
            cell: g.value(c.cell).clone(),
            hidden: g.value(c.hidden).clone(),
        };
        DecoderState {
            gen: self.gen.iter().map(core).collect(),
            inf: self.inf.iter().map(core).collect(),
            canvas: g.value(self.canvas).clone(),
        }
    }
}

/// Diagonal Gaussian over `[B, z, g, g]`; log-variance already clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian<T> {
    pub mean: Tensor<T>,
    pub log_variance: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentNodes {
    pub mean: Var,
    pub log_variance: Var,
}

impl LatentNodes {
    pub fn read<T: Real>(&self, g: &Graph<T>) -> LatentGaussian<T> {
        LatentGaussian {
            mean: g.value(self.mean).clone(),
            log_variance: g.value(self.log_variance).clone(),
        }
    }
}

/// Deterministic standard-normal noise for the reparameterised samples.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        Tensor::from_f64(shape, &data)
    }
}

/// Result of one micro-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroStep {
    pub state: StateNodes,
    pub prior: LatentNodes,
    pub posterior: Option<LatentNodes>,
    pub noise: Var,
    pub z: Var,
    /// What this micro-step added to the canvas.
    pub canvas_delta: Var,
}

fn latent<T: Real>(s: &mut Session<'_, T>, conv: &Conv2dLayer, h: Var, z: usize) -> LatentNodes {
    let out = conv.forward(s, h);
    let mean = s.graph.slice(out, 0, z);
    let lv = s.graph.slice(out, z, z);
    let log_variance = s.graph.clamp(
        lv,
        T::from_f64_lossy(LOGVAR_MIN),
        T::from_f64_lossy(LOGVAR_MAX),
    );
    LatentNodes { mean, log_variance }
}

/// `mean + exp(log_variance / 2) * noise`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, lat: LatentNodes, noise: Var) -> Var {
    let half = g.scale(lat.log_variance, T::from_f64_lossy(0.5));
    let std = g.exp(half);
    let scaled = g.mul(std, noise);
    g.add(lat.mean, scaled)
}

/// Conditioning vector `[r*, pose]`, `[B, d + 7]`.
pub fn condition<T: Real>(s: &mut Session<'_, T>, r_star: Var, query_pose: Var) -> Var {
    s.graph.concat(&[r_star, query_pose])
}

/// One generation (and, in training, inference) update of core `m`.
/// `target_features` is the downsampled target, required in training mode.
#[allow(clippy::too_many_arguments)]
pub fn core_micro_step<T: Real>(
    s: &mut Session<'_, T>,
    decoder: &Decoder,
    m: usize,
    state: &StateNodes,
    cond: Var,
    target_features: Option<Var>,
    mode: Mode,
    noise: &mut NoiseStream,
) -> Result<MicroStep> {
    let cfg = &decoder.cfg;
    let core = decoder
        .cores
        .get(m)
        .ok_or_else(|| TgqnError::contract(format!("core index {m} out of range")))?;
    let batch = s.graph.shape(state.canvas)[0];
    let u_down = core.canvas_down.forward(s, state.canvas);
    let mut next = state.clone();
    let prior = latent(s, &core.prior, state.gen[m].hidden, cfg.z_channels);
    let posterior = match (mode, target_features) {
        (Mode::Training, Some(target)) => {
            let input = s.graph.concat(&[target, u_down, state.gen[m].hidden]);
            next.inf[m] = core.inf.forward(s, input, cond, state.inf[m]);
            Some(latent(
                s,
                &core.posterior,
                next.inf[m].hidden,
                cfg.z_channels,
            ))
        }
        (Mode::Training, None) => {
            return Err(TgqnError::contract("training mode requires a target"))
        }
        (Mode::Generation, _) => None,
    };
    let g = cfg.grid();
    let eps = noise.sample::<T>(&[batch, cfg.z_channels, g, g]);
    let eps = s.input(eps);
    let z = reparameterize(&mut s.graph, posterior.unwrap_or(prior), eps);
    let input = s.graph.concat(&[z, u_down]);
    next.gen[m] = core.gen.forward(s, input, cond, state.gen[m]);
    let canvas_delta = core.upsample.forward(s, next.gen[m].hidden);
    next.canvas = s.graph.add(state.canvas, canvas_delta);
    Ok(MicroStep {
        state: next,
        prior,
        posterior,
        noise: eps,
        z,
        canvas_delta,
    })
}

/// Graph handles for one rendering step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNodes {
    /// `[B, 3, S, S]` in `(0, 1)`.
    pub predicted: Var,
    pub priors: Vec<LatentNodes>,
    pub posteriors: Vec<LatentNodes>,
    pub micro: Vec<MicroStep>,
    pub state_in: StateNodes,
    pub state_out: StateNodes,
}

/// Materialised step output.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub predicted: Tensor<T>,
    pub priors: Vec<LatentGaussian<T>>,
    pub posteriors: Vec<LatentGaussian<T>>,
    pub state_in: DecoderState<T>,
    pub state_out: DecoderState<T>,
}

impl<T: Real> StepOutput<T> {
    pub fn frames(&self) -> Result<Vec<Frame>> {
        tensor_to_frames(&self.predicted)
    }
}

impl StepNodes {
    pub fn read<T: Real>(&self, g: &Graph<T>) -> StepOutput<T> {
        StepOutput {
            predicted: g.value(self.predicted).clone(),
            priors: self.priors.iter().map(|l| l.read(g)).collect(),
            posteriors: self.posteriors.iter().map(|l| l.read(g)).collect(),
            state_in: self.state_in.read(g),
            state_out: self.state_out.read(g),
        }
    }
}

/// Runs all M micro-steps from `state_in` and reads the frame off the canvas.
#[allow(clippy::too_many_arguments)]
pub fn render_step<T: Real>(
    s: &mut Session<'_, T>,
    decoder: &Decoder,
    r_star: Var,
    query_pose: Var,
    target: Option<Var>,
    state_in: &StateNodes,
    mode: Mode,
    noise: &mut NoiseStream,
) -> Result<StepNodes> {
    if mode == Mode::Training && target.is_none() {
        return Err(TgqnError::contract("training mode requires a target"));
    }
    let cond = condition(s, r_star, query_pose);
    let target_features = match (mode, target) {
        (Mode::Training, Some(t)) => Some(decoder.target_down.forward(s, t)),
        _ => None,
    };
    let mut state = state_in.clone();
    let mut micro = Vec::with_capacity(decoder.cfg.cores);
    for m in 0..decoder.cfg.cores {
        let step = core_micro_step(s, decoder, m, &state, cond, target_features, mode, noise)?;
        state = step.state.clone();
        micro.push(step);
    }
    let logits = decoder.head.forward(s, state.canvas);
    let predicted = s.graph.sigmoid(logits);
    Ok(StepNodes {
        predicted,
        priors: micro.iter().map(|m| m.prior).collect(),
        posteriors: micro.iter().filter_map(|m| m.posterior).collect(),
        micro,
        state_in: state_in.clone(),
        state_out: state,
    })
}

/// Renders the `N` steps in order, threading each step's final state into
/// the next. `targets` must be given exactly in training mode.
#[allow(clippy::too_many_arguments)]
pub fn decode_sequence<T: Real>(
    s: &mut Session<'_, T>,
    decoder: &Decoder,
    r_stars: &[Var],
    query_poses: &[Var],
    targets: Option<&[Var]>,
    mode: Mode,
    initial: &StateNodes,
    noise: &mut NoiseStream,
) -> Result<Vec<StepNodes>> {
    let n = r_stars.len();
    if n == 0 || query_poses.len() != n || targets.is_some_and(|t| t.len() != n) {
        return Err(TgqnError::contract(format!(
            "decode_sequence length mismatch: {n} representations, {} poses, {:?} targets",
            query_poses.len(),
            targets.map(<[Var]>::len)
        )));
    }
    match (mode, targets) {
        (Mode::Training, None) => {
            return Err(TgqnError::contract("training mode requires targets"))
        }
        (Mode::Generation, Some(_)) => {
            return Err(TgqnError::contract("generation mode takes no targets"))
        }
        _ => {}
    }
    let mut state = initial.clone();
    let mut steps = Vec::with_capacity(n);
    for i in 0..n {
        let target = targets.map(|t| t[i]);
        let step = render_step(
            s,
            decoder,
            r_stars[i],
            query_poses[i],
            target,
            &state,
            mode,
            noise,
        )?;
        state = step.state_out.clone();
        steps.push(step);
    }
    Ok(steps)
}
