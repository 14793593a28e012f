use crate::attention_core::{build_attention_mask, AttentionTensor, Transformer};
use crate::autograd::{Real, Tensor, Var};
use crate::error::{Result, TgqnError};
use crate::objective_metrics::{loss_nodes, LossNodes};
use crate::params::{init_rng, ParamBuilder, ParamStore, Session};
use crate::repr_encoder::Encoder;
use crate::seeds::derive_seed;
use crate::seq_decoder::{
    decode_sequence, init_state, Decoder, Mode, NoiseStream, StateNodes, StepNodes,
};

use super::config::{RunConfig, Variant};
use super::context::Batch;

/// Architecture of one variant; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub num_views: usize,
    pub encoder: Encoder,
    pub transformer: Option<Transformer>,
    pub decoder: Decoder,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardNodes<T> {
    /// Per-view representations `[B, N, d]`.
    pub reps: Var,
    /// Conditioning vector `[B, d]` of each rendering step.
    pub conditioning: Vec<Var>,
    /// Attention nodes, one per layer (T-GQN only).
    pub attention: Vec<Var>,
    pub steps: Vec<StepNodes>,
    /// Targets matching `steps`, used by the loss.
    pub targets: Vec<Tensor<T>>,
}

impl Model {
    /// Builds the architecture and draws initial parameters from `seed`.
    pub fn new<T: Real>(cfg: &RunConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(derive_seed(seed, 0x1417));
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let encoder = Encoder::new(cfg.encoder(), &mut pb.scope("encoder"))?;
        let transformer = match cfg.variant {
            Variant::Tgqn => Some(Transformer::new(
                cfg.transformer(),
                &mut pb.scope("transformer"),
            )?),
            _ => None,
        };
        let decoder = Decoder::new(cfg.decoder(), &mut pb.scope("decoder"))?;
        Ok((
            Model {
                variant: cfg.variant,
                num_views: cfg.num_views,
                encoder,
                transformer,
                decoder,
            },
            store,
        ))
    }

    /// Encodes, attends or sums, then decodes. In training mode the decoder
    /// sees the step targets; in generation mode it never does.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        batch: &Batch<T>,
        mode: Mode,
        masked: bool,
        noise: &mut NoiseStream,
    ) -> Result<ForwardNodes<T>> {
        let (b, n, d) = (batch.batch, batch.views, self.encoder.cfg.d);
        if n == 0 {
            return Err(TgqnError::contract(
                "forward needs at least one observation",
            ));
        }
        let images = s.input(batch.obs_images.clone());
        let poses = s.input(batch.obs_poses.clone());
        let flat = self.encoder.forward(s, images, poses)?;
        let reps = s.graph.reshape(flat, &[b, n, d]);
        let per_view: Vec<Var> = (0..n).map(|i| s.graph.select(reps, i)).collect();

        let (conditioning, attention) = match (self.variant, &self.transformer) {
            (Variant::Tgqn, Some(t)) => {
                let mask = build_attention_mask(n, masked)?;
                let (out, atts) = t.forward(s, reps, &mask)?;
                ((0..n).map(|i| s.graph.select(out, i)).collect(), atts)
            }
            (Variant::Tgqn, None) => {
                return Err(TgqnError::contract("tgqn model without a transformer"))
            }
            (Variant::Seqgqn, _) => {
                let sum = s.graph.sum_exact(&per_view);
                (vec![sum; n], Vec::new())
            }
            (Variant::Gqn, _) => (vec![s.graph.sum_exact(&per_view)], Vec::new()),
        };

        let (queries, targets): (Vec<Var>, Vec<Tensor<T>>) = match self.variant {
            Variant::Gqn => (
                vec![s.input(batch.query_pose.clone())],
                vec![batch.query_image.clone()],
            ),
            _ => (
                batch
                    .step_queries
                    .iter()
                    .map(|q| s.input(q.clone()))
                    .collect(),
                batch.step_targets.clone(),
            ),
        };
        let target_vars: Option<Vec<Var>> = match mode {
            Mode::Training => Some(targets.iter().map(|t| s.input(t.clone())).collect()),
            Mode::Generation => None,
        };
        let initial = StateNodes::bind(&mut s.graph, &init_state(&self.decoder.cfg, b));
        let steps = decode_sequence(
            s,
            &self.decoder,
            &conditioning,
            &queries,
            target_vars.as_deref(),
            mode,
            &initial,
            noise,
        )?;
        Ok(ForwardNodes {
            reps,
            conditioning,
            attention,
            steps,
            targets,
        })
    }

    /// Training objective for this variant.
    pub fn loss<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        fwd: &ForwardNodes<T>,
        beta: f64,
        sigma: f64,
    ) -> Result<LossNodes> {
        let beta = if self.variant == Variant::Gqn {
            1.0
        } else {
            beta
        };
        loss_nodes(&mut s.graph, &fwd.steps, &fwd.targets, beta, sigma)
    }

    /// Attention scores of batch item `b` (empty for the baselines).
    pub fn attention_scores<T: Real>(
        &self,
        s: &Session<'_, T>,
        fwd: &ForwardNodes<T>,
        b: usize,
    ) -> Option<AttentionTensor> {
        if fwd.attention.is_empty() {
            return None;
        }
        let probs: Vec<&Tensor<T>> = fwd
            .attention
            .iter()
            .map(|&a| s.graph.attention_probs(a).expect("attention node"))
            .collect();
        Some(AttentionTensor::from_probs(&probs, b))
    }

    /// Prediction for the query pose: the last rendering step's frame.
    pub fn query_prediction<T>(fwd: &ForwardNodes<T>) -> Var {
        fwd.steps.last().expect("at least one step").predicted
    }
}
