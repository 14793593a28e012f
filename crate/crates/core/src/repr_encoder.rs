//! Per-view convolutional encoder and the pose featurisation shared with
//! the decoder.

use crate::autograd::{Real, Tensor, Var};
use crate::error::{Result, TgqnError};
use crate::params::{Conv2dLayer, ParamBuilder, ParamStore, Session};
use crate::scene_forge::{Frame, PoseSpec};

pub const POSE_DIM: usize = 7;

/// `(x, y, z, cos yaw, sin yaw, cos pitch, sin pitch)`; positions stay in
/// room units, which are already O(1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseVector(pub [f64; POSE_DIM]);

pub fn pose_to_vector(pose: &PoseSpec) -> PoseVector {
    let [x, y, z] = pose.position;
    PoseVector([
        x,
        y,
        z,
        pose.yaw.cos(),
        pose.yaw.sin(),
        pose.pitch.cos(),
        pose.pitch.sin(),
    ])
}

/// Stacks pose vectors into a `[B, 7]` tensor.
pub fn poses_to_tensor<T: Real>(poses: &[PoseVector]) -> Tensor<T> {
    let flat: Vec<f64> = poses.iter().flat_map(|p| p.0).collect();
    Tensor::from_f64(&[poses.len(), POSE_DIM], &flat)
}

/// Stacks frames into a `[B, 3, S, S]` tensor.
pub fn frames_to_tensor<T: Real>(frames: &[&Frame]) -> Result<Tensor<T>> {
    let size = frames
        .first()
        .ok_or_else(|| TgqnError::contract("no frames to stack"))?
        .size();
    let mut data = Vec::with_capacity(frames.len() * 3 * size * size);
    for f in frames {
        if f.size() != size {
            return Err(TgqnError::config(format!(
                "frame size {} differs from {size}",
                f.size()
            )));
        }
        data.extend(f.to_chw().into_iter().map(|v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::new(&[frames.len(), 3, size, size], data))
}

/// Splits a `[B, 3, S, S]` tensor back into frames (values clamped to `[0, 1]`).
pub fn tensor_to_frames<T: Real>(t: &Tensor<T>) -> Result<Vec<Frame>> {
    if t.rank() != 4 || t.dim(1) != 3 || t.dim(2) != t.dim(3) {
        return Err(TgqnError::contract(format!(
            "expected [B, 3, S, S], got {:?}",
            t.shape()
        )));
    }
    let size = t.dim(2);
    t.data()
        .chunks(3 * size * size)
        .map(|c| {
            Frame::from_chw(
                size,
                &c.iter()
                    .map(|v| v.to_f64_lossy() as f32)
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    /// Representation width.
    pub d: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(TgqnError::config(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.d < 4 || !self.d.is_multiple_of(4) {
            return Err(TgqnError::config(format!(
                "d = {} must be a positive multiple of 4",
                self.d
            )));
        }
        Ok(())
    }
}

/// Six-stage tower followed by global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stages: [Conv2dLayer; 6],
}

impl Encoder {
    pub fn new<T: Real>(cfg: EncoderConfig, pb: &mut ParamBuilder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let (q, h) = (d / 4, d / 2);
        let stages = [
            Conv2dLayer::new(pb, "conv1", 3, q, 2, 2, 0)?,
            Conv2dLayer::new(pb, "conv2", q + POSE_DIM, q, 3, 1, 1)?,
            Conv2dLayer::new(pb, "conv3", q, h, 2, 2, 0)?,
            Conv2dLayer::new(pb, "conv4", h, h, 3, 1, 1)?,
            Conv2dLayer::new(pb, "conv5", h, d, 3, 1, 1)?,
            Conv2dLayer::new(pb, "conv6", d, d, 1, 1, 0)?,
        ];
        Ok(Encoder { cfg, stages })
    }

    /// `images [B, 3, S, S]`, `poses [B, 7]` -> representations `[B, d]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, images: Var, poses: Var) -> Result<Var> {
        let shape = s.graph.shape(images).to_vec();
        let size = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(TgqnError::config(format!(
                "encoder expects [B, 3, {size}, {size}] images, got {shape:?}"
            )));
        }
        if s.graph.shape(poses) != [shape[0], POSE_DIM] {
            return Err(TgqnError::config(format!(
                "encoder expects [B, {POSE_DIM}] poses"
            )));
        }
        let [c1, c2, c3, c4, c5, c6] = &self.stages;
        let g = c1.forward(s, images);
        let x1 = s.graph.relu(g);
        let tiled = s.graph.tile_spatial(poses, size / 2, size / 2);
        let with_pose = s.graph.concat(&[x1, tiled]);
        let g = c2.forward(s, with_pose);
        let g = s.graph.relu(g);
        let x2 = s.graph.add(g, x1);
        let g = c3.forward(s, x2);
        let x3 = s.graph.relu(g);
        let g = c4.forward(s, x3);
        let g = s.graph.relu(g);
        let x4 = s.graph.add(g, x3);
        let g = c5.forward(s, x4);
        let x5 = s.graph.relu(g);
        let x6 = c6.forward(s, x5);
        Ok(s.graph.mean_spatial(x6))
    }
}

/// Encodes a single observation outside of any training graph.
pub fn encode_observation<T: Real>(
    frame: &Frame,
    pose: &PoseSpec,
    encoder: &Encoder,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    if frame.size() != encoder.cfg.image_size {
        return Err(TgqnError::config(format!(
            "frame size {} does not match encoder image_size {}",
            frame.size(),
            encoder.cfg.image_size
        )));
    }
    let mut s = Session::inference(params);
    let img = s.input(frames_to_tensor(&[frame])?);
    let pv = s.input(poses_to_tensor(&[pose_to_vector(pose)]));
    let r = encoder.forward(&mut s, img, pv)?;
    Ok(s.value(r).clone().reshaped(&[encoder.cfg.d]))
}

/// Element-wise sum of representations; correctly rounded so the result is
/// bit-identical for any ordering of `reps`.
pub fn aggregate_sum<T: Real>(reps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = reps
        .first()
        .ok_or_else(|| TgqnError::contract("aggregate_sum of an empty list"))?;
    if reps.iter().any(|r| r.shape() != first.shape()) {
        return Err(TgqnError::contract(
            "aggregate_sum over differently shaped representations",
        ));
    }
    let mut g = crate::autograd::Graph::new();
    let vars: Vec<Var> = reps.iter().map(|r| g.constant(r.clone())).collect();
    let sum = g.sum_exact(&vars);
    Ok(g.value(sum).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_rng;

    #[test]
    fn zero_pose_vector() {
        let v = pose_to_vector(&PoseSpec::new([0.0; 3], 0.0, 0.0));
        assert_eq!(v.0, [0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let v = pose_to_vector(&PoseSpec::new([0.0; 3], std::f64::consts::FRAC_PI_2, 0.0));
        assert!(v.0[3].abs() < 1e-9 && (v.0[4] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encoder_shapes_and_errors() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = init_rng(0);
        let cfg = EncoderConfig {
            image_size: 8,
            d: 16,
        };
        let enc = Encoder::new(cfg, &mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
        assert_eq!(store.len(), 12);
        let pose = PoseSpec::new([0.1, -0.2, 0.3], 0.5, -0.1);
        let r = encode_observation(&Frame::filled(8, 0.4), &pose, &enc, &store).unwrap();
        assert_eq!(r.shape(), &[16]);
        assert!(r.all_finite());
        assert!(matches!(
            encode_observation(&Frame::filled(16, 0.4), &pose, &enc, &store),
            Err(TgqnError::Config(_))
        ));
        assert!(EncoderConfig {
            image_size: 10,
            d: 16
        }
        .validate()
        .is_err());
    }

    #[test]
    fn aggregate_identities() {
        let r = Tensor::<f32>::from_f64(&[3], &[1.5, -2.0, 0.25]);
        assert!(aggregate_sum(std::slice::from_ref(&r)).unwrap().bit_eq(&r));
        let neg = r.map(|v| -v);
        assert!(aggregate_sum(&[r, neg])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(
            aggregate_sum::<f32>(&[]),
            Err(TgqnError::Contract(_))
        ));
    }
}
