use crate::autograd::{Real, Tensor};
use crate::error::{Result, TgqnError};
use crate::repr_encoder::{frames_to_tensor, pose_to_vector, poses_to_tensor, PoseVector};
use crate::scene_forge::{Frame, PoseSpec, View};

/// Context views in rendering order plus the per-step queries and targets.
///
/// Step `n` renders the pose of observation `n + 1`; the last step renders
/// the query.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedContext {
    pub observations: Vec<View>,
    /// Original indices of `observations` in the input list.
    pub source_indices: Vec<usize>,
    pub step_queries: Vec<PoseVector>,
    pub step_poses: Vec<PoseSpec>,
    pub step_targets: Vec<Frame>,
    pub query: View,
}

impl OrderedContext {
    /// Keeps the observations in the order given.
    pub fn in_given_order(observations: &[View], query: &View) -> Result<Self> {
        Self::from_indices(observations, (0..observations.len()).collect(), query)
    }

    fn from_indices(observations: &[View], order: Vec<usize>, query: &View) -> Result<Self> {
        if observations.is_empty() {
            return Err(TgqnError::contract(
                "a context needs at least one observation",
            ));
        }
        let obs: Vec<View> = order.iter().map(|&i| observations[i].clone()).collect();
        let mut step_poses: Vec<PoseSpec> = obs[1..].iter().map(|v| v.pose).collect();
        step_poses.push(query.pose);
        let mut step_targets: Vec<Frame> = obs[1..].iter().map(|v| v.frame.clone()).collect();
        step_targets.push(query.frame.clone());
        Ok(OrderedContext {
            step_queries: step_poses.iter().map(pose_to_vector).collect(),
            step_poses,
            step_targets,
            observations: obs,
            source_indices: order,
            query: query.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Distances of the observations to the query, in context order.
    pub fn distances(&self) -> Vec<f64> {
        self.observations
            .iter()
            .map(|v| v.pose.distance_to(&self.query.pose))
            .collect()
    }
}

/// Stable ascending sort of the observations by camera distance to the query.
pub fn order_observations(observations: &[View], query: &View) -> Result<OrderedContext> {
    let mut order: Vec<usize> = (0..observations.len()).collect();
    let dist: Vec<f64> = observations
        .iter()
        .map(|v| v.pose.distance_to(&query.pose))
        .collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    OrderedContext::from_indices(observations, order, query)
}

/// Batched tensors for a list of equally sized contexts.
///
/// Observations are laid out example-major: row `b * N + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub batch: usize,
    pub views: usize,
    pub obs_images: Tensor<T>,
    pub obs_poses: Tensor<T>,
    pub step_queries: Vec<Tensor<T>>,
    pub step_targets: Vec<Tensor<T>>,
    pub query_pose: Tensor<T>,
    pub query_image: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(contexts: &[OrderedContext]) -> Result<Self> {
        let first = contexts
            .first()
            .ok_or_else(|| TgqnError::contract("empty batch"))?;
        let n = first.len();
        if contexts.iter().any(|c| c.len() != n) {
            return Err(TgqnError::contract(
                "all contexts in a batch need the same number of views",
            ));
        }
        let frames: Vec<&Frame> = contexts
            .iter()
            .flat_map(|c| c.observations.iter().map(|v| &v.frame))
            .collect();
        let poses: Vec<PoseVector> = contexts
            .iter()
            .flat_map(|c| c.observations.iter().map(|v| pose_to_vector(&v.pose)))
            .collect();
        let step_queries = (0..n)
            .map(|i| {
                poses_to_tensor(
                    &contexts
                        .iter()
                        .map(|c| c.step_queries[i])
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let step_targets = (0..n)
            .map(|i| {
                frames_to_tensor(
                    &contexts
                        .iter()
                        .map(|c| &c.step_targets[i])
                        .collect::<Vec<_>>(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Batch {
            batch: contexts.len(),
            views: n,
            obs_images: frames_to_tensor(&frames)?,
            obs_poses: poses_to_tensor(&poses),
            step_queries,
            step_targets,
            query_pose: poses_to_tensor(
                &contexts
                    .iter()
                    .map(|c| pose_to_vector(&c.query.pose))
                    .collect::<Vec<_>>(),
            ),
            query_image: frames_to_tensor(
                &contexts.iter().map(|c| &c.query.frame).collect::<Vec<_>>(),
            )?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view_at(x: f64) -> View {
        View {
            frame: Frame::filled(4, (x.abs() / 4.0) as f32),
            pose: PoseSpec::new([x, 0.0, 0.0], 0.0, 0.0),
        }
    }

    #[test]
    fn sorts_by_distance() {
        let obs = [view_at(3.0), view_at(1.0), view_at(2.0)];
        let ctx = order_observations(&obs, &view_at(0.0)).unwrap();
        assert_eq!(ctx.source_indices, vec![1, 2, 0]);
        assert_eq!(ctx.step_targets[0], obs[2].frame);
        assert_eq!(ctx.step_targets[2], view_at(0.0).frame);
        assert_eq!(ctx.step_poses[1], obs[0].pose);
    }

    #[test]
    fn ties_keep_input_order() {
        let obs = [view_at(1.0), view_at(-1.0), view_at(0.5)];
        let ctx = order_observations(&obs, &view_at(0.0)).unwrap();
        assert_eq!(ctx.source_indices, vec![2, 0, 1]);
        assert!(order_observations(&[], &view_at(0.0)).is_err());
    }

    #[test]
    fn batch_layout_is_example_major() {
        let obs = [view_at(0.5), view_at(0.25)];
        let c1 = OrderedContext::in_given_order(&obs, &view_at(0.0)).unwrap();
        let c2 =
            OrderedContext::in_given_order(&[view_at(0.75), view_at(0.5)], &view_at(0.0)).unwrap();
        let b = Batch::<f64>::new(&[c1, c2]).unwrap();
        assert_eq!(b.obs_poses.shape(), &[4, 7]);
        assert_eq!(b.obs_poses.data()[7], 0.25);
        assert_eq!(b.obs_poses.data()[14], 0.75);
        assert_eq!(b.step_targets.len(), 2);
        assert_eq!(b.query_image.shape(), &[2, 3, 4, 4]);
    }
}
