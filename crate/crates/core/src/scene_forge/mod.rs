//! Procedural rooms-with-objects scenes and a flat-shaded raycaster that
//! renders posed views of them.

pub mod geometry;
mod render;
mod scene;
mod shard;

pub use render::{camera_ray, render_view, trace, Frame, RenderOptions};
pub use scene::{
    normalize_yaw, ring_pose, sample_pose, sample_scene, scene_violations, CameraMode,
    GeneratorConfig, ObjectSpec, PoseSpec, Rgb, SceneSpec, Shape,
};
pub use shard::{
    dataset_episode, decode_shard, encode_shard, generate_dataset, generate_episode, quantize_pose,
    read_shard, write_shard, Episode, EpisodeConfig, ShardHeader, View, SHARD_MAGIC, SHARD_VERSION,
};
