//! Episode generation and the binary shard format.
//!
//! Layout (little-endian): `b"TGQN"`, version byte `0x01`, `u32` header
//! length, UTF-8 `key=value` header lines, then per scene the poses as
//! `f32 [V, 5]` (x, y, z, yaw, pitch) followed by the images as
//! `u8 [V, H, W, 3]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::render::{render_view, Frame, RenderOptions};
use super::scene::{sample_pose, sample_scene, CameraMode, GeneratorConfig, PoseSpec, SceneSpec};
use crate::error::{Result, TgqnError};
use crate::seeds::derive_seed;

pub const SHARD_MAGIC: &[u8; 4] = b"TGQN";
pub const SHARD_VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub frame: Frame,
    pub pose: PoseSpec,
}

/// All views of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene: Option<SceneSpec>,
    pub views: Vec<View>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardHeader {
    pub image_size: usize,
    pub views_per_scene: usize,
    pub num_scenes: usize,
    pub camera_mode: CameraMode,
    pub seed: u64,
}

impl ShardHeader {
    fn to_text(&self) -> String {
        format!(
            "camera_mode={}\nimage_size={}\nnum_scenes={}\nseed={}\nviews_per_scene={}\n",
            self.camera_mode.as_str(),
            self.image_size,
            self.num_scenes,
            self.seed,
            self.views_per_scene
        )
    }

    fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("header line without '=': {line:?}"))?;
            if fields.insert(k.trim(), v.trim()).is_some() {
                return Err(format!("duplicate header key {k}"));
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| format!("missing header key {k}"))
        };
        let num = |k: &str| -> std::result::Result<usize, String> {
            get(k)?.parse().map_err(|e| format!("bad {k}: {e}"))
        };
        let header = ShardHeader {
            image_size: num("image_size")?,
            views_per_scene: num("views_per_scene")?,
            num_scenes: num("num_scenes")?,
            camera_mode: CameraMode::parse(get("camera_mode")?).ok_or("bad camera_mode")?,
            seed: get("seed")?.parse().map_err(|e| format!("bad seed: {e}"))?,
        };
        if fields.len() != 5 {
            return Err("unknown header keys".into());
        }
        Ok(header)
    }
}

/// Everything needed to synthesise episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub generator: GeneratorConfig,
    pub render: RenderOptions,
    pub image_size: usize,
    pub views_per_scene: usize,
    pub camera_mode: CameraMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            generator: GeneratorConfig::default(),
            render: RenderOptions::default(),
            image_size: 32,
            views_per_scene: 10,
            camera_mode: CameraMode::Ring,
        }
    }
}

/// Rounds a pose to the `f32` values stored on disk, keeping yaw in `[-pi, pi)`.
pub fn quantize_pose(pose: &PoseSpec) -> PoseSpec {
    let q = |v: f64| v as f32 as f64;
    let mut yaw = pose.yaw as f32;
    if yaw as f64 >= std::f64::consts::PI {
        yaw = f32::from_bits(yaw.to_bits() - 1);
    }
    if (yaw as f64) < -std::f64::consts::PI {
        yaw = f32::from_bits(yaw.to_bits() - 1);
    }
    PoseSpec {
        position: pose.position.map(q),
        yaw: yaw as f64,
        pitch: q(pose.pitch),
    }
}

/// Scene plus `views_per_scene` rendered views, all derived from `seed`.
pub fn generate_episode(seed: u64, cfg: &EpisodeConfig) -> Result<Episode> {
    let scene = sample_scene(derive_seed(seed, 0), &cfg.generator)?;
    let views = (0..cfg.views_per_scene)
        .map(|v| {
            let pose = quantize_pose(&sample_pose(
                derive_seed(seed, 1 + v as u64),
                &scene,
                cfg.camera_mode,
                &cfg.generator,
            )?);
            let frame = render_view(&scene, &pose, cfg.image_size, &cfg.render)?;
            Ok(View { frame, pose })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        scene: Some(scene),
        views,
    })
}

/// Episode `index` of a dataset generated from `seed`.
pub fn dataset_episode(seed: u64, index: usize, cfg: &EpisodeConfig) -> Result<Episode> {
    generate_episode(derive_seed(seed, 0x5CE4E + index as u64), cfg)
}

pub fn encode_shard(header: &ShardHeader, episodes: &[Episode]) -> Result<Vec<u8>> {
    if episodes.len() != header.num_scenes {
        return Err(TgqnError::contract("episode count does not match header"));
    }
    let text = header.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(SHARD_MAGIC);
    out.push(SHARD_VERSION);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for ep in episodes {
        if ep.views.len() != header.views_per_scene {
            return Err(TgqnError::contract(
                "episode view count does not match header",
            ));
        }
        for view in &ep.views {
            for v in view.pose.to_array() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for view in &ep.views {
            if view.frame.size() != header.image_size {
                return Err(TgqnError::contract("frame size does not match header"));
            }
            out.extend_from_slice(&view.frame.to_u8());
        }
    }
    Ok(out)
}

pub fn decode_shard(bytes: &[u8], path: &Path) -> Result<(ShardHeader, Vec<Episode>)> {
    let bad = |reason: String| TgqnError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 9 || &bytes[..4] != SHARD_MAGIC {
        return Err(bad("missing TGQN magic".into()));
    }
    if bytes[4] != SHARD_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = &bytes[9..];
    if body.len() < header_len {
        return Err(bad("truncated header".into()));
    }
    let text = std::str::from_utf8(&body[..header_len])
        .map_err(|e| bad(format!("header is not UTF-8: {e}")))?;
    let header = ShardHeader::parse(text).map_err(bad)?;
    let (v, s) = (header.views_per_scene, header.image_size);
    let record = v * 5 * 4 + v * s * s * 3;
    let payload = &body[header_len..];
    if payload.len() != record * header.num_scenes {
        return Err(bad(format!(
            "payload has {} bytes, expected {} for {} scenes",
            payload.len(),
            record * header.num_scenes,
            header.num_scenes
        )));
    }
    let mut episodes = Vec::with_capacity(header.num_scenes);
    for chunk in payload.chunks(record) {
        let (pose_bytes, image_bytes) = chunk.split_at(v * 20);
        let mut views = Vec::with_capacity(v);
        for i in 0..v {
            let mut a = [0.0; 5];
            for (j, slot) in a.iter_mut().enumerate() {
                let off = (i * 5 + j) * 4;
                *slot = f32::from_le_bytes(pose_bytes[off..off + 4].try_into().unwrap()) as f64;
            }
            let frame = Frame::from_u8(s, &image_bytes[i * s * s * 3..(i + 1) * s * s * 3])?;
            views.push(View {
                frame,
                pose: PoseSpec::from_array(a),
            });
        }
        episodes.push(Episode { scene: None, views });
    }
    Ok((header, episodes))
}

pub fn write_shard(path: &Path, header: &ShardHeader, episodes: &[Episode]) -> Result<()> {
    let bytes = encode_shard(header, episodes)?;
    let mut file = fs::File::create(path).map_err(|e| TgqnError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| TgqnError::io(path, e))?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<(ShardHeader, Vec<Episode>)> {
    let bytes = fs::read(path).map_err(|e| TgqnError::io(path, e))?;
    decode_shard(&bytes, path)
}

/// Generates `num_scenes` episodes and writes them as one shard.
pub fn generate_dataset(
    num_scenes: usize,
    views_per_scene: usize,
    camera_mode: CameraMode,
    seed: u64,
    out_path: &Path,
    base: &EpisodeConfig,
) -> Result<ShardHeader> {
    let cfg = EpisodeConfig {
        views_per_scene,
        camera_mode,
        ..base.clone()
    };
    let episodes = (0..num_scenes)
        .map(|i| dataset_episode(seed, i, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let header = ShardHeader {
        image_size: cfg.image_size,
        views_per_scene,
        num_scenes,
        camera_mode,
        seed,
    };
    write_shard(out_path, &header, &episodes)?;
    Ok(header)
}
