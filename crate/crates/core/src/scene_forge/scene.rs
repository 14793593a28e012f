use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::Vec3;
use crate::error::{Result, TgqnError};

pub type Rgb = [f64; 3];

/// Camera pose: position plus yaw/pitch. Forward direction is
/// `(cos p cos y, sin p, cos p sin y)` with `y` up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSpec {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
}

impl PoseSpec {
    pub fn new(position: [f64; 3], yaw: f64, pitch: f64) -> Self {
        PoseSpec {
            position,
            yaw: normalize_yaw(yaw),
            pitch,
        }
    }

    pub fn forward(&self) -> Vec3 {
        Vec3::new(
            self.pitch.cos() * self.yaw.cos(),
            self.pitch.sin(),
            self.pitch.cos() * self.yaw.sin(),
        )
    }

    pub fn to_array(&self) -> [f64; 5] {
        let [x, y, z] = self.position;
        [x, y, z, self.yaw, self.pitch]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        PoseSpec {
            position: [a[0], a[1], a[2]],
            yaw: a[3],
            pitch: a[4],
        }
    }

    /// Checks the pose invariants against a room of the given half extent.
    pub fn validate(&self, room_half_extent: f64) -> Result<()> {
        if !(-PI / 2.0..=PI / 2.0).contains(&self.pitch) {
            return Err(TgqnError::contract(format!(
                "pitch {} outside [-pi/2, pi/2]",
                self.pitch
            )));
        }
        if !(-PI..PI).contains(&self.yaw) {
            return Err(TgqnError::contract(format!(
                "yaw {} outside [-pi, pi)",
                self.yaw
            )));
        }
        if self
            .position
            .iter()
            .any(|c| !c.is_finite() || c.abs() >= room_half_extent)
        {
            return Err(TgqnError::contract(format!(
                "position {:?} not strictly inside the room",
                self.position
            )));
        }
        Ok(())
    }

    pub fn distance_to(&self, other: &PoseSpec) -> f64 {
        (Vec3::from_array(self.position) - Vec3::from_array(other.position)).norm()
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut y = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if y >= PI {
        y -= 2.0 * PI;
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
}

/// An object resting on the floor. `scale` is the sphere radius or the
/// box half-size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: [f64; 3],
    pub scale: f64,
    pub color: Rgb,
}

impl ObjectSpec {
    /// Radius of the object's footprint in the horizontal plane.
    pub fn horizontal_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere => self.scale,
            Shape::Box => self.scale * std::f64::consts::SQRT_2,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = Vec3::from_array(p) - Vec3::from_array(self.center);
        match self.shape {
            Shape::Sphere => d.norm() < self.scale,
            Shape::Box => {
                d.x.abs() < self.scale && d.y.abs() < self.scale && d.z.abs() < self.scale
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub room_half_extent: f64,
    pub wall_color: Rgb,
    pub floor_color: Rgb,
    pub objects: Vec<ObjectSpec>,
    pub light_position: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraMode {
    Ring,
    Free,
}

impl CameraMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CameraMode::Ring => "ring",
            CameraMode::Free => "free",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ring" => Some(CameraMode::Ring),
            "free" => Some(CameraMode::Free),
            _ => None,
        }
    }
}

/// Procedural room generator settings. Rooms are the cube
/// `[-h, h]^3` with the floor at `y = -h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub room_half_extent: f64,
    pub max_objects: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub palette: Vec<Rgb>,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub ring_pitch: f64,
    pub free_pitch_min: f64,
    pub free_pitch_max: f64,
    /// Clearance kept between objects, walls and the camera ring.
    pub clearance: f64,
    pub placement_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            room_half_extent: 1.0,
            max_objects: 3,
            min_scale: 0.12,
            max_scale: 0.25,
            palette: vec![
                [0.90, 0.20, 0.15],
                [0.15, 0.65, 0.25],
                [0.20, 0.35, 0.90],
                [0.95, 0.80, 0.15],
                [0.10, 0.80, 0.85],
                [0.85, 0.25, 0.80],
                [0.95, 0.55, 0.10],
                [0.55, 0.35, 0.20],
                [0.80, 0.80, 0.80],
                [0.45, 0.45, 0.50],
                [0.60, 0.75, 0.45],
                [0.75, 0.60, 0.85],
            ],
            ring_radius: 0.8,
            ring_height: -0.45,
            ring_pitch: -0.35,
            free_pitch_min: -PI / 6.0,
            free_pitch_max: PI / 6.0,
            clearance: 0.02,
            placement_retries: 100,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let h = self.room_half_extent;
        if !(h.is_finite() && h > 0.0) {
            return Err(TgqnError::config("room_half_extent must be positive"));
        }
        if self.max_objects == 0 {
            return Err(TgqnError::config("max_objects must be at least 1"));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return Err(TgqnError::config("need 0 < min_scale <= max_scale"));
        }
        if self.palette.is_empty() {
            return Err(TgqnError::config("color palette is empty"));
        }
        if self
            .palette
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(TgqnError::config("palette colors must lie in [0, 1]"));
        }
        if !(self.ring_radius > 0.0 && self.ring_radius < h && self.ring_height.abs() < h) {
            return Err(TgqnError::config(
                "camera ring must lie strictly inside the room",
            ));
        }
        if !(-PI / 2.0 <= self.free_pitch_min
            && self.free_pitch_min <= self.free_pitch_max
            && self.free_pitch_max <= PI / 2.0)
        {
            return Err(TgqnError::config(
                "free pitch range must be ordered within [-pi/2, pi/2]",
            ));
        }
        if self.ring_pitch.abs() > PI / 2.0 {
            return Err(TgqnError::config("ring pitch outside [-pi/2, pi/2]"));
        }
        Ok(())
    }
}

fn pick_color(rng: &mut ChaCha8Rng, palette: &[Rgb]) -> Rgb {
    palette[rng.random_range(0..palette.len())]
}

/// Samples a room deterministically from `seed`.
pub fn sample_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.room_half_extent;
    let count = rng.random_range(1..=cfg.max_objects);
    let wall_color = pick_color(&mut rng, &cfg.palette);
    let floor_color = pick_color(&mut rng, &cfg.palette);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for index in 0..count {
        let mut placed = None;
        for _ in 0..cfg.placement_retries {
            let shape = if rng.random_bool(0.5) {
                Shape::Sphere
            } else {
                Shape::Box
            };
            let scale = if cfg.max_scale > cfg.min_scale {
                rng.random_range(cfg.min_scale..cfg.max_scale)
            } else {
                cfg.min_scale
            };
            // Uniform over the disc inside the camera ring that can hold
            // this footprint; the remaining checks are walls and overlap.
            let probe = ObjectSpec {
                shape,
                center: [0.0; 3],
                scale,
                color: [0.0; 3],
            };
            let reach = (cfg.ring_radius - probe.horizontal_radius() - cfg.clearance).max(0.0);
            let radius = reach * rng.random::<f64>().sqrt();
            let angle = rng.random_range(-PI..PI);
            let (x, z) = (radius * angle.cos(), radius * angle.sin());
            let candidate = ObjectSpec {
                shape,
                center: [x, -h + scale, z],
                scale,
                color: pick_color(&mut rng, &cfg.palette),
            };
            if placement_ok(&candidate, &objects, cfg) {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(TgqnError::Placement {
                    object: index,
                    retries: cfg.placement_retries,
                })
            }
        }
    }
    let light_position = [
        rng.random_range(-0.5 * h..0.5 * h),
        rng.random_range(0.5 * h..0.9 * h),
        rng.random_range(-0.5 * h..0.5 * h),
    ];
    Ok(SceneSpec {
        room_half_extent: h,
        wall_color,
        floor_color,
        objects,
        light_position,
        seed,
    })
}

fn placement_ok(o: &ObjectSpec, placed: &[ObjectSpec], cfg: &GeneratorConfig) -> bool {
    let h = cfg.room_half_extent;
    let margin = cfg.clearance;
    let [x, y, z] = o.center;
    // Walls, floor and ceiling.
    if x.abs() + o.scale + margin >= h
        || z.abs() + o.scale + margin >= h
        || y + o.scale + margin >= h
    {
        return false;
    }
    // Keep the camera ring outside the object's footprint.
    let radial = x.hypot(z);
    if radial + o.horizontal_radius() + margin >= cfg.ring_radius {
        return false;
    }
    placed.iter().all(|p| {
        let d = (p.center[0] - x).hypot(p.center[2] - z);
        d > p.horizontal_radius() + o.horizontal_radius() + margin
    })
}

/// Checks every scene invariant; used by tests and the dataset loader.
pub fn scene_violations(scene: &SceneSpec, cfg: &GeneratorConfig) -> Vec<String> {
    let mut out = Vec::new();
    let h = scene.room_half_extent;
    if scene.objects.is_empty() || scene.objects.len() > cfg.max_objects {
        out.push(format!(
            "object count {} outside [1, {}]",
            scene.objects.len(),
            cfg.max_objects
        ));
    }
    for (i, o) in scene.objects.iter().enumerate() {
        if o.center.iter().any(|c| c.abs() >= h) {
            out.push(format!("object {i} center outside room"));
        }
        if o.center.iter().any(|c| c.abs() + o.scale > h) {
            out.push(format!("object {i} intersects a wall"));
        }
        if !(cfg.min_scale..=cfg.max_scale).contains(&o.scale) {
            out.push(format!(
                "object {i} scale {} outside configured range",
                o.scale
            ));
        }
    }
    if scene.light_position.iter().any(|c| c.abs() >= h) {
        out.push("light outside room".into());
    }
    out
}

/// Samples a camera pose deterministically from `seed`.
pub fn sample_pose(
    seed: u64,
    scene: &SceneSpec,
    mode: CameraMode,
    cfg: &GeneratorConfig,
) -> Result<PoseSpec> {
    cfg.validate()?;
    let h = scene.room_half_extent;
    if !(h.is_finite() && h > 0.0) {
        return Err(TgqnError::contract("scene has a non-positive room extent"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        CameraMode::Ring => {
            let theta = rng.random_range(-PI..PI);
            Ok(ring_pose(theta, cfg))
        }
        CameraMode::Free => {
            let margin = 0.05 * h;
            let lim = h - margin;
            // Uniform over the free interior: resample positions inside objects.
            let mut position = [0.0; 3];
            for _ in 0..1000 {
                position = [
                    rng.random_range(-lim..lim),
                    rng.random_range(-lim..lim),
                    rng.random_range(-lim..lim),
                ];
                if !scene.objects.iter().any(|o| o.contains(position)) {
                    break;
                }
            }
            let yaw = rng.random_range(-PI..PI);
            let pitch = if cfg.free_pitch_max > cfg.free_pitch_min {
                rng.random_range(cfg.free_pitch_min..cfg.free_pitch_max)
            } else {
                cfg.free_pitch_min
            };
            Ok(PoseSpec::new(position, yaw, pitch))
        }
    }
}

/// Ring camera at angle `theta`, facing the vertical centre axis.
pub fn ring_pose(theta: f64, cfg: &GeneratorConfig) -> PoseSpec {
    let (x, z) = (cfg.ring_radius * theta.cos(), cfg.ring_radius * theta.sin());
    let yaw = (-z).atan2(-x);
    PoseSpec::new([x, cfg.ring_height, z], yaw, cfg.ring_pitch)
}
