use super::geometry::{exit_room, intersect_box, intersect_sphere, Hit, Ray, Vec3};
use super::scene::{PoseSpec, Rgb, SceneSpec, Shape};
use crate::error::{Result, TgqnError};

/// Square RGB image, row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    size: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(TgqnError::contract(format!(
                "frame of size {size} needs {} values, got {}",
                size * size * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TgqnError::contract("frame values must lie in [0, 1]"));
        }
        Ok(Frame { size, pixels })
    }

    pub fn filled(size: usize, value: f32) -> Self {
        Frame {
            size,
            pixels: vec![value.clamp(0.0, 1.0); size * size * 3],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.size + col) * 3 + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        self.pixels[(row * self.size + col) * 3 + channel] = value.clamp(0.0, 1.0);
    }

    /// 8-bit quantisation, `round(255 v)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(size: usize, bytes: &[u8]) -> Result<Self> {
        Frame::new(size, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Channel-major copy, `3 x H x W`.
    pub fn to_chw(&self) -> Vec<f32> {
        let p = self.size * self.size;
        let mut out = vec![0.0; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                out[c * p + i] = self.pixels[i * 3 + c];
            }
        }
        out
    }

    /// Inverse of [`Frame::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(size: usize, chw: &[f32]) -> Result<Self> {
        let p = size * size;
        if chw.len() != 3 * p {
            return Err(TgqnError::contract(
                "channel-major buffer has the wrong length",
            ));
        }
        let mut pixels = vec![0.0; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                pixels[i * 3 + c] = chw[c * p + i].clamp(0.0, 1.0);
            }
        }
        Ok(Frame { size, pixels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Vertical (= horizontal) field of view in radians.
    pub fov: f64,
    /// Ambient share of the shading term.
    pub ambient: f64,
    /// When false every surface shows its flat albedo.
    pub lighting: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            fov: 60f64.to_radians(),
            ambient: 0.35,
            lighting: true,
        }
    }
}

/// Camera ray through the centre of pixel `(row, col)`.
pub fn camera_ray(pose: &PoseSpec, row: usize, col: usize, size: usize, fov: f64) -> Ray {
    let forward = pose.forward();
    let right = forward.cross(Vec3::new(0.0, 1.0, 0.0)).normalized();
    let up = right.cross(forward);
    let half = (fov / 2.0).tan();
    let u = (2.0 * (col as f64 + 0.5) / size as f64 - 1.0) * half;
    let v = (1.0 - 2.0 * (row as f64 + 0.5) / size as f64) * half;
    Ray {
        origin: Vec3::from_array(pose.position),
        dir: (forward + right * u + up * v).normalized(),
    }
}

/// Nearest surface along a ray: hit record plus albedo.
pub fn trace(scene: &SceneSpec, ray: &Ray) -> (Hit, Rgb) {
    let mut best: Option<(Hit, Rgb)> = None;
    for o in &scene.objects {
        let center = Vec3::from_array(o.center);
        let hit = match o.shape {
            Shape::Sphere => intersect_sphere(ray, center, o.scale),
            Shape::Box => intersect_box(ray, center, Vec3::new(o.scale, o.scale, o.scale)),
        };
        if let Some(hit) = hit {
            if best.as_ref().is_none_or(|(b, _)| hit.t < b.t) {
                best = Some((hit, o.color));
            }
        }
    }
    if let Some(found) = best {
        return found;
    }
    match exit_room(ray, scene.room_half_extent) {
        Some((hit, axis)) => {
            let floor = axis == 1 && ray.dir.y < 0.0;
            (
                hit,
                if floor {
                    scene.floor_color
                } else {
                    scene.wall_color
                },
            )
        }
        // Degenerate zero direction; cannot come from camera_ray.
        None => (
            Hit {
                t: 0.0,
                normal: Vec3::new(0.0, 1.0, 0.0),
            },
            scene.wall_color,
        ),
    }
}

fn shade(scene: &SceneSpec, ray: &Ray, hit: &Hit, albedo: Rgb, opts: &RenderOptions) -> Rgb {
    if !opts.lighting {
        return albedo;
    }
    let p = ray.at(hit.t);
    let to_light = (Vec3::from_array(scene.light_position) - p).normalized();
    let diffuse = hit.normal.dot(to_light).max(0.0);
    let factor = opts.ambient + (1.0 - opts.ambient) * diffuse;
    albedo.map(|c| c * factor)
}

/// Flat-shaded nearest-hit raycast of `scene` from `pose`.
pub fn render_view(
    scene: &SceneSpec,
    pose: &PoseSpec,
    image_size: usize,
    opts: &RenderOptions,
) -> Result<Frame> {
    if image_size == 0 {
        return Err(TgqnError::config("image size must be positive"));
    }
    pose.validate(scene.room_half_extent)?;
    let mut pixels = Vec::with_capacity(image_size * image_size * 3);
    for row in 0..image_size {
        for col in 0..image_size {
            let ray = camera_ray(pose, row, col, image_size, opts.fov);
            let (hit, albedo) = trace(scene, &ray);
            let color = shade(scene, &ray, &hit, albedo, opts);
            pixels.extend(color.iter().map(|&c| c.clamp(0.0, 1.0) as f32));
        }
    }
    Ok(Frame {
        size: image_size,
        pixels,
    })
}
