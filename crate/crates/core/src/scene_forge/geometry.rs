use std::ops::{Add, Mul, Neg, Sub};

/// Minimum ray parameter accepted as a hit.
pub const HIT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    fn unit_axis(i: usize, sign: f64) -> Vec3 {
        match i {
            0 => Vec3::new(sign, 0.0, 0.0),
            1 => Vec3::new(0.0, sign, 0.0),
            _ => Vec3::new(0.0, 0.0, sign),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    /// Unit surface normal facing against the ray.
    pub normal: Vec3,
}

/// Nearest intersection in front of the ray origin with a sphere.
pub fn intersect_sphere(ray: &Ray, center: Vec3, radius: f64) -> Option<Hit> {
    let oc = ray.origin - center;
    let b = oc.dot(ray.dir);
    let c = oc.dot(oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    // Stable pair of roots.
    let q = if b > 0.0 { -b - root } else { -b + root };
    let (t0, t1) = if q != 0.0 {
        let (a1, a2) = (q, c / q);
        (a1.min(a2), a1.max(a2))
    } else {
        (0.0, 0.0)
    };
    let t = if t0 > HIT_EPSILON {
        t0
    } else if t1 > HIT_EPSILON {
        t1
    } else {
        return None;
    };
    let mut normal = (ray.at(t) - center) * (1.0 / radius);
    if normal.dot(ray.dir) > 0.0 {
        normal = -normal;
    }
    Some(Hit { t, normal })
}

/// Nearest intersection with an axis-aligned box given by center and
/// per-axis half extents (slab method).
pub fn intersect_box(ray: &Ray, center: Vec3, half: Vec3) -> Option<Hit> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut far_axis = 0;
    for axis in 0..3 {
        let o = ray.origin.axis(axis) - center.axis(axis);
        let d = ray.dir.axis(axis);
        let h = half.axis(axis);
        if d == 0.0 {
            if o.abs() > h {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((-h - o) / d, (h - o) / d);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if a > t_near {
            t_near = a;
            near_axis = axis;
        }
        if b < t_far {
            t_far = b;
            far_axis = axis;
        }
    }
    if t_near > t_far {
        return None;
    }
    let (t, axis) = if t_near > HIT_EPSILON {
        (t_near, near_axis)
    } else if t_far > HIT_EPSILON {
        (t_far, far_axis)
    } else {
        return None;
    };
    let sign = if ray.dir.axis(axis) > 0.0 { -1.0 } else { 1.0 };
    Some(Hit {
        t,
        normal: Vec3::unit_axis(axis, sign),
    })
}

/// Exit point of a ray starting inside the cube `[-half, half]^3`; the
/// returned axis identifies the face (0 = x walls, 1 = floor/ceiling, 2 = z walls).
pub fn exit_room(ray: &Ray, half: f64) -> Option<(Hit, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for axis in 0..3 {
        let d = ray.dir.axis(axis);
        if d == 0.0 {
            continue;
        }
        let plane = if d > 0.0 { half } else { -half };
        let t = (plane - ray.origin.axis(axis)) / d;
        if t > HIT_EPSILON && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, axis));
        }
    }
    best.map(|(t, axis)| {
        let sign = if ray.dir.axis(axis) > 0.0 { -1.0 } else { 1.0 };
        (
            Hit {
                t,
                normal: Vec3::unit_axis(axis, sign),
            },
            axis,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_head_on() {
        let ray = Ray {
            origin: Vec3::new(0.0, 0.0, -5.0),
            dir: Vec3::new(0.0, 0.0, 1.0),
        };
        let hit = intersect_sphere(&ray, Vec3::default(), 1.0).unwrap();
        assert!((hit.t - 4.0).abs() < 1e-12);
        assert_eq!(hit.normal, Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn sphere_miss_and_behind() {
        let ray = Ray {
            origin: Vec3::new(0.0, 2.0, -5.0),
            dir: Vec3::new(0.0, 0.0, 1.0),
        };
        assert!(intersect_sphere(&ray, Vec3::default(), 1.0).is_none());
        let away = Ray {
            origin: Vec3::new(0.0, 0.0, -5.0),
            dir: Vec3::new(0.0, 0.0, -1.0),
        };
        assert!(intersect_sphere(&away, Vec3::default(), 1.0).is_none());
    }

    #[test]
    fn box_axis_parallel_ray() {
        let ray = Ray {
            origin: Vec3::new(0.5, 0.0, -3.0),
            dir: Vec3::new(0.0, 0.0, 1.0),
        };
        let hit = intersect_box(&ray, Vec3::default(), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        assert!((hit.t - 2.0).abs() < 1e-12);
        assert_eq!(hit.normal, Vec3::new(0.0, 0.0, -1.0));
        let miss = Ray {
            origin: Vec3::new(1.5, 0.0, -3.0),
            dir: Vec3::new(0.0, 0.0, 1.0),
        };
        assert!(intersect_box(&miss, Vec3::default(), Vec3::new(1.0, 1.0, 1.0)).is_none());
    }

    #[test]
    fn room_exit_identifies_floor() {
        let ray = Ray {
            origin: Vec3::new(0.0, 0.0, 0.0),
            dir: Vec3::new(0.0, -1.0, 0.0),
        };
        let (hit, axis) = exit_room(&ray, 1.0).unwrap();
        assert_eq!(axis, 1);
        assert!((hit.t - 1.0).abs() < 1e-12);
        assert_eq!(hit.normal, Vec3::new(0.0, 1.0, 0.0));
    }
}
