//! Poses, object shapes and the axis-aligned queries built on them.

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Position in meters plus a unit quaternion stored as `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl Pose {
    pub const IDENTITY_ROTATION: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

    pub fn at(position: [f64; 3]) -> Self {
        Pose {
            position,
            orientation: Self::IDENTITY_ROTATION,
        }
    }

    pub fn with_yaw(position: [f64; 3], yaw: f64) -> Self {
        Pose::from_iso(&Isometry3::from_parts(
            Translation3::new(position[0], position[1], position[2]),
            UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
        ))
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
    }

    pub fn to_iso(&self) -> Isometry3<f64> {
        let [x, y, z] = self.position;
        Isometry3::from_parts(Translation3::new(x, y, z), self.rotation())
    }

    pub fn from_iso(iso: &Isometry3<f64>) -> Self {
        let t = iso.translation.vector;
        let q = iso.rotation.quaternion();
        Pose {
            position: [t.x, t.y, t.z],
            orientation: [q.w, q.i, q.j, q.k],
        }
    }

    /// Rotation about world z.
    pub fn yaw(&self) -> f64 {
        self.rotation().euler_angles().2
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.orientation.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn point(&self) -> Point3<f64> {
        Point3::from(self.position)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
    Peg,
    Container,
    Switch,
}

impl Shape {
    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
            Shape::Peg => "peg",
            Shape::Container => "bin",
            Shape::Switch => "switch",
        }
    }

    /// Half extents in the object frame for a nominal `size`.
    pub fn half_extents(self, size: f64) -> [f64; 3] {
        let h = size / 2.0;
        match self {
            Shape::Cube | Shape::Sphere | Shape::Cylinder => [h, h, h],
            Shape::Peg => [size / 4.0, size / 4.0, h],
            Shape::Container => [h, h, size / 4.0],
            Shape::Switch => [h, h, size / 8.0],
        }
    }

    pub fn graspable(self) -> bool {
        !matches!(self, Shape::Container | Shape::Switch)
    }
}

/// Signed distance from `p` to the surface of a shape centered at the
/// origin of its own frame. Negative inside.
pub fn local_distance(shape: Shape, size: f64, p: &Vector3<f64>) -> f64 {
    let he = shape.half_extents(size);
    match shape {
        Shape::Sphere => p.norm() - he[0],
        Shape::Cylinder => {
            let radial = (p.x * p.x + p.y * p.y).sqrt() - he[0];
            let axial = p.z.abs() - he[2];
            let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
            outside + radial.max(axial).min(0.0)
        }
        _ => {
            let q = Vector3::new(p.x.abs() - he[0], p.y.abs() - he[1], p.z.abs() - he[2]);
            let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
            outside + q.x.max(q.y).max(q.z).min(0.0)
        }
    }
}

/// Entry distance along a ray (origin and direction in the object frame),
/// or `None` when the ray misses.
pub fn local_ray_hit(shape: Shape, size: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let he = shape.half_extents(size);
    match shape {
        Shape::Sphere => {
            let r = he[0];
            let b = o.dot(d);
            let c = o.dot(o) - r * r;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            (t >= 0.0).then_some(t)
        }
        Shape::Cylinder => cylinder_hit(he[0], he[2], o, d),
        _ => slab_hit(&he, o, d),
    }
}

fn slab_hit(he: &[f64; 3], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k].abs() > he[k] {
                return None;
            }
            continue;
        }
        let a = (-he[k] - o[k]) / d[k];
        let b = (he[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 >= 0.0).then_some(t0)
}

fn cylinder_hit(r: f64, h: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut keep = |t: f64| {
        if t >= 0.0 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    // Side wall.
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-12 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / a;
            if (o.z + t * d.z).abs() <= h {
                keep(t);
            }
        }
    }
    // Caps.
    if d.z.abs() > 1e-12 {
        for cap in [-h, h] {
            let t = (cap - o.z) / d.z;
            let x = o.x + t * d.x;
            let y = o.y + t * d.y;
            if x * x + y * y <= r * r {
                keep(t);
            }
        }
    }
    best
}
