//! Orthographic ray-cast rendering of the six fixed cameras.
//!
//! Every camera looks along a world axis. Depth is the distance from the
//! image plane along that axis; rays that hit nothing report depth 0 and
//! segmentation id 0. The table plane is visible only to downward cameras.
//! The gripper itself is not drawn.

use std::collections::BTreeMap;

use nalgebra::{Isometry3, Point3, Vector3};

use super::{SceneState, SimError};
use crate::episode::{CameraId, CameraViews, Image, Modality, Observation};

pub const DEFAULT_IMAGE_SIZE: u32 = 64;

const TABLE_RGB: [u8; 3] = [186, 176, 160];
const BACKGROUND_RGB: [u8; 3] = [24, 24, 28];

/// Fixed viewpoint geometry.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub id: CameraId,
    /// Center of the image plane.
    pub origin: [f64; 3],
    /// Viewing direction (unit, axis-aligned).
    pub forward: [f64; 3],
    /// Image column direction.
    pub right: [f64; 3],
    /// Image row direction, rows counted downward from `+up`.
    pub up: [f64; 3],
    /// Half width of the square field, meters.
    pub half_extent: f64,
}

impl Camera {
    pub fn of(id: CameraId, scene: &SceneState) -> Camera {
        let side = |origin, forward, right| Camera {
            id,
            origin,
            forward,
            right,
            up: [0.0, 0.0, 1.0],
            half_extent: 0.4,
        };
        match id {
            CameraId::Front => side([1.0, 0.0, 0.2], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]),
            CameraId::Back => side([-1.0, 0.0, 0.2], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            CameraId::Left => side([0.0, 1.0, 0.2], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0]),
            CameraId::Right => side([0.0, -1.0, 0.2], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]),
            CameraId::Top => Camera {
                id,
                origin: [0.0, 0.0, 1.0],
                forward: [0.0, 0.0, -1.0],
                right: [0.0, 1.0, 0.0],
                up: [1.0, 0.0, 0.0],
                half_extent: 0.4,
            },
            CameraId::Wrist => Camera {
                id,
                origin: scene.tip(),
                forward: [0.0, 0.0, -1.0],
                right: [0.0, 1.0, 0.0],
                up: [1.0, 0.0, 0.0],
                half_extent: 0.1,
            },
        }
    }

    pub fn parse(name: &str) -> Result<CameraId, SimError> {
        name.parse().map_err(|_| SimError::UnknownCamera(name.to_string()))
    }

    /// World point at the center of pixel `(row, col)` on the image plane.
    pub fn pixel_origin(&self, row: u32, col: u32, size: u32) -> [f64; 3] {
        let pitch = 2.0 * self.half_extent / size as f64;
        let u = -self.half_extent + (col as f64 + 0.5) * pitch;
        let v = self.half_extent - (row as f64 + 0.5) * pitch;
        [
            self.origin[0] + self.right[0] * u + self.up[0] * v,
            self.origin[1] + self.right[1] * u + self.up[1] * v,
            self.origin[2] + self.right[2] * u + self.up[2] * v,
        ]
    }
}

struct Hit {
    depth: f32,
    id: u16,
    rgb: [u8; 3],
}

fn cast(scene: &SceneState, isos: &[Isometry3<f64>], cam: &Camera, p: [f64; 3]) -> Hit {
    let origin = Point3::from(p);
    let dir = Vector3::from(cam.forward);
    let mut best: Option<(f64, usize)> = None;
    for (i, (o, iso)) in scene.objects.iter().zip(isos).enumerate() {
        let lo = iso.inverse_transform_point(&origin);
        let ld = iso.inverse_transform_vector(&dir);
        if let Some(t) = super::local_ray_hit(o.shape, o.size, &lo.coords, &ld) {
            if best.is_none_or(|(b, _)| t < b) {
                best = Some((t, i));
            }
        }
    }
    let table = (cam.forward[2] < 0.0 && p[2] > 0.0).then(|| p[2] / -cam.forward[2]);
    match (best, table) {
        (Some((t, i)), tb) if tb.is_none_or(|tb| t <= tb) => {
            let o = &scene.objects[i];
            Hit {
                depth: t as f32,
                id: o.id,
                rgb: o.color,
            }
        }
        (_, Some(tb)) => Hit {
            depth: tb as f32,
            id: 0,
            rgb: TABLE_RGB,
        },
        _ => Hit {
            depth: 0.0,
            id: 0,
            rgb: BACKGROUND_RGB,
        },
    }
}

/// All three modalities of one camera in a single pass.
pub fn render_views(scene: &SceneState, camera: CameraId, size: u32) -> CameraViews {
    let cam = Camera::of(camera, scene);
    let isos: Vec<_> = scene.objects.iter().map(|o| o.pose.to_iso()).collect();
    let n = size as usize * size as usize;
    let mut rgb = Vec::with_capacity(n * 3);
    let mut depth = Vec::with_capacity(n * 4);
    let mut seg = Vec::with_capacity(n * 2);
    for row in 0..size {
        for col in 0..size {
            let hit = cast(scene, &isos, &cam, cam.pixel_origin(row, col, size));
            rgb.extend_from_slice(&hit.rgb);
            depth.extend_from_slice(&hit.depth.to_le_bytes());
            seg.extend_from_slice(&hit.id.to_le_bytes());
        }
    }
    let image = |modality, data| Image {
        width: size,
        height: size,
        modality,
        data,
    };
    CameraViews {
        rgb: image(Modality::Rgb, rgb),
        depth: image(Modality::Depth, depth),
        segmentation: image(Modality::Segmentation, seg),
    }
}

/// One modality of one camera.
pub fn render(scene: &SceneState, camera: CameraId, modality: Modality, size: u32) -> Image {
    let views = render_views(scene, camera, size);
    match modality {
        Modality::Rgb => views.rgb,
        Modality::Depth => views.depth,
        Modality::Segmentation => views.segmentation,
    }
}

/// Observation of the scene at its current step.
///
/// Cameras in `masked` are delivered as zero-filled images of the same size.
/// `size == 0` yields empty rasters, for consumers that ignore pixels.
pub fn observe(scene: &SceneState, size: u32, masked: &[CameraId], dt: f64) -> Observation {
    let mut views = BTreeMap::new();
    for cam in CameraId::ALL {
        let v = if masked.contains(&cam) || size == 0 {
            CameraViews {
                rgb: Image::blank(size, size, Modality::Rgb),
                depth: Image::blank(size, size, Modality::Depth),
                segmentation: Image::blank(size, size, Modality::Segmentation),
            }
        } else {
            render_views(scene, cam, size)
        };
        views.insert(cam, v);
    }
    Observation {
        views,
        q: scene.q.clone(),
        q_dot: scene.q_dot.clone(),
        t: scene.sim_step,
        wall_time: scene.sim_step as f64 * dt,
    }
}
