//! Scene assembly helpers shared by the family generators.

use crate::episode::EmbodimentConfig;
use crate::rng::{uniform, Rng};
use crate::sim::{ObjectId, SceneObject, SceneState, Shape};

/// Named colors used in instructions.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("purple", [150, 60, 190]),
    ("orange", [240, 140, 30]),
    ("cyan", [40, 200, 210]),
    ("white", [235, 235, 235]),
];

/// Colors never used by the base families; Robustness recolors with these.
pub const NOVEL_COLORS: [&str; 4] = ["purple", "orange", "cyan", "white"];

pub const PAD_RGB: [u8; 3] = [90, 90, 90];
pub const BIN_RGB: [u8; 3] = [120, 100, 80];
pub const SWITCH_OFF_RGB: [u8; 3] = [70, 70, 70];
pub const SWITCH_ON_RGB: [u8; 3] = [250, 250, 120];

pub fn color(name: &str) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Axis-aligned placement region on the table.
#[derive(Debug, Clone, Copy)]
pub struct Region {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Region {
    pub const TABLE: Region = Region {
        x: (-0.24, 0.24),
        y: (-0.24, 0.24),
    };

    pub const fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        Region { x, y }
    }
}

pub struct SceneBuilder {
    pub scene: SceneState,
    next_id: ObjectId,
    /// Reserved discs `(x, y, radius)`.
    occupied: Vec<(f64, f64, f64)>,
}

impl SceneBuilder {
    pub fn new(scene_id: String) -> Self {
        SceneBuilder {
            scene: SceneState::empty(scene_id, EmbodimentConfig::desk_arm()),
            next_id: 1,
            occupied: Vec::new(),
        }
    }

    /// Reserves a free disc of `radius` inside `region`.
    ///
    /// Rejection sampling with a fixed attempt budget; falls back to the
    /// least-crowded candidate so generation never fails.
    pub fn spot(&mut self, rng: &mut Rng, region: Region, radius: f64) -> [f64; 2] {
        let mut best = ([0.0, 0.0], f64::NEG_INFINITY);
        for _ in 0..200 {
            let p = [uniform(rng, region.x.0, region.x.1), uniform(rng, region.y.0, region.y.1)];
            let slack = self
                .occupied
                .iter()
                .map(|(x, y, r)| ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt() - r - radius)
                .fold(f64::INFINITY, f64::min);
            if slack >= 0.0 {
                best = (p, slack);
                break;
            }
            if slack > best.1 {
                best = (p, slack);
            }
        }
        self.reserve(best.0, radius);
        best.0
    }

    /// Like [`spot`](Self::spot) but also requires `accept(p)`.
    pub fn spot_where(
        &mut self,
        rng: &mut Rng,
        region: Region,
        radius: f64,
        accept: impl Fn([f64; 2]) -> bool,
    ) -> [f64; 2] {
        for _ in 0..200 {
            let p = [uniform(rng, region.x.0, region.x.1), uniform(rng, region.y.0, region.y.1)];
            let free = self
                .occupied
                .iter()
                .all(|(x, y, r)| ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt() >= r + radius);
            if free && accept(p) {
                self.reserve(p, radius);
                return p;
            }
        }
        self.spot(rng, region, radius)
    }

    pub fn reserve(&mut self, p: [f64; 2], radius: f64) {
        self.occupied.push((p[0], p[1], radius));
    }

    pub fn add(&mut self, shape: Shape, rgb: [u8; 3], size: f64, p: [f64; 2]) -> ObjectId {
        let id = self.next_id;
        self.next_id += 1;
        self.scene
            .objects
            .push(SceneObject::on_table(id, shape, rgb, size, p[0], p[1]));
        id
    }

    /// Samples a free spot and places an object there.
    pub fn place(&mut self, rng: &mut Rng, region: Region, shape: Shape, rgb: [u8; 3], size: f64) -> ObjectId {
        let p = self.spot(rng, region, clearance(shape, size));
        self.add(shape, rgb, size, p)
    }

    pub fn object_mut(&mut self, id: ObjectId) -> &mut SceneObject {
        self.scene
            .objects
            .iter_mut()
            .find(|o| o.id == id)
            .expect("builder object exists")
    }

    pub fn rest_z(&self, id: ObjectId) -> f64 {
        let o = self.scene.object(id).expect("builder object exists");
        o.shape.half_extents(o.size)[2]
    }

    pub fn finish(self, instruction: String) -> SceneState {
        let mut s = self.scene;
        s.active_instruction = instruction;
        s
    }
}

/// Free radius kept around an object so descending grasps never graze a
/// neighbor.
pub fn clearance(shape: Shape, size: f64) -> f64 {
    match shape {
        Shape::Container => size * 0.75 + 0.03,
        _ => size * 0.6 + 0.03,
    }
}
