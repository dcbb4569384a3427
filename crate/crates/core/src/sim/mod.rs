//! Deterministic kinematic tabletop world.
//!
//! The arm is a free-flying end effector driven through a trivial chain:
//! joints 0..3 translate the tip along x, y and z, joints 3..6 set roll,
//! pitch and yaw, and any further joints are redundant. There is no contact
//! dynamics. Grasping is proximity plus a closing aperture, and a released
//! object drops onto whatever supports it.
//!
//! ```
//! use nebula::episode::{Action, EmbodimentConfig};
//! use nebula::sim::{step, SceneState, DEFAULT_DT};
//!
//! let scene = SceneState::empty("demo", EmbodimentConfig::desk_arm());
//! let next = step(&scene, &Action::zeros(8), DEFAULT_DT).unwrap();
//! assert_eq!(next.sim_step, 1);
//! ```

mod geometry;
mod goal;
mod render;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{Action, EmbodimentConfig};

pub use geometry::{local_distance, local_ray_hit, wrap_angle, Pose, Shape};
pub use goal::{Goal, Relation, Tolerance, RELATION_BAND, RELATION_REACH, REST_TOLERANCE};
pub use render::{observe, render, render_views, Camera, DEFAULT_IMAGE_SIZE};

/// Seconds per simulation step.
pub const DEFAULT_DT: f64 = 0.05;
/// Largest joint change per step, radians.
pub const MAX_JOINT_DELTA: f64 = 0.05;
/// Tip travel per radian on the translational joints, meters.
pub const LINK_SCALE: f64 = 0.2;
/// Tip position with all joints at zero.
pub const HOME: [f64; 3] = [0.0, 0.0, 0.3];
/// Largest aperture change per step.
pub const APERTURE_RATE: f64 = 0.25;
/// Tip-to-center distance within which a closing gripper attaches an object.
pub const GRASP_RADIUS: f64 = 0.02;
/// Tip-to-surface distance that counts as touching.
pub const CONTACT_DISTANCE: f64 = 0.01;
/// Objects stay inside `[-WORKSPACE, WORKSPACE]` on x and y.
pub const WORKSPACE: f64 = 0.3;
pub const GRIPPER_ID: &str = "gripper0";

pub type ObjectId = u16;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("action has {got} entries, embodiment expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("action contains a non-finite value")]
    NonFiniteAction,
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("unknown camera `{0}`")]
    UnknownCamera(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Nonzero; doubles as the segmentation id.
    pub id: ObjectId,
    pub shape: Shape,
    pub color: [u8; 3],
    /// Nominal edge length or diameter, meters.
    pub size: f64,
    pub pose: Pose,
    pub attached_to: Option<String>,
    /// Object pose in the gripper frame while attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_offset: Option<Pose>,
}

impl SceneObject {
    /// An unattached object resting on the table at `(x, y)`.
    pub fn on_table(id: ObjectId, shape: Shape, color: [u8; 3], size: f64, x: f64, y: f64) -> Self {
        let hz = shape.half_extents(size)[2];
        SceneObject {
            id,
            shape,
            color,
            size,
            pose: Pose::at([x, y, hz]),
            attached_to: None,
            grasp_offset: None,
        }
    }

    pub fn with_yaw(mut self, yaw: f64) -> Self {
        self.pose = Pose::with_yaw(self.pose.position, yaw);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub id: String,
    pub pose: Pose,
    /// 1 fully open, 0 fully closed.
    pub aperture: f64,
}

/// Constant velocity from `start_step` until the next segment begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub start_step: u64,
    /// Meters per second.
    pub velocity: [f64; 3],
}

/// Piecewise-constant-velocity motion for one object.
///
/// Segment `k` governs steps `s` with `start_k < s <= start_{k+1}`; positions
/// are computed from the segment origin, never accumulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub object: ObjectId,
    pub segments: Vec<MotionSegment>,
    #[serde(default)]
    pub active: Option<usize>,
    #[serde(default)]
    pub origin: [f64; 3],
    #[serde(default)]
    pub origin_step: u64,
}

impl MotionScript {
    pub fn new(object: ObjectId, segments: Vec<MotionSegment>) -> Self {
        MotionScript {
            object,
            segments,
            active: None,
            origin: [0.0; 3],
            origin_step: 0,
        }
    }

    /// Position at `step` given the object position one step earlier.
    fn advance(&mut self, step: u64, current: [f64; 3], dt: f64) -> Option<[f64; 3]> {
        let i = self.segments.iter().rposition(|g| g.start_step < step)?;
        if self.active != Some(i) {
            self.active = Some(i);
            self.origin = current;
            self.origin_step = step - 1;
        }
        let v = self.segments[i].velocity;
        let elapsed = (step - self.origin_step) as f64 * dt;
        Some([
            self.origin[0] + v[0] * elapsed,
            self.origin[1] + v[1] * elapsed,
            self.origin[2] + v[2] * elapsed,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Teleports the object, dropping it from the gripper if held.
    DisplaceObject { object: ObjectId, position: [f64; 3] },
    /// Replaces the instruction and the goal set.
    SwapInstruction { instruction: String, goals: Vec<Goal> },
    /// Appends follow-up goals to be met in order after the current ones.
    SequentialInstruction { instruction: String, goals: Vec<Goal> },
    AttributeSwitch { object: ObjectId, color: [u8; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub fire_step: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub scene_id: String,
    pub embodiment: EmbodimentConfig,
    pub sim_step: u64,
    pub q: Vec<f64>,
    pub q_dot: Vec<f64>,
    pub gripper: GripperState,
    pub objects: Vec<SceneObject>,
    pub motion_scripts: Vec<MotionScript>,
    /// Pending events in injection order.
    pub event_queue: Vec<Event>,
    pub active_instruction: String,
    pub goals: Vec<Goal>,
    /// Goals must be met one after another rather than jointly.
    #[serde(default)]
    pub sequential: bool,
}

impl SceneState {
    /// No objects, arm at home, gripper open.
    pub fn empty(scene_id: impl Into<String>, embodiment: EmbodimentConfig) -> Self {
        let dof = embodiment.dof as usize;
        let q = vec![0.0; dof];
        let pose = end_effector(&q);
        SceneState {
            scene_id: scene_id.into(),
            embodiment,
            sim_step: 0,
            q_dot: vec![0.0; dof],
            q,
            gripper: GripperState {
                id: GRIPPER_ID.to_string(),
                pose,
                aperture: 1.0,
            },
            objects: Vec::new(),
            motion_scripts: Vec::new(),
            event_queue: Vec::new(),
            active_instruction: String::new(),
            goals: Vec::new(),
            sequential: false,
        }
    }

    pub fn object(&self, id: ObjectId) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: ObjectId) -> Option<&mut SceneObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn attached(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.attached_to.is_some())
    }

    pub fn tip(&self) -> [f64; 3] {
        self.gripper.pose.position
    }

    /// World-axis half extents of the object's bounding box.
    pub fn aabb_half(&self, o: &SceneObject) -> [f64; 3] {
        let he = o.shape.half_extents(o.size);
        if o.shape == Shape::Sphere {
            return he;
        }
        let r = o.pose.rotation().to_rotation_matrix();
        let m = r.matrix();
        let mut out = [0.0; 3];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = (0..3).map(|j| m[(k, j)].abs() * he[j]).sum();
        }
        out
    }

    pub fn half_height(&self, o: &SceneObject) -> f64 {
        self.aabb_half(o)[2]
    }

    pub fn half_width(&self, o: &SceneObject) -> f64 {
        let h = self.aabb_half(o);
        h[0].max(h[1])
    }

    pub fn bottom(&self, o: &SceneObject) -> f64 {
        o.pose.position[2] - self.half_height(o)
    }

    pub fn top(&self, o: &SceneObject) -> f64 {
        o.pose.position[2] + self.half_height(o)
    }

    /// Whether `p` lies over the object's xy footprint.
    pub fn inside_footprint(&self, o: &SceneObject, p: &[f64; 3]) -> bool {
        let h = self.aabb_half(o);
        (p[0] - o.pose.position[0]).abs() <= h[0] && (p[1] - o.pose.position[1]).abs() <= h[1]
    }

    /// Distance from the gripper tip to the object surface.
    pub fn tip_distance(&self, o: &SceneObject) -> f64 {
        let local = o.pose.to_iso().inverse_transform_point(&nalgebra::Point3::from(self.tip()));
        local_distance(o.shape, o.size, &local.coords)
    }

    /// Height an unattached object at `p` would come to rest on.
    pub fn support_height(&self, exclude: ObjectId, p: &[f64; 3]) -> f64 {
        let mut best = 0.0f64;
        for r in &self.objects {
            if r.id == exclude || r.attached_to.is_some() || !self.inside_footprint(r, p) {
                continue;
            }
            let surface = if r.shape == Shape::Container {
                self.bottom(r)
            } else {
                self.top(r)
            };
            if surface <= p[2] + 1e-9 {
                best = best.max(surface);
            }
        }
        best
    }

    /// Unattached and sitting on its support.
    pub fn resting(&self, o: &SceneObject) -> bool {
        o.attached_to.is_none()
            && (self.bottom(o) - self.support_height(o.id, &o.pose.position)).abs() <= REST_TOLERANCE
    }

    fn settle(&mut self, id: ObjectId) {
        let Some(o) = self.object(id) else { return };
        let p = o.pose.position;
        let hz = self.half_height(o);
        let floor = self.support_height(id, &p);
        if let Some(o) = self.object_mut(id) {
            o.pose.position[2] = floor + hz;
        }
    }

    fn release(&mut self) {
        let Some(id) = self.attached().map(|o| o.id) else { return };
        if let Some(o) = self.object_mut(id) {
            o.attached_to = None;
            o.grasp_offset = None;
        }
        self.settle(id);
    }

    fn drop_scripts(&mut self, id: ObjectId) {
        self.motion_scripts.retain(|m| m.object != id);
    }

    /// Recomputes the tip pose and carries any attached object with it,
    /// lifting the arm when the held object would sink below the table.
    fn sync_gripper(&mut self) {
        self.gripper.pose = end_effector(&self.q);
        let Some(o) = self.attached().cloned() else { return };
        let offset = o.grasp_offset.unwrap_or(Pose::at([0.0; 3]));
        let mut world = Pose::from_iso(&(self.gripper.pose.to_iso() * offset.to_iso()));
        let probe = SceneObject { pose: world, ..o.clone() };
        let deficit = self.half_height(&probe) - world.position[2];
        if deficit > 0.0 && self.q.len() >= 3 {
            let (lo, hi) = self.embodiment.joint_limits[2];
            self.q[2] = (self.q[2] + deficit / LINK_SCALE).clamp(lo, hi);
            self.gripper.pose = end_effector(&self.q);
            world = Pose::from_iso(&(self.gripper.pose.to_iso() * offset.to_iso()));
        }
        let id = o.id;
        if let Some(o) = self.object_mut(id) {
            o.pose = world;
        }
    }

    fn apply(&mut self, kind: EventKind) {
        match kind {
            EventKind::DisplaceObject { object, position } => {
                if let Some(o) = self.object_mut(object) {
                    o.attached_to = None;
                    o.grasp_offset = None;
                    o.pose.position = position;
                }
                self.drop_scripts(object);
            }
            EventKind::SwapInstruction { instruction, goals } => {
                self.active_instruction = instruction;
                self.goals = goals;
            }
            EventKind::SequentialInstruction { instruction, goals } => {
                self.active_instruction = instruction;
                self.goals.extend(goals);
                self.sequential = true;
            }
            EventKind::AttributeSwitch { object, color } => {
                if let Some(o) = self.object_mut(object) {
                    o.color = color;
                }
            }
        }
    }

    fn check_event(&self, e: &Event) -> Result<(), SimError> {
        if e.fire_step < self.sim_step {
            return Err(SimError::InvalidEvent(format!(
                "fire_step {} is before current step {}",
                e.fire_step, self.sim_step
            )));
        }
        let mut ids = Vec::new();
        match &e.kind {
            EventKind::DisplaceObject { object, position } => {
                if position.iter().any(|v| !v.is_finite()) {
                    return Err(SimError::InvalidEvent("non-finite position".into()));
                }
                ids.push(*object);
            }
            EventKind::AttributeSwitch { object, .. } => ids.push(*object),
            EventKind::SwapInstruction { goals, .. }
            | EventKind::SequentialInstruction { goals, .. } => {
                ids.extend(goals.iter().flat_map(|g| g.objects()));
            }
        }
        match ids.into_iter().find(|id| self.object(*id).is_none()) {
            Some(id) => Err(SimError::InvalidEvent(format!("unknown object {id}"))),
            None => Ok(()),
        }
    }

    /// The physical world: everything except the instruction and goals.
    pub fn same_world(&self, other: &SceneState) -> bool {
        self.scene_id == other.scene_id
            && self.embodiment == other.embodiment
            && self.sim_step == other.sim_step
            && self.q == other.q
            && self.q_dot == other.q_dot
            && self.gripper == other.gripper
            && self.objects == other.objects
            && self.motion_scripts == other.motion_scripts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

/// Tip pose for joint vector `q`.
pub fn end_effector(q: &[f64]) -> Pose {
    let j = |i: usize| q.get(i).copied().unwrap_or(0.0);
    let position = [
        HOME[0] + LINK_SCALE * j(0),
        HOME[1] + LINK_SCALE * j(1),
        HOME[2] + LINK_SCALE * j(2),
    ];
    let r = UnitQuaternion::from_euler_angles(j(3), j(4), j(5));
    let q = r.quaternion();
    Pose {
        position,
        orientation: [q.w, q.i, q.j, q.k],
    }
}

/// Joint values that put the tip at `position` with the given yaw.
pub fn inverse_kinematics(position: [f64; 3], yaw: f64, dof: usize) -> Vec<f64> {
    let mut q = vec![0.0; dof];
    for k in 0..3.min(dof) {
        q[k] = (position[k] - HOME[k]) / LINK_SCALE;
    }
    if dof > 5 {
        q[5] = yaw;
    }
    q
}

/// Advances the world by one step.
pub fn step(scene: &SceneState, action: &Action, dt: f64) -> Result<SceneState, SimError> {
    let expected = scene.embodiment.action_dim();
    if action.len() != expected {
        return Err(SimError::DimensionMismatch {
            expected,
            got: action.len(),
        });
    }
    if action.values().iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFiniteAction);
    }
    let mut s = scene.clone();
    let a = action.values();
    let dof = s.q.len();
    let before = s.q.clone();
    for (j, qj) in s.q.iter_mut().enumerate() {
        let (lo, hi) = s.embodiment.joint_limits.get(j).copied().unwrap_or((f64::MIN, f64::MAX));
        *qj = (*qj + a[j].clamp(-1.0, 1.0) * MAX_JOINT_DELTA).clamp(lo, hi);
    }
    let was_open = s.gripper.aperture >= 0.5;
    let target = (1.0 - a[dof].clamp(-1.0, 1.0)) / 2.0;
    let ap = s.gripper.aperture;
    s.gripper.aperture = ap + (target - ap).clamp(-APERTURE_RATE, APERTURE_RATE);
    s.sync_gripper();
    for j in 0..dof {
        s.q_dot[j] = (s.q[j] - before[j]) / dt;
    }

    if s.attached().is_some() {
        if s.gripper.aperture >= 0.5 {
            s.release();
        }
    } else if was_open && s.gripper.aperture < 0.5 {
        let tip = s.tip();
        let pick = s
            .objects
            .iter()
            .filter(|o| o.shape.graspable())
            .map(|o| {
                let p = o.pose.position;
                let d = ((p[0] - tip[0]).powi(2) + (p[1] - tip[1]).powi(2) + (p[2] - tip[2]).powi(2)).sqrt();
                (d, o.id)
            })
            .filter(|(d, _)| *d <= GRASP_RADIUS)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((_, id)) = pick {
            let ee = s.gripper.pose.to_iso();
            if let Some(o) = s.object_mut(id) {
                o.grasp_offset = Some(Pose::from_iso(&(ee.inverse() * o.pose.to_iso())));
                o.attached_to = Some(GRIPPER_ID.to_string());
            }
            s.drop_scripts(id);
        }
    }

    s.sim_step += 1;
    let now = s.sim_step;
    let mut scripts = std::mem::take(&mut s.motion_scripts);
    for m in scripts.iter_mut() {
        let Some(current) = s.object(m.object).map(|o| o.pose.position) else { continue };
        if let Some(mut p) = m.advance(now, current, dt) {
            p[0] = p[0].clamp(-WORKSPACE, WORKSPACE);
            p[1] = p[1].clamp(-WORKSPACE, WORKSPACE);
            if let Some(o) = s.object_mut(m.object) {
                o.pose.position = p;
            }
        }
    }
    s.motion_scripts = scripts;

    let (due, pending): (Vec<Event>, Vec<Event>) =
        s.event_queue.drain(..).partition(|e| e.fire_step <= now);
    s.event_queue = pending;
    for e in due {
        s.apply(e.kind);
    }
    Ok(s)
}

/// Enqueues an event; one due at the current step applies immediately.
pub fn inject_event(scene: &SceneState, e: Event) -> Result<SceneState, SimError> {
    scene.check_event(&e)?;
    let mut s = scene.clone();
    if e.fire_step == s.sim_step {
        s.apply(e.kind);
    } else {
        s.event_queue.push(e);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RED: [u8; 3] = [220, 40, 40];

    fn scene_with_cube(x: f64, y: f64) -> SceneState {
        let mut s = SceneState::empty("t", EmbodimentConfig::desk_arm());
        s.objects.push(SceneObject::on_table(1, Shape::Cube, RED, 0.04, x, y));
        s
    }

    fn act(v: &[(usize, f64)], grip: f64) -> Action {
        let mut a = vec![0.0; 8];
        for (j, x) in v {
            a[*j] = *x;
        }
        a[7] = grip;
        Action(a)
    }

    /// Saturated proportional drive of the tip toward `goal`.
    fn drive(s: &SceneState, goal: [f64; 3], grip: f64) -> Action {
        let q = inverse_kinematics(goal, 0.0, 7);
        let mut a = vec![0.0; 8];
        for j in 0..7 {
            a[j] = ((q[j] - s.q[j]) / MAX_JOINT_DELTA).clamp(-1.0, 1.0);
        }
        a[7] = grip;
        Action(a)
    }

    #[test]
    fn zero_action_only_advances_step() {
        let s = scene_with_cube(0.1, 0.1);
        let next = step(&s, &act(&[], -1.0), DEFAULT_DT).unwrap();
        let mut expected = s.clone();
        expected.sim_step = 1;
        assert_eq!(next, expected);
    }

    #[test]
    fn dimension_checked() {
        let s = scene_with_cube(0.0, 0.0);
        assert_eq!(
            step(&s, &Action::zeros(9), DEFAULT_DT),
            Err(SimError::DimensionMismatch { expected: 8, got: 9 })
        );
        assert_eq!(
            step(&s, &Action(vec![f64::NAN; 8]), DEFAULT_DT),
            Err(SimError::NonFiniteAction)
        );
    }

    #[test]
    fn linear_script_is_exact() {
        let mut s = scene_with_cube(-0.2, 0.0);
        let v = [0.03, -0.01, 0.0];
        s.motion_scripts.push(MotionScript::new(1, vec![MotionSegment { start_step: 0, velocity: v }]));
        let p0 = s.objects[0].pose.position;
        for t in 1..=60u64 {
            s = step(&s, &act(&[], -1.0), DEFAULT_DT).unwrap();
            let p = s.objects[0].pose.position;
            for k in 0..3 {
                assert_eq!(p[k], p0[k] + v[k] * (t as f64 * DEFAULT_DT), "t={t} k={k}");
            }
        }
    }

    #[test]
    fn script_segments_join_continuously() {
        let mut s = scene_with_cube(0.0, 0.0);
        s.motion_scripts.push(MotionScript::new(
            1,
            vec![
                MotionSegment { start_step: 0, velocity: [0.1, 0.0, 0.0] },
                MotionSegment { start_step: 10, velocity: [0.0, 0.1, 0.0] },
            ],
        ));
        for _ in 0..20 {
            s = step(&s, &act(&[], -1.0), DEFAULT_DT).unwrap();
        }
        let p = s.objects[0].pose.position;
        assert!((p[0] - 0.05).abs() < 1e-12 && (p[1] - 0.05).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn grasp_tracks_gripper_rigidly() {
        let mut s = scene_with_cube(0.1, -0.1);
        let above = [0.1, -0.1, 0.02];
        for _ in 0..80 {
            let a = drive(&s, above, -1.0);
            s = step(&s, &a, DEFAULT_DT).unwrap();
        }
        for _ in 0..4 {
            let a = drive(&s, above, 1.0);
            s = step(&s, &a, DEFAULT_DT).unwrap();
        }
        assert!(s.objects[0].attached_to.is_some());
        let rel = s.gripper.pose.to_iso().inverse() * s.objects[0].pose.to_iso();
        let mut a = act(&[(0, -1.0), (1, 0.6), (2, 0.8), (5, 0.7), (3, 0.3)], 1.0);
        for _ in 0..25 {
            s = step(&s, &a, DEFAULT_DT).unwrap();
            let now = s.gripper.pose.to_iso().inverse() * s.objects[0].pose.to_iso();
            assert!((now.translation.vector - rel.translation.vector).norm() < 1e-9);
            assert!(now.rotation.angle_to(&rel.rotation) < 1e-9);
            assert!((s.objects[0].pose.quaternion_norm() - 1.0).abs() < 1e-9);
        }
        a.0[7] = -1.0;
        for _ in 0..3 {
            s = step(&s, &a, DEFAULT_DT).unwrap();
        }
        assert!(s.objects[0].attached_to.is_none());
        let o = &s.objects[0];
        assert!((s.bottom(o) - 0.0).abs() < 1e-9);
    }

    #[test]
    fn far_objects_not_grasped() {
        let mut s = scene_with_cube(0.2, 0.2);
        for _ in 0..5 {
            s = step(&s, &act(&[], 1.0), DEFAULT_DT).unwrap();
        }
        assert!(s.attached().is_none());
    }

    #[test]
    fn displace_fires_exactly_at_step() {
        let mut s = scene_with_cube(0.0, 0.0);
        s = inject_event(
            &s,
            Event {
                fire_step: 10,
                kind: EventKind::DisplaceObject { object: 1, position: [0.2, 0.1, 0.02] },
            },
        )
        .unwrap();
        for _ in 0..9 {
            s = step(&s, &act(&[], -1.0), DEFAULT_DT).unwrap();
            assert_eq!(s.objects[0].pose.position, [0.0, 0.0, 0.02]);
        }
        s = step(&s, &act(&[], -1.0), DEFAULT_DT).unwrap();
        assert_eq!(s.sim_step, 10);
        assert_eq!(s.objects[0].pose.position, [0.2, 0.1, 0.02]);
    }

    #[test]
    fn same_step_events_apply_in_injection_order() {
        let mut s = scene_with_cube(0.0, 0.0);
        for instr in ["first", "second"] {
            s = inject_event(
                &s,
                Event {
                    fire_step: 3,
                    kind: EventKind::SwapInstruction { instruction: instr.into(), goals: vec![] },
                },
            )
            .unwrap();
        }
        for color in [[1, 1, 1], [2, 2, 2]] {
            s = inject_event(
                &s,
                Event { fire_step: 3, kind: EventKind::AttributeSwitch { object: 1, color } },
            )
            .unwrap();
        }
        for _ in 0..3 {
            s = step(&s, &act(&[], -1.0), DEFAULT_DT).unwrap();
        }
        assert_eq!(s.active_instruction, "second");
        assert_eq!(s.objects[0].color, [2, 2, 2]);
        assert!(s.event_queue.is_empty());
    }

    #[test]
    fn swap_and_sequential() {
        let s = scene_with_cube(0.0, 0.0);
        let swapped = inject_event(
            &s,
            Event {
                fire_step: 0,
                kind: EventKind::SwapInstruction {
                    instruction: "Pick up the green cube".into(),
                    goals: vec![Goal::Touch { object: 1 }],
                },
            },
        )
        .unwrap();
        assert_eq!(swapped.active_instruction, "Pick up the green cube");
        let seq = inject_event(
            &swapped,
            Event {
                fire_step: 0,
                kind: EventKind::SequentialInstruction {
                    instruction: "Release the cube".into(),
                    goals: vec![Goal::Released { object: 1 }],
                },
            },
        )
        .unwrap();
        assert!(seq.sequential);
        assert_eq!(seq.goals.len(), 2);
    }

    #[test]
    fn invalid_events() {
        let mut s = scene_with_cube(0.0, 0.0);
        s.sim_step = 5;
        let late = Event { fire_step: 4, kind: EventKind::AttributeSwitch { object: 1, color: RED } };
        assert!(matches!(inject_event(&s, late), Err(SimError::InvalidEvent(_))));
        let ghost = Event { fire_step: 9, kind: EventKind::AttributeSwitch { object: 7, color: RED } };
        assert!(matches!(inject_event(&s, ghost), Err(SimError::InvalidEvent(_))));
    }

    #[test]
    fn release_onto_stack() {
        let mut s = scene_with_cube(0.0, 0.0);
        s.objects.push(SceneObject::on_table(2, Shape::Cube, RED, 0.04, 0.1, 0.1));
        s.objects[1].attached_to = Some(GRIPPER_ID.into());
        s.objects[1].pose.position = [0.005, 0.0, 0.09];
        s.release();
        assert!((s.objects[1].pose.position[2] - 0.06).abs() < 1e-12);
        let g = Goal::StackedOn { object: 2, base: 1 };
        assert!(g.holds(&s, &Tolerance { position: 0.01, orientation: 0.2 }));
    }

    #[test]
    fn json_roundtrip() {
        let mut s = scene_with_cube(0.1, 0.0);
        s.goals.push(Goal::Within {
            goal: Box::new(Goal::Relation {
                object: 1,
                relation: Relation::Between { a: 1, b: 1 },
            }),
            from_step: 0,
            until_step: 9,
        });
        s.motion_scripts.push(MotionScript::new(1, vec![MotionSegment { start_step: 2, velocity: [0.0; 3] }]));
        s.event_queue.push(Event { fire_step: 3, kind: EventKind::AttributeSwitch { object: 1, color: RED } });
        let back: SceneState = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn stepping_is_deterministic_and_safe(
            seq in proptest::collection::vec(proptest::collection::vec(-1.0f64..=1.0, 8), 1..120)
        ) {
            let mut a = scene_with_cube(0.0, 0.0);
            a.objects.push(SceneObject::on_table(2, Shape::Sphere, RED, 0.04, 0.05, 0.0));
            let mut b = a.clone();
            for v in &seq {
                a = step(&a, &Action(v.clone()), DEFAULT_DT).unwrap();
                b = step(&b, &Action(v.clone()), DEFAULT_DT).unwrap();
                prop_assert_eq!(&a, &b);
                prop_assert!(a.objects.iter().filter(|o| o.attached_to.is_some()).count() <= 1);
                for o in &a.objects {
                    prop_assert!(o.pose.position[2] >= a.half_height(o) - 1e-6);
                    prop_assert!((o.pose.quaternion_norm() - 1.0).abs() < 1e-9);
                }
                for (j, (lo, hi)) in a.embodiment.joint_limits.iter().enumerate() {
                    prop_assert!(a.q[j] >= *lo && a.q[j] <= *hi);
                }
            }
            prop_assert_eq!(a.sim_step, seq.len() as u64);
        }
    }
}
