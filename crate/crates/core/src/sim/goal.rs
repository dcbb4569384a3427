//! Geometric goal relations checked against privileged scene state.

use serde::{Deserialize, Serialize};

use super::geometry::wrap_angle;
use super::{ObjectId, SceneState, CONTACT_DISTANCE};

/// Tolerance on resting contact between stacked surfaces.
pub const REST_TOLERANCE: f64 = 0.005;
/// Lateral band for left/right/front/behind relations.
pub const RELATION_BAND: f64 = 0.05;
/// Farthest center separation that still counts as "next to".
pub const RELATION_REACH: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    /// Meters.
    pub position: f64,
    /// Radians.
    pub orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "relation", rename_all = "snake_case")]
pub enum Relation {
    /// +y side of the reference.
    LeftOf { reference: ObjectId },
    RightOf { reference: ObjectId },
    /// Toward the robot base (-x).
    InFrontOf { reference: ObjectId },
    Behind { reference: ObjectId },
    Between { a: ObjectId, b: ObjectId },
    Above { reference: ObjectId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Goal {
    /// Object resting (released) at a position, optionally with a yaw.
    AtPosition {
        object: ObjectId,
        position: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        yaw: Option<f64>,
    },
    StackedOn { object: ObjectId, base: ObjectId },
    Inside { object: ObjectId, container: ObjectId },
    /// Gripper tip within contact distance of the object surface.
    Touch { object: ObjectId },
    /// Object held with its bottom at least `height` above the table.
    Lifted { object: ObjectId, height: f64 },
    /// Object not held by the gripper.
    Released { object: ObjectId },
    Relation {
        object: ObjectId,
        #[serde(flatten)]
        relation: Relation,
    },
    /// The gripper must never touch this object.
    Avoid { object: ObjectId },
    /// Inner goal counts only inside the inclusive step window.
    Within {
        goal: Box<Goal>,
        from_step: u64,
        until_step: u64,
    },
}

impl Goal {
    /// The object this goal is about.
    pub fn target(&self) -> ObjectId {
        match self {
            Goal::AtPosition { object, .. }
            | Goal::StackedOn { object, .. }
            | Goal::Inside { object, .. }
            | Goal::Touch { object }
            | Goal::Lifted { object, .. }
            | Goal::Released { object }
            | Goal::Relation { object, .. }
            | Goal::Avoid { object } => *object,
            Goal::Within { goal, .. } => goal.target(),
        }
    }

    /// Every object id the goal mentions.
    pub fn objects(&self) -> Vec<ObjectId> {
        match self {
            Goal::StackedOn { object, base } => vec![*object, *base],
            Goal::Inside { object, container } => vec![*object, *container],
            Goal::Relation { object, relation } => {
                let mut v = vec![*object];
                match relation {
                    Relation::Between { a, b } => v.extend([*a, *b]),
                    Relation::LeftOf { reference }
                    | Relation::RightOf { reference }
                    | Relation::InFrontOf { reference }
                    | Relation::Behind { reference }
                    | Relation::Above { reference } => v.push(*reference),
                }
                v
            }
            Goal::Within { goal, .. } => goal.objects(),
            g => vec![g.target()],
        }
    }

    pub fn is_avoid(&self) -> bool {
        matches!(self, Goal::Avoid { .. })
    }

    /// Whether the relation holds in `scene`. Unknown object ids never hold.
    pub fn holds(&self, scene: &SceneState, tol: &Tolerance) -> bool {
        self.check(scene, tol).unwrap_or(false)
    }

    fn check(&self, scene: &SceneState, tol: &Tolerance) -> Option<bool> {
        Some(match self {
            Goal::AtPosition {
                object,
                position,
                yaw,
            } => {
                let o = scene.object(*object)?;
                let d = dist3(&o.pose.position, position);
                let yaw_ok = yaw.is_none_or(|y| {
                    wrap_angle(o.pose.yaw() - y).abs() <= tol.orientation
                });
                o.attached_to.is_none() && d <= tol.position && yaw_ok
            }
            Goal::StackedOn { object, base } => {
                let o = scene.object(*object)?;
                let b = scene.object(*base)?;
                o.attached_to.is_none()
                    && b.attached_to.is_none()
                    && dist2(&o.pose.position, &b.pose.position) <= tol.position
                    && (scene.bottom(o) - scene.top(b)).abs() <= REST_TOLERANCE
            }
            Goal::Inside { object, container } => {
                let o = scene.object(*object)?;
                let c = scene.object(*container)?;
                o.attached_to.is_none()
                    && scene.inside_footprint(c, &o.pose.position)
                    && o.pose.position[2] < scene.top(c) + scene.half_height(o)
            }
            Goal::Touch { object } => {
                let o = scene.object(*object)?;
                scene.tip_distance(o) <= CONTACT_DISTANCE
            }
            Goal::Lifted { object, height } => {
                let o = scene.object(*object)?;
                o.attached_to.is_some() && scene.bottom(o) >= *height
            }
            Goal::Released { object } => scene.object(*object)?.attached_to.is_none(),
            Goal::Avoid { object } => {
                let o = scene.object(*object)?;
                scene.tip_distance(o) > CONTACT_DISTANCE
            }
            Goal::Relation { object, relation } => {
                let o = scene.object(*object)?;
                let p = o.pose.position;
                let gap_to = |r: &super::SceneObject| scene.half_width(o) + scene.half_width(r);
                match relation {
                    Relation::Above { reference } => {
                        let r = scene.object(*reference)?;
                        dist2(&p, &r.pose.position) <= tol.position.max(0.03)
                            && scene.bottom(o) >= scene.top(r) + 0.03
                    }
                    Relation::Between { a, b } => {
                        let a = scene.object(*a)?.pose.position;
                        let b = scene.object(*b)?.pose.position;
                        let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
                        let len2 = ux * ux + uy * uy;
                        if len2 < 1e-12 || o.attached_to.is_some() {
                            return Some(false);
                        }
                        let s = ((p[0] - a[0]) * ux + (p[1] - a[1]) * uy) / len2;
                        let perp = ((p[0] - a[0]) * uy - (p[1] - a[1]) * ux).abs() / len2.sqrt();
                        (0.25..=0.75).contains(&s) && perp <= RELATION_BAND.min(4.0 * tol.position)
                            && scene.resting(o)
                    }
                    Relation::LeftOf { reference }
                    | Relation::RightOf { reference }
                    | Relation::InFrontOf { reference }
                    | Relation::Behind { reference } => {
                        let r = scene.object(*reference)?;
                        let q = r.pose.position;
                        let (along, across, sign) = match relation {
                            Relation::LeftOf { .. } => (p[1] - q[1], p[0] - q[0], 1.0),
                            Relation::RightOf { .. } => (p[1] - q[1], p[0] - q[0], -1.0),
                            Relation::InFrontOf { .. } => (p[0] - q[0], p[1] - q[1], -1.0),
                            _ => (p[0] - q[0], p[1] - q[1], 1.0),
                        };
                        let along = along * sign;
                        o.attached_to.is_none()
                            && scene.resting(o)
                            && along >= gap_to(r)
                            && along <= RELATION_REACH
                            && across.abs() <= RELATION_BAND
                    }
                }
            }
            Goal::Within {
                goal,
                from_step,
                until_step,
            } => {
                (*from_step..=*until_step).contains(&scene.sim_step) && goal.check(scene, tol)?
            }
        })
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
