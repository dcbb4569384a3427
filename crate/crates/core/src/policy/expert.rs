//! Scripted policies that read privileged scene state.
//!
//! The expert replans from scratch every step: it picks the first goal that
//! does not hold (or the current stage of a sequence), then emits a
//! saturated proportional joint command toward an end-effector waypoint.
//! Motion goes climb, traverse, descend, so carried objects clear the scene.

use std::collections::BTreeSet;

use super::{Policy, PolicyError, PolicyInput};
use crate::episode::{Action, EmbodimentConfig};
use crate::sim::{
    inverse_kinematics, wrap_angle, Goal, ObjectId, Pose, Relation, SceneObject, SceneState, Shape,
    Tolerance, DEFAULT_DT, MAX_JOINT_DELTA,
};

/// Tolerance the expert uses to decide a goal is done; tighter than any tier.
const DONE: Tolerance = Tolerance {
    position: 0.006,
    orientation: 0.1,
};
const MIN_TRAVEL: f64 = 0.15;
const TRAVEL_MARGIN: f64 = 0.03;
/// Horizontal error below which the tip descends.
const ALIGN: f64 = 0.006;
/// Horizontal error tolerated while already low.
const LOW_TRACK: f64 = 0.02;
const GRASP_DIST: f64 = 0.004;
const RELEASE_XY: f64 = 0.002;
const RELEASE_Z: f64 = 0.003;
const RELEASE_YAW: f64 = 0.02;
const TOUCH_CLEARANCE: f64 = 0.002;
const HOVER: f64 = 0.05;
const LIFT_MARGIN: f64 = 0.03;
const ABOVE_MARGIN: f64 = 0.05;
const SIDE_OFFSET: f64 = 0.09;
const OPEN: f64 = -1.0;
const CLOSE: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
struct Command {
    tip: [f64; 3],
    /// Desired gripper yaw; `None` keeps the current one.
    yaw: Option<f64>,
    grip: f64,
}

fn hypot2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (hypot2(a, b).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Position of `o` one step from now, following its motion script.
fn predicted(s: &SceneState, o: &SceneObject) -> [f64; 3] {
    let mut p = o.pose.position;
    if o.attached_to.is_some() {
        return p;
    }
    let next = s.sim_step + 1;
    if let Some(m) = s.motion_scripts.iter().find(|m| m.object == o.id) {
        if let Some(seg) = m.segments.iter().rev().find(|g| g.start_step < next) {
            for k in 0..3 {
                p[k] += seg.velocity[k] * DEFAULT_DT;
            }
        }
    }
    p
}

fn travel_height(s: &SceneState) -> f64 {
    let tallest = s
        .objects
        .iter()
        .filter(|o| o.attached_to.is_none())
        .map(|o| s.top(o))
        .fold(0.0, f64::max);
    let carried = s.attached().map(|o| s.tip()[2] - s.bottom(o)).unwrap_or(0.0);
    (tallest + carried.max(0.0) + TRAVEL_MARGIN).max(MIN_TRAVEL)
}

/// Next waypoint toward `target`: climb, traverse, then descend.
fn approach(s: &SceneState, target: [f64; 3]) -> [f64; 3] {
    let tip = s.tip();
    let travel = travel_height(s).max(target[2]);
    let e = hypot2(&tip, &target);
    let low = tip[2] < travel - 0.02;
    if e <= ALIGN || (low && e <= LOW_TRACK) {
        target
    } else if low {
        [tip[0], tip[1], travel]
    } else {
        [target[0], target[1], travel]
    }
}

fn drive(s: &SceneState, c: &Command) -> Action {
    let dof = s.q.len();
    let current_yaw = s.q.get(5).copied().unwrap_or(0.0);
    let yaw = match c.yaw {
        Some(y) => {
            let mut t = current_yaw + wrap_angle(y - current_yaw);
            if let Some((lo, hi)) = s.embodiment.joint_limits.get(5) {
                if t > *hi {
                    t -= std::f64::consts::TAU;
                } else if t < *lo {
                    t += std::f64::consts::TAU;
                }
            }
            t
        }
        None => current_yaw,
    };
    let q = inverse_kinematics(c.tip, yaw, dof);
    let mut a = vec![0.0; dof + 1];
    for j in 0..dof {
        a[j] = ((q[j] - s.q[j]) / MAX_JOINT_DELTA).clamp(-1.0, 1.0);
    }
    a[dof] = c.grip;
    Action(a)
}

fn hold_still(s: &SceneState, grip: f64) -> Command {
    Command {
        tip: s.tip(),
        yaw: None,
        grip,
    }
}

/// Strips a timing window so planning sees the underlying relation.
fn inner(g: &Goal) -> &Goal {
    match g {
        Goal::Within { goal, .. } => inner(goal),
        g => g,
    }
}

/// Where a held object must end up, and whether to let go there.
struct Placement {
    pose: Pose,
    release: bool,
}

fn yaw_hint(goals: &[Goal], object: ObjectId) -> Option<f64> {
    goals.iter().find_map(|g| match inner(g) {
        Goal::AtPosition { object: o, yaw, .. } if *o == object => *yaw,
        _ => None,
    })
}

fn rest_at(s: &SceneState, o: &SceneObject, xy: [f64; 2]) -> f64 {
    let hz = s.half_height(o);
    let probe = [xy[0], xy[1], 1.0];
    s.support_height(o.id, &probe) + hz
}

/// A free spot inside the container for `o`.
fn bin_spot(s: &SceneState, c: &SceneObject, o: &SceneObject) -> [f64; 2] {
    let p = c.pose.position;
    let h = s.aabb_half(c);
    let d = (h[0].min(h[1]) - s.half_width(o) - 0.005).max(0.0);
    let candidates = [[0.0, 0.0], [d, d], [-d, -d], [d, -d], [-d, d]];
    let others: Vec<&SceneObject> = s
        .objects
        .iter()
        .filter(|x| x.id != o.id && x.id != c.id && x.attached_to.is_none())
        .filter(|x| s.inside_footprint(c, &x.pose.position))
        .collect();
    candidates
        .iter()
        .map(|k| [p[0] + k[0], p[1] + k[1]])
        .find(|q| {
            others.iter().all(|x| {
                let xp = x.pose.position;
                ((xp[0] - q[0]).powi(2) + (xp[1] - q[1]).powi(2)).sqrt() >= s.half_width(x) + s.half_width(o)
            })
        })
        .unwrap_or([p[0], p[1]])
}

fn placement(s: &SceneState, goals: &[Goal], g: &Goal, o: &SceneObject) -> Option<Placement> {
    let keep_yaw = yaw_hint(goals, o.id).unwrap_or_else(|| o.pose.yaw());
    let at = |xy: [f64; 2], z: f64, release| Placement {
        pose: Pose::with_yaw([xy[0], xy[1], z], keep_yaw),
        release,
    };
    Some(match g {
        Goal::AtPosition { position, yaw, .. } => Placement {
            pose: Pose::with_yaw(*position, yaw.unwrap_or(keep_yaw)),
            release: true,
        },
        Goal::StackedOn { base, .. } => {
            let b = s.object(*base)?;
            at([b.pose.position[0], b.pose.position[1]], s.top(b) + s.half_height(o), true)
        }
        Goal::Inside { container, .. } => {
            let c = s.object(*container)?;
            let xy = bin_spot(s, c, o);
            at(xy, s.bottom(c) + s.half_height(o), true)
        }
        Goal::Lifted { height, .. } => {
            let p = o.pose.position;
            at([p[0], p[1]], height + s.half_height(o) + LIFT_MARGIN, false)
        }
        Goal::Relation { relation, .. } => match relation {
            Relation::Above { reference } => {
                let r = s.object(*reference)?;
                let p = r.pose.position;
                at([p[0], p[1]], s.top(r) + ABOVE_MARGIN + s.half_height(o), false)
            }
            Relation::Between { a, b } => {
                let (a, b) = (s.object(*a)?.pose.position, s.object(*b)?.pose.position);
                let xy = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                at(xy, rest_at(s, o, xy), true)
            }
            Relation::LeftOf { reference }
            | Relation::RightOf { reference }
            | Relation::InFrontOf { reference }
            | Relation::Behind { reference } => {
                let r = s.object(*reference)?;
                let dir = match relation {
                    Relation::LeftOf { .. } => [0.0, 1.0],
                    Relation::RightOf { .. } => [0.0, -1.0],
                    Relation::InFrontOf { .. } => [-1.0, 0.0],
                    _ => [1.0, 0.0],
                };
                let d = SIDE_OFFSET.max(s.half_width(o) + s.half_width(r) + 0.02);
                let p = r.pose.position;
                let xy = [p[0] + dir[0] * d, p[1] + dir[1] * d];
                at(xy, rest_at(s, o, xy), true)
            }
        },
        _ => return None,
    })
}

/// Moves the tip to the object center and closes.
fn acquire(s: &SceneState, o: &SceneObject) -> Command {
    if s.attached().is_some() {
        return hold_still(s, OPEN);
    }
    let c = predicted(s, o);
    let d = dist3(&s.tip(), &c);
    let aperture = s.gripper.aperture;
    if aperture < 0.5 {
        // A close that caught nothing: reopen while staying on course.
        return Command {
            tip: approach(s, c),
            yaw: None,
            grip: OPEN,
        };
    }
    let closing = aperture < 1.0 && d <= 0.012;
    if d <= GRASP_DIST || closing {
        return Command {
            tip: c,
            yaw: None,
            grip: CLOSE,
        };
    }
    Command {
        tip: approach(s, c),
        yaw: None,
        grip: OPEN,
    }
}

fn carry(s: &SceneState, o: &SceneObject, p: &Placement) -> Command {
    let offset = o.grasp_offset.unwrap_or(Pose::at([0.0; 3]));
    let tip_pose = Pose::from_iso(&(p.pose.to_iso() * offset.to_iso().inverse()));
    let here = o.pose.position;
    let there = p.pose.position;
    let yaw_err = wrap_angle(o.pose.yaw() - p.pose.yaw()).abs();
    if p.release
        && hypot2(&here, &there) <= RELEASE_XY
        && (here[2] - there[2]).abs() <= RELEASE_Z
        && yaw_err <= RELEASE_YAW
    {
        return hold_still(s, OPEN);
    }
    Command {
        tip: approach(s, tip_pose.position),
        yaw: Some(tip_pose.yaw()),
        grip: CLOSE,
    }
}

fn touch(s: &SceneState, o: &SceneObject, hover_until: Option<u64>) -> Command {
    if s.attached().is_some() {
        return hold_still(s, OPEN);
    }
    let c = predicted(s, o);
    let mut target = [c[0], c[1], s.top(o) + (c[2] - o.pose.position[2]) + TOUCH_CLEARANCE];
    if hover_until.is_some_and(|from| s.sim_step + 1 < from) {
        target[2] += HOVER;
    }
    Command {
        tip: approach(s, target),
        yaw: None,
        grip: OPEN,
    }
}

/// Plans toward goal `g` from the list `goals`.
fn pursue(s: &SceneState, goals: &[Goal], g: &Goal) -> Command {
    let hover_until = match g {
        Goal::Within { from_step, .. } => Some(*from_step),
        _ => None,
    };
    let g = inner(g);
    let Some(o) = s.object(g.target()) else {
        return hold_still(s, OPEN);
    };
    match g {
        Goal::Touch { .. } => touch(s, o, hover_until),
        Goal::Released { .. } => hold_still(s, OPEN),
        Goal::Avoid { .. } => hold_still(s, OPEN),
        _ => {
            let holding = s.attached().map(|h| h.id);
            if holding != Some(o.id) {
                return acquire(s, o);
            }
            match placement(s, goals, g, o) {
                Some(p) => carry(s, o, &p),
                None => hold_still(s, OPEN),
            }
        }
    }
}

/// Goal bookkeeping shared by the scripted policies.
#[derive(Debug, Default, Clone)]
struct Planner {
    stage: usize,
    last_goals: Vec<Goal>,
}

impl Planner {
    fn command(&mut self, s: &SceneState) -> Command {
        let goals = &s.goals;
        if *goals != self.last_goals {
            if !goals.starts_with(&self.last_goals) {
                self.stage = 0;
            }
            self.last_goals = goals.clone();
        }
        let active: Vec<&Goal> = goals.iter().filter(|g| !g.is_avoid()).collect();
        let current = if s.sequential {
            while self.stage < active.len() && active[self.stage].holds(s, &DONE) {
                self.stage += 1;
            }
            active.get(self.stage).copied()
        } else {
            active.iter().copied().find(|g| !inner(g).holds(s, &DONE))
        };
        match current {
            Some(g) => pursue(s, goals, g),
            None => {
                // Everything holds: keep whatever is in hand.
                let grip = if s.attached().is_some() { CLOSE } else { OPEN };
                hold_still(s, grip)
            }
        }
    }
}

fn privileged<'a>(input: &'a PolicyInput<'_>) -> Result<&'a SceneState, PolicyError> {
    input
        .privileged
        .ok_or_else(|| PolicyError::ProtocolViolation("scripted policy needs privileged state".into()))
}

/// Plans from live privileged state; the data-generating oracle.
#[derive(Debug, Default)]
pub struct ScriptedExpert {
    planner: Planner,
}

impl ScriptedExpert {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Policy for ScriptedExpert {
    fn reset(&mut self, _: &str, _: &EmbodimentConfig) -> Result<(), PolicyError> {
        self.planner = Planner::default();
        Ok(())
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        let s = privileged(input)?;
        Ok(drive(s, &self.planner.command(s)))
    }
}

/// The expert planning on the world as it was at the first step.
///
/// Objects it has held are tracked live; everything else, including the
/// goals, stays at the snapshot, so external events go unnoticed.
#[derive(Debug, Default)]
pub struct FrozenPolicy {
    planner: Planner,
    snapshot: Option<SceneState>,
    handled: BTreeSet<ObjectId>,
}

impl FrozenPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    fn view(&mut self, live: &SceneState) -> SceneState {
        let snap = self.snapshot.get_or_insert_with(|| live.clone());
        if let Some(h) = live.attached() {
            self.handled.insert(h.id);
        }
        let mut v = snap.clone();
        v.sim_step = live.sim_step;
        v.q = live.q.clone();
        v.q_dot = live.q_dot.clone();
        v.gripper = live.gripper.clone();
        for o in v.objects.iter_mut() {
            if self.handled.contains(&o.id) {
                if let Some(l) = live.object(o.id) {
                    *o = l.clone();
                }
            }
        }
        v.motion_scripts.retain(|m| !self.handled.contains(&m.object));
        v
    }
}

impl Policy for FrozenPolicy {
    fn reset(&mut self, _: &str, _: &EmbodimentConfig) -> Result<(), PolicyError> {
        *self = Self::default();
        Ok(())
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        let live = privileged(input)?;
        let view = self.view(live);
        Ok(drive(&view, &self.planner.command(&view)))
    }
}

/// Touches the first goal's object and never closes the gripper.
#[derive(Debug, Default)]
pub struct ReachOnlyPolicy;

impl ReachOnlyPolicy {
    pub fn new() -> Self {
        ReachOnlyPolicy
    }
}

impl Policy for ReachOnlyPolicy {
    fn reset(&mut self, _: &str, _: &EmbodimentConfig) -> Result<(), PolicyError> {
        Ok(())
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        let s = privileged(input)?;
        let target = s.goals.iter().find(|g| !g.is_avoid()).and_then(|g| s.object(g.target()));
        let c = match target {
            Some(o) if o.shape != Shape::Container => touch(s, o, None),
            _ => hold_still(s, OPEN),
        };
        Ok(drive(s, &Command { grip: OPEN, ..c }))
    }
}
