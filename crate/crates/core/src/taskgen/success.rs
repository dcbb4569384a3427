//! Success predicates evaluated over a trajectory of privileged states.

use super::{CriterionKind, TaskError, TaskSpec};
use crate::sim::{Goal, SceneState, Tolerance};

/// Incremental success check; feed it every state in order.
///
/// Hold criteria need `hold_steps` consecutive satisfied states. Contact is
/// latched on first touch. Sequences advance a stage pointer whenever the
/// current stage holds. Touching an `Avoid` object fails the run for good.
#[derive(Debug, Clone)]
pub struct SuccessTracker {
    kind: CriterionKind,
    tolerance: Tolerance,
    hold_steps: u32,
    conditional: Option<super::Conditional>,
    resolved: Option<Vec<Goal>>,
    last_goals: Vec<Goal>,
    stage: usize,
    streak: u32,
    done: bool,
    violated: bool,
}

impl SuccessTracker {
    pub fn new(spec: &TaskSpec) -> Self {
        Self::with_entangled(spec, spec.entangled)
    }

    /// Grades with the entangled or isolated criterion regardless of how
    /// the spec was generated.
    pub fn with_entangled(spec: &TaskSpec, entangled: bool) -> Self {
        let kind = if entangled == spec.entangled {
            spec.criterion.kind
        } else if entangled {
            CriterionKind::InsideContainer
        } else {
            CriterionKind::ContactedTarget
        };
        SuccessTracker {
            kind,
            tolerance: spec.criterion.tolerance,
            hold_steps: spec.criterion.hold_steps,
            conditional: spec.conditional.clone(),
            resolved: None,
            last_goals: Vec::new(),
            stage: 0,
            streak: 0,
            done: false,
            violated: false,
        }
    }

    pub fn kind(&self) -> CriterionKind {
        self.kind
    }

    /// Index of the current stage in sequence mode.
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn succeeded(&self) -> bool {
        self.done && !self.violated
    }

    /// An avoid constraint was broken; success is no longer reachable.
    pub fn failed(&self) -> bool {
        self.violated
    }

    /// The goals currently graded, after conditional resolution.
    pub fn goals<'a>(&'a self, scene: &'a SceneState) -> &'a [Goal] {
        self.resolved.as_deref().unwrap_or(&scene.goals)
    }

    /// Consumes the next state and returns whether the task is solved so far.
    pub fn update(&mut self, scene: &SceneState) -> bool {
        if self.resolved.is_none() {
            if let Some(c) = &self.conditional {
                self.resolved = Some(c.select(scene).to_vec());
            }
        }
        let goals: Vec<Goal> = self.goals(scene).to_vec();
        if goals != self.last_goals {
            if !goals.starts_with(&self.last_goals) {
                self.stage = 0;
                self.done = false;
            }
            self.streak = 0;
            self.last_goals = goals.clone();
        }
        let tol = self.tolerance;
        if goals.iter().any(|g| g.is_avoid() && !g.holds(scene, &tol)) {
            self.violated = true;
        }
        let active: Vec<&Goal> = goals.iter().filter(|g| !g.is_avoid()).collect();
        if active.is_empty() {
            return self.succeeded();
        }

        if self.kind == CriterionKind::ContactedTarget {
            let touch = match active[0] {
                g @ (Goal::Touch { .. } | Goal::Within { .. }) if is_touch(g) => g.clone(),
                g => Goal::Touch { object: g.target() },
            };
            if touch.holds(scene, &tol) {
                self.done = true;
            }
        } else if self.kind == CriterionKind::SequenceCompleted || scene.sequential {
            while self.stage < active.len() && active[self.stage].holds(scene, &tol) {
                self.stage += 1;
            }
            self.done = self.stage >= active.len();
        } else if !self.done {
            if active.iter().all(|g| g.holds(scene, &tol)) {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
            self.done = self.streak >= self.hold_steps;
        }
        self.succeeded()
    }
}

fn is_touch(g: &Goal) -> bool {
    match g {
        Goal::Touch { .. } => true,
        Goal::Within { goal, .. } => is_touch(goal),
        _ => false,
    }
}

/// Grades a whole trajectory with the spec's own criterion.
pub fn evaluate_success(spec: &TaskSpec, trajectory: &[SceneState]) -> Result<bool, TaskError> {
    evaluate_variant(spec, trajectory, spec.entangled)
}

pub fn evaluate_variant(spec: &TaskSpec, trajectory: &[SceneState], entangled: bool) -> Result<bool, TaskError> {
    let first = trajectory.first().ok_or(TaskError::EmptyTrajectory)?;
    if first.scene_id != spec.scene_id {
        return Err(TaskError::SpecMismatch(format!(
            "scene {} is not {}",
            first.scene_id, spec.scene_id
        )));
    }
    if first.embodiment.robot_id != spec.robot_id {
        return Err(TaskError::SpecMismatch(format!(
            "robot {} is not {}",
            first.embodiment.robot_id, spec.robot_id
        )));
    }
    let mut tracker = SuccessTracker::with_entangled(spec, entangled);
    let mut ok = false;
    for s in trajectory {
        ok = tracker.update(s);
    }
    Ok(ok)
}
