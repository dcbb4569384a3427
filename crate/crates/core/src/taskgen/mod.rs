//! Procedural capability tasks.
//!
//! The catalog has three templates for every (family, tier) pair. A template
//! instance is a [`TaskSpec`] plus the initial [`SceneState`]. Each spec
//! varies exactly one factor, recorded in `probe_params`; everything else is
//! drawn from a generator keyed by the seed and recorded in `fixed_params`.
//! Overriding the probe with [`generate_task_with_probe`] leaves the fixed
//! parameters untouched, which is what makes per-factor comparisons valid.
//!
//! ```
//! use nebula::episode::{Family, Tier};
//! use nebula::taskgen::{generate_task, list_tasks};
//!
//! assert_eq!(list_tasks(None, None).len(), 54);
//! let (spec, scene) = generate_task(Family::Control, Tier::Easy, 1, 7).unwrap();
//! assert_eq!(spec.scene_id, scene.scene_id);
//! assert!(!scene.goals.is_empty());
//! ```

mod builder;
mod families;
mod success;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::episode::{Family, TaskMeta, Tier};
use crate::sim::{Goal, ObjectId, SceneState, Tolerance};

pub use builder::{color, NOVEL_COLORS, PALETTE};
pub use success::{evaluate_success, evaluate_variant, SuccessTracker};

/// Consecutive satisfied states required by placement criteria.
pub const HOLD_STEPS: u32 = 5;
pub const ORIENTATION_TOLERANCE: f64 = 0.2;
/// Default trigger window for timed dynamic tasks, in steps.
pub const DEFAULT_WINDOW_STEPS: u64 = 100;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("no template {template_id} for {family}/{tier}")]
    UnknownTemplate {
        family: Family,
        tier: Tier,
        template_id: u8,
    },
    #[error("invalid probe value: {0}")]
    InvalidProbe(String),
    #[error("trajectory does not belong to this task: {0}")]
    SpecMismatch(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    AtGoalPose,
    StackedOn,
    InsideContainer,
    ContactedTarget,
    SequenceCompleted,
    RelationSatisfied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriterion {
    pub predicate_id: String,
    pub kind: CriterionKind,
    pub tolerance: Tolerance,
    pub hold_steps: u32,
}

/// Branch condition evaluated on the first scene of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "condition", rename_all = "snake_case")]
pub enum Condition {
    LargerThan { a: ObjectId, b: ObjectId },
}

impl Condition {
    pub fn holds(&self, scene: &SceneState) -> bool {
        match self {
            Condition::LargerThan { a, b } => match (scene.object(*a), scene.object(*b)) {
                (Some(a), Some(b)) => a.size > b.size,
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditional {
    pub condition: Condition,
    pub then_goals: Vec<Goal>,
    pub else_goals: Vec<Goal>,
}

impl Conditional {
    pub fn select(&self, frozen: &SceneState) -> &[Goal] {
        if self.condition.holds(frozen) {
            &self.then_goals
        } else {
            &self.else_goals
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub tier: Tier,
    pub template_id: u8,
    pub seed: u64,
    pub scene_id: String,
    pub robot_id: String,
    /// The single varied factor: exactly one key.
    pub probe_params: BTreeMap<String, Value>,
    pub fixed_params: BTreeMap<String, Value>,
    pub instruction: String,
    pub predicate_id: String,
    pub criterion: SuccessCriterion,
    /// Full grasp-and-place criterion instead of contact only.
    pub entangled: bool,
    /// Number of atomic sub-actions an ideal solution needs.
    pub atomic_actions: u32,
    pub max_steps: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditional: Option<Conditional>,
}

impl TaskSpec {
    /// Hex SHA-256 of the canonical JSON of `fixed_params`.
    pub fn fixed_params_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.fixed_params).expect("params serialize");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn template_ref(&self) -> TemplateRef {
        TemplateRef {
            family: self.family,
            tier: self.tier,
            template_id: self.template_id,
        }
    }

    pub fn variant_tag(&self) -> String {
        match (self.family, self.entangled) {
            (Family::Perception, true) => "entangled".to_string(),
            (Family::Perception, false) => "isolated".to_string(),
            _ => String::new(),
        }
    }

    pub fn task_meta(&self) -> TaskMeta {
        TaskMeta {
            family: self.family,
            tier: self.tier,
            template_id: self.template_id,
            seed: self.seed,
            variant_tag: self.variant_tag(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TemplateRef {
    pub family: Family,
    pub tier: Tier,
    pub template_id: u8,
}

impl TemplateRef {
    pub fn name(&self) -> &'static str {
        families::template_name(self.family, self.tier, self.template_id).unwrap_or("unknown")
    }
}

impl std::fmt::Display for TemplateRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.family, self.tier, self.template_id)
    }
}

pub const TEMPLATES_PER_TIER: u8 = 3;

/// The catalog in family, tier, template order, optionally filtered.
pub fn list_tasks(families: Option<&[Family]>, tiers: Option<&[Tier]>) -> Vec<TemplateRef> {
    let mut out = Vec::new();
    for family in Family::ALL {
        if families.is_some_and(|f| !f.contains(&family)) {
            continue;
        }
        for tier in Tier::ALL {
            if tiers.is_some_and(|t| !t.contains(&tier)) {
                continue;
            }
            for template_id in 1..=TEMPLATES_PER_TIER {
                out.push(TemplateRef {
                    family,
                    tier,
                    template_id,
                });
            }
        }
    }
    out
}

pub fn tolerance(tier: Tier) -> Tolerance {
    let position = match tier {
        Tier::Easy => 0.03,
        Tier::Medium => 0.015,
        Tier::Hard => 0.008,
    };
    Tolerance {
        position,
        orientation: ORIENTATION_TOLERANCE,
    }
}

pub fn max_steps(tier: Tier) -> u32 {
    match tier {
        Tier::Easy | Tier::Medium => 400,
        Tier::Hard => 800,
    }
}

/// Options beyond the four catalog coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Variant {
    /// Replaces the seeded probe value.
    pub probe: Option<Value>,
    /// Perception only: grade full grasp-and-place instead of contact.
    pub entangled: bool,
}

pub fn generate_task(
    family: Family,
    tier: Tier,
    template_id: u8,
    seed: u64,
) -> Result<(TaskSpec, SceneState), TaskError> {
    generate_variant(family, tier, template_id, seed, &Variant::default())
}

pub fn generate_task_with_probe(
    family: Family,
    tier: Tier,
    template_id: u8,
    seed: u64,
    probe: Value,
) -> Result<(TaskSpec, SceneState), TaskError> {
    let v = Variant {
        probe: Some(probe),
        entangled: false,
    };
    generate_variant(family, tier, template_id, seed, &v)
}

pub fn generate_variant(
    family: Family,
    tier: Tier,
    template_id: u8,
    seed: u64,
    variant: &Variant,
) -> Result<(TaskSpec, SceneState), TaskError> {
    if !(1..=TEMPLATES_PER_TIER).contains(&template_id) {
        return Err(TaskError::UnknownTemplate {
            family,
            tier,
            template_id,
        });
    }
    if variant.entangled && family != Family::Perception {
        return Err(TaskError::InvalidProbe(format!(
            "{family} has no entangled variant"
        )));
    }
    let t = TemplateRef {
        family,
        tier,
        template_id,
    };
    let draft = families::draft(t, seed, variant)?;
    Ok(draft.finish(t, seed, variant.entangled))
}
