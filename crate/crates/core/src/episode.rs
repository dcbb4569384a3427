//! Canonical, embodiment-abstracted trajectory records.
//!
//! An [`Episode`] is one complete task attempt: the instruction, the task
//! metadata, the robot description it was recorded on, and the ordered
//! [`Step`]s. Every step carries six fixed camera views in three modalities,
//! the joint state, the action taken and a per-step success flag.
//!
//! Types here are plain data. [`validate_episode`] reports every invariant
//! violation as data; nothing in this module panics on malformed input.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gripper hardware class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    ParallelJaw,
    Suction,
    None,
}

/// Robot hardware description, decoupled from episode data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentConfig {
    pub robot_id: String,
    pub dof: u32,
    pub gripper: Gripper,
    pub arm_count: u32,
    /// Per-joint `(min, max)` in radians.
    pub joint_limits: Vec<(f64, f64)>,
}

impl EmbodimentConfig {
    /// The single-arm, 7-joint desk robot used by the bundled simulator.
    pub fn desk_arm() -> Self {
        use std::f64::consts::PI;
        EmbodimentConfig {
            robot_id: "desk-arm-7".to_string(),
            dof: 7,
            gripper: Gripper::ParallelJaw,
            arm_count: 1,
            joint_limits: vec![
                (-2.0, 2.0),
                (-2.0, 2.0),
                (-1.5, 1.0),
                (-PI, PI),
                (-PI, PI),
                (-PI, PI),
                (-2.9, 2.9),
            ],
        }
    }

    /// Length of an action vector for this robot: one entry per joint plus the gripper.
    pub fn action_dim(&self) -> usize {
        self.dof as usize + 1
    }

    /// Invariant violations of the configuration itself.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.dof == 0 {
            out.push("dof must be at least 1".to_string());
        }
        if self.arm_count == 0 {
            out.push("arm_count must be at least 1".to_string());
        }
        if self.joint_limits.len() != self.dof as usize {
            out.push(format!(
                "joint_limits has {} entries for dof {}",
                self.joint_limits.len(),
                self.dof
            ));
        }
        for (j, (lo, hi)) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) {
                out.push(format!("joint {j} limits ({lo}, {hi}) are not ordered"));
            }
        }
        out
    }
}

/// The six fixed viewpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    Front,
    Back,
    Left,
    Right,
    Top,
    Wrist,
}

impl CameraId {
    pub const ALL: [CameraId; 6] = [
        CameraId::Front,
        CameraId::Back,
        CameraId::Left,
        CameraId::Right,
        CameraId::Top,
        CameraId::Wrist,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CameraId::Front => "front",
            CameraId::Back => "back",
            CameraId::Left => "left",
            CameraId::Right => "right",
            CameraId::Top => "top",
            CameraId::Wrist => "wrist",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        CameraId::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CameraId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CameraId::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown camera `{s}`"))
    }
}

/// Image channel kind. Each has a fixed per-pixel byte stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// 8-bit RGB, 3 bytes per pixel.
    Rgb,
    /// 32-bit little-endian float meters, 4 bytes per pixel.
    Depth,
    /// 16-bit little-endian object id, 2 bytes per pixel.
    Segmentation,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Segmentation];

    pub fn stride(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth => 4,
            Modality::Segmentation => 2,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Modality::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Segmentation => "segmentation",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown modality `{s}`"))
    }
}

/// Row-major raster.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub modality: Modality,
    pub data: Vec<u8>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("modality", &self.modality)
            .field("bytes", &self.data.len())
            .finish()
    }
}

impl Image {
    /// A zero-filled image of the right payload size.
    pub fn blank(width: u32, height: u32, modality: Modality) -> Self {
        Image {
            width,
            height,
            modality,
            data: vec![0; Self::payload_len(width, height, modality)],
        }
    }

    pub fn payload_len(width: u32, height: u32, modality: Modality) -> usize {
        width as usize * height as usize * modality.stride()
    }

    pub fn expected_len(&self) -> usize {
        Self::payload_len(self.width, self.height, self.modality)
    }

    pub fn depth_at(&self, row: u32, col: u32) -> Option<f32> {
        if self.modality != Modality::Depth || row >= self.height || col >= self.width {
            return None;
        }
        let i = (row as usize * self.width as usize + col as usize) * 4;
        let bytes = self.data.get(i..i + 4)?;
        Some(f32::from_le_bytes(bytes.try_into().ok()?))
    }

    pub fn segment_at(&self, row: u32, col: u32) -> Option<u16> {
        if self.modality != Modality::Segmentation || row >= self.height || col >= self.width {
            return None;
        }
        let i = (row as usize * self.width as usize + col as usize) * 2;
        let bytes = self.data.get(i..i + 2)?;
        Some(u16::from_le_bytes(bytes.try_into().ok()?))
    }

    pub fn rgb_at(&self, row: u32, col: u32) -> Option<[u8; 3]> {
        if self.modality != Modality::Rgb || row >= self.height || col >= self.width {
            return None;
        }
        let i = (row as usize * self.width as usize + col as usize) * 3;
        let bytes = self.data.get(i..i + 3)?;
        Some([bytes[0], bytes[1], bytes[2]])
    }
}

/// The three modalities captured by one camera at one timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraViews {
    pub rgb: Image,
    pub depth: Image,
    pub segmentation: Image,
}

impl CameraViews {
    pub fn get(&self, modality: Modality) -> &Image {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Depth => &self.depth,
            Modality::Segmentation => &self.segmentation,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Image> {
        [&self.rgb, &self.depth, &self.segmentation].into_iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub views: BTreeMap<CameraId, CameraViews>,
    /// Joint positions, radians.
    pub q: Vec<f64>,
    /// Joint velocities, rad/s.
    pub q_dot: Vec<f64>,
    /// Timestep index.
    pub t: u64,
    /// Seconds since episode start.
    pub wall_time: f64,
}

/// Normalized joint-delta targets for every joint, then one gripper command.
///
/// All components lie in `[-1, 1]`. For the gripper, `-1` opens and `+1` closes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub Vec<f64>);

impl Action {
    pub fn zeros(dim: usize) -> Self {
        Action(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn gripper(&self) -> Option<f64> {
        self.0.last().copied()
    }

    /// True when every component is finite and inside `[-1, 1]`.
    pub fn in_range(&self) -> bool {
        self.0.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: u32,
    pub observation: Observation,
    pub action: Action,
    pub success: bool,
}

/// The six capability families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    Control,
    Perception,
    Language,
    DynamicAdaptation,
    SpatialReasoning,
    Robustness,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Control,
        Family::Perception,
        Family::Language,
        Family::DynamicAdaptation,
        Family::SpatialReasoning,
        Family::Robustness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Control => "Control",
            Family::Perception => "Perception",
            Family::Language => "Language",
            Family::DynamicAdaptation => "DynamicAdaptation",
            Family::SpatialReasoning => "SpatialReasoning",
            Family::Robustness => "Robustness",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Family::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "control" => Ok(Family::Control),
            "perception" => Ok(Family::Perception),
            "language" => Ok(Family::Language),
            "dynamicadaptation" | "dynamic" => Ok(Family::DynamicAdaptation),
            "spatialreasoning" | "spatial" => Ok(Family::SpatialReasoning),
            "robustness" | "robust" | "robustnessgeneralization" => Ok(Family::Robustness),
            _ => Err(format!("unknown family `{s}`")),
        }
    }
}

/// Difficulty tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Easy => "Easy",
            Tier::Medium => "Medium",
            Tier::Hard => "Hard",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Tier::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tier::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown tier `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub family: Family,
    pub tier: Tier,
    pub template_id: u8,
    pub seed: u64,
    pub variant_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub instruction: String,
    pub embodiment: EmbodimentConfig,
    pub task_meta: TaskMeta,
    pub steps: Vec<Step>,
    pub final_success: bool,
}

/// Machine-readable violation codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    Embodiment,
    EmptySteps,
    StepOrder,
    ActionDim,
    ActionRange,
    JointDim,
    CameraSet,
    ImageModality,
    ImagePayload,
    WallTime,
    FinalSuccess,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::Embodiment => "EMBODIMENT",
            ViolationCode::EmptySteps => "EMPTY_STEPS",
            ViolationCode::StepOrder => "STEP_ORDER",
            ViolationCode::ActionDim => "ACTION_DIM",
            ViolationCode::ActionRange => "ACTION_RANGE",
            ViolationCode::JointDim => "JOINT_DIM",
            ViolationCode::CameraSet => "CAMERA_SET",
            ViolationCode::ImageModality => "IMAGE_MODALITY",
            ViolationCode::ImagePayload => "IMAGE_PAYLOAD",
            ViolationCode::WallTime => "WALL_TIME",
            ViolationCode::FinalSuccess => "FINAL_SUCCESS",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Number of offending items (steps, images, ...).
    pub count: usize,
    pub detail: String,
}

/// Result of [`validate_episode`]; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{} ({}x): {}", v.code, v.count, v.detail))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid episode: {0}")]
    InvalidEpisode(ValidationReport),
}

/// Accumulates one violation per code, keeping the first detail seen.
#[derive(Default)]
struct Collector {
    found: BTreeMap<ViolationCode, (usize, String)>,
}

impl Collector {
    fn push(&mut self, code: ViolationCode, detail: impl FnOnce() -> String) {
        self.found
            .entry(code)
            .and_modify(|(n, _)| *n += 1)
            .or_insert_with(|| (1, detail()));
    }

    fn finish(self) -> ValidationReport {
        ValidationReport {
            violations: self
                .found
                .into_iter()
                .map(|(code, (count, detail))| Violation { code, count, detail })
                .collect(),
        }
    }
}

/// Checks every episode invariant.
///
/// Violations are grouped by code, one entry per code with the number of
/// offending items and the first offending location. The report is sorted
/// by code so it does not depend on traversal order.
pub fn validate_episode(ep: &Episode) -> ValidationReport {
    let mut c = Collector::default();
    let emb = &ep.embodiment;
    for problem in emb.violations() {
        c.push(ViolationCode::Embodiment, || problem);
    }
    let dof = emb.dof as usize;

    if ep.steps.is_empty() {
        c.push(ViolationCode::EmptySteps, || "episode has no steps".to_string());
    }

    for (pos, step) in ep.steps.iter().enumerate() {
        if step.index as usize != pos {
            c.push(ViolationCode::StepOrder, || {
                format!("step at position {pos} has index {}", step.index)
            });
        }
        if step.action.len() != dof + 1 {
            c.push(ViolationCode::ActionDim, || {
                format!(
                    "step {pos}: action length {} but dof+1 = {}",
                    step.action.len(),
                    dof + 1
                )
            });
        } else if !step.action.in_range() {
            c.push(ViolationCode::ActionRange, || {
                format!("step {pos}: action component outside [-1, 1] or not finite")
            });
        }
        let obs = &step.observation;
        if obs.q.len() != dof || obs.q_dot.len() != dof {
            c.push(ViolationCode::JointDim, || {
                format!(
                    "step {pos}: |q| = {}, |q_dot| = {}, dof = {dof}",
                    obs.q.len(),
                    obs.q_dot.len()
                )
            });
        }
        if !(obs.wall_time.is_finite() && obs.wall_time >= 0.0) {
            c.push(ViolationCode::WallTime, || {
                format!("step {pos}: wall_time {} is not a nonnegative number", obs.wall_time)
            });
        }
        if obs.views.len() != CameraId::ALL.len() {
            c.push(ViolationCode::CameraSet, || {
                format!("step {pos}: {} cameras, expected 6", obs.views.len())
            });
        }
        for (camera, views) in &obs.views {
            for (expected, image) in Modality::ALL.into_iter().zip(views.iter()) {
                if image.modality != expected {
                    c.push(ViolationCode::ImageModality, || {
                        format!(
                            "step {pos} camera {camera}: {} slot holds {} data",
                            expected.as_str(),
                            image.modality.as_str()
                        )
                    });
                }
                if image.data.len() != image.expected_len() {
                    c.push(ViolationCode::ImagePayload, || {
                        format!(
                            "step {pos} camera {camera} {}: {} bytes for {}x{}",
                            image.modality.as_str(),
                            image.data.len(),
                            image.width,
                            image.height
                        )
                    });
                }
            }
        }
    }

    if let Some(last) = ep.steps.last() {
        if last.success != ep.final_success {
            c.push(ViolationCode::FinalSuccess, || {
                format!(
                    "final_success {} disagrees with last step flag {}",
                    ep.final_success, last.success
                )
            });
        }
    }

    c.finish()
}

/// Episode-level success: the success flag of the final step.
pub fn episode_success(ep: &Episode) -> Result<bool, EpisodeError> {
    let report = validate_episode(ep);
    if !report.is_valid() {
        return Err(EpisodeError::InvalidEpisode(report));
    }
    Ok(ep.final_success)
}


#[cfg(test)]
mod tests {
    use super::fixtures::episode;
    use super::*;

    #[test]
    fn well_formed_episode_is_valid() {
        let ep = episode(&[false; 10]);
        assert!(validate_episode(&ep).is_valid());
    }

    #[test]
    fn oversized_action_reports_one_action_dim() {
        let mut ep = episode(&[false; 10]);
        for step in &mut ep.steps {
            step.action.0.push(0.0);
        }
        let report = validate_episode(&ep);
        assert_eq!(report.codes(), vec![ViolationCode::ActionDim]);
        assert_eq!(report.violations[0].count, 10);
    }

    #[test]
    fn shuffled_indices_report_step_order() {
        let mut ep = episode(&[false, false, false]);
        ep.steps[1].index = 2;
        ep.steps[2].index = 1;
        let report = validate_episode(&ep);
        assert_eq!(report.codes(), vec![ViolationCode::StepOrder]);
    }

    #[test]
    fn missing_camera_and_bad_payload() {
        let mut ep = episode(&[true]);
        ep.steps[0].observation.views.remove(&CameraId::Wrist);
        ep.steps[0]
            .observation
            .views
            .get_mut(&CameraId::Top)
            .unwrap()
            .depth
            .data
            .pop();
        let report = validate_episode(&ep);
        assert!(report.has(ViolationCode::CameraSet));
        assert!(report.has(ViolationCode::ImagePayload));
    }

    #[test]
    fn swapped_modality_slot() {
        let mut ep = episode(&[true]);
        let views = ep.steps[0].observation.views.get_mut(&CameraId::Front).unwrap();
        std::mem::swap(&mut views.rgb, &mut views.depth);
        assert!(validate_episode(&ep).has(ViolationCode::ImageModality));
    }

    #[test]
    fn empty_and_mismatched_final() {
        let mut ep = episode(&[]);
        assert!(validate_episode(&ep).has(ViolationCode::EmptySteps));
        ep = episode(&[true, false]);
        ep.final_success = true;
        assert!(validate_episode(&ep).has(ViolationCode::FinalSuccess));
    }

    #[test]
    fn bad_embodiment_and_action_range() {
        let mut ep = episode(&[false]);
        ep.embodiment.joint_limits[0] = (1.0, -1.0);
        ep.steps[0].action.0[0] = 1.5;
        let report = validate_episode(&ep);
        assert!(report.has(ViolationCode::Embodiment));
        assert!(report.has(ViolationCode::ActionRange));
    }

    #[test]
    fn success_is_last_step_flag() {
        assert!(episode_success(&episode(&[false, false, true])).unwrap());
        assert!(!episode_success(&episode(&[false, false, false])).unwrap());
        assert!(!episode_success(&episode(&[true, false])).unwrap());
    }

    #[test]
    fn success_of_invalid_episode_errors() {
        let mut ep = episode(&[true]);
        ep.steps[0].index = 3;
        assert!(matches!(
            episode_success(&ep),
            Err(EpisodeError::InvalidEpisode(_))
        ));
    }

    #[test]
    fn validation_is_idempotent() {
        let mut ep = episode(&[true, true]);
        ep.steps[0].observation.q.pop();
        ep.steps[1].action.0.clear();
        let a = validate_episode(&ep);
        let b = validate_episode(&ep);
        assert_eq!(a, b);
        let mut sorted = a.violations.clone();
        sorted.sort();
        assert_eq!(sorted, a.violations);
    }

    #[test]
    fn parse_names() {
        assert_eq!("dynamic".parse::<Family>().unwrap(), Family::DynamicAdaptation);
        assert_eq!("Spatial_Reasoning".parse::<Family>().unwrap(), Family::SpatialReasoning);
        assert_eq!("hard".parse::<Tier>().unwrap(), Tier::Hard);
        assert_eq!("wrist".parse::<CameraId>().unwrap(), CameraId::Wrist);
    }
}
