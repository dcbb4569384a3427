//! Single-indicator stress probes at pressure levels v1 to v3.
//!
//! Timing comes from the policy handle's monotonic timestamps around each
//! `act` call, so simulation stepping and rendering are never counted.

use std::fmt;
use std::str::FromStr;
use std::sync::{RwLock, RwLockWriteGuard};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::capability::{run_episode, RunOptions};
use crate::episode::{Action, Family, Tier};
use crate::policy::{Mode, PolicyError, PolicyHandle};
use crate::rng::{bounded, seeded, uniform};
use crate::sim::{inject_event, observe, step, Event, EventKind, Goal, SceneObject, SceneState, Shape, DEFAULT_DT};
use crate::taskgen::{generate_task, generate_task_with_probe, TaskError, TaskSpec};

/// Stress probes take this exclusively; capability suites share it.
pub(crate) static TIMING_LOCK: RwLock<()> = RwLock::new(());

fn exclusive() -> RwLockWriteGuard<'static, ()> {
    TIMING_LOCK.write().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Error)]
pub enum StressError {
    #[error("stability needs at least 2 actions, got {0}")]
    TooShort(usize),
    #[error("action {index} has {got} values, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("warmup {warmup} must be below step count {steps}")]
    BadProfile { steps: u32, warmup: u32 },
    #[error("{0} is not handled by this probe")]
    WrongKind(StressKind),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Stability of an action sequence: exp of minus the mean L2 norm of
/// consecutive differences.
pub fn stability_score(actions: &[Action]) -> Result<f64, StressError> {
    if actions.len() < 2 {
        return Err(StressError::TooShort(actions.len()));
    }
    let dim = actions[0].len();
    if let Some((index, a)) = actions.iter().enumerate().find(|(_, a)| a.len() != dim) {
        return Err(StressError::DimensionMismatch {
            index,
            expected: dim,
            got: a.len(),
        });
    }
    let total: f64 = actions
        .windows(2)
        .map(|w| {
            w[1].values()
                .iter()
                .zip(w[0].values())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok((-total / (actions.len() - 1) as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StressKind {
    Frequency,
    Latency,
    Stability,
    Adaptability,
    Resources,
}

impl StressKind {
    pub const ALL: [StressKind; 5] = [
        StressKind::Frequency,
        StressKind::Latency,
        StressKind::Stability,
        StressKind::Adaptability,
        StressKind::Resources,
    ];
}

impl fmt::Display for StressKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for StressKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        StressKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown stress kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    V1,
    V2,
    V3,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::V1 => "v1",
            Level::V2 => "v2",
            Level::V3 => "v3",
        })
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Level::V1),
            "v2" => Ok(Level::V2),
            "v3" => Ok(Level::V3),
            _ => Err(format!("unknown level {s:?}")),
        }
    }
}

pub const DEFAULT_STEPS: u32 = 200;
pub const RESOURCE_STEPS: u32 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct StressProfile {
    pub kind: StressKind,
    pub level: Level,
    /// Closed-loop steps (K).
    pub steps: u32,
    /// Leading calls left out of timing statistics (W).
    pub warmup: u32,
    /// Seeds the scenario scene.
    pub seed: u64,
    pub image_size: u32,
}

impl StressProfile {
    /// Defaults: K = 200, W = K / 10.
    pub fn new(kind: StressKind, level: Level) -> Self {
        StressProfile {
            kind,
            level,
            steps: DEFAULT_STEPS,
            warmup: DEFAULT_STEPS / 10,
            seed: 0,
            image_size: RunOptions::default().image_size,
        }
    }

    pub fn with_steps(mut self, steps: u32) -> Self {
        self.steps = steps;
        self.warmup = steps / 10;
        self
    }

    fn check(&self) -> Result<(), StressError> {
        if self.warmup >= self.steps {
            return Err(StressError::BadProfile {
                steps: self.steps,
                warmup: self.warmup,
            });
        }
        Ok(())
    }

    /// The scene a timing or stability probe runs on.
    pub fn scenario(&self) -> Result<(TaskSpec, SceneState), StressError> {
        use StressKind::*;
        let moving = |tier, id, speed: Option<f64>| match speed {
            Some(v) => generate_task_with_probe(Family::DynamicAdaptation, tier, id, self.seed, json!(v)),
            None => generate_task(Family::DynamicAdaptation, tier, id, self.seed),
        };
        Ok(match (self.kind, self.level) {
            // Slow uniform motion, medium-speed bouncing, fast redirected motion.
            (Frequency, Level::V1) => moving(Tier::Medium, 2, Some(0.01))?,
            (Frequency, Level::V2) => moving(Tier::Medium, 2, Some(0.03))?,
            (Frequency, Level::V3) => moving(Tier::Hard, 2, None)?,
            (Latency, Level::V1) => generate_task(Family::Control, Tier::Easy, 1, self.seed)?,
            (Latency, Level::V2) => moving(Tier::Medium, 2, Some(0.02))?,
            (Latency, Level::V3) => moving(Tier::Medium, 2, Some(0.06))?,
            (Stability, Level::V1) => generate_task(Family::Control, Tier::Easy, 1, self.seed)?,
            (Stability, Level::V2) => generate_task(Family::Control, Tier::Easy, 2, self.seed)?,
            (Stability, Level::V3) => generate_task(Family::SpatialReasoning, Tier::Hard, 1, self.seed)?,
            (Resources, _) => generate_task(Family::Control, Tier::Easy, 1, self.seed)?,
            (Adaptability, _) => return Err(StressError::WrongKind(Adaptability)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyMs {
    pub mean: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Resources {
    pub peak_process_mem_bytes: Option<u64>,
    pub policy_artifact_bytes: Option<u64>,
    pub accelerator_mem_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: StressKind,
    pub level: Level,
    pub policy_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<LatencyMs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptability_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resources: Option<Resources>,
    /// Calls (or episodes) the value is computed from.
    pub sample_count: u64,
    /// Set when the probe could not complete; values are then absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricRecord {
    fn empty(kind: StressKind, level: Level, policy: &PolicyHandle) -> Self {
        MetricRecord {
            kind,
            level,
            policy_id: policy.policy_id.clone(),
            frequency_hz: None,
            latency_ms: None,
            stability: None,
            adaptability_rate: None,
            resources: None,
            sample_count: 0,
            error: None,
            note: (policy.mode() == Mode::ExternalBridge)
                .then(|| "bridge timings span OBS write to ACT read, including policy-side decode".to_string()),
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// K closed-loop steps on `scene`; returns the actions and per-call seconds.
fn drive(
    policy: &mut PolicyHandle,
    spec: &TaskSpec,
    mut scene: SceneState,
    steps: u32,
    image_size: u32,
    mut sample: impl FnMut(),
) -> Result<(Vec<Action>, Vec<f64>), PolicyError> {
    policy.reset(&spec.instruction, &scene.embodiment)?;
    policy.clear_timings();
    let mut actions = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let obs = observe(&scene, image_size, &[], DEFAULT_DT);
        let a = policy.act(&obs, Some(&scene))?;
        scene = step(&scene, &a, DEFAULT_DT).map_err(|e| PolicyError::MalformedAction(e.to_string()))?;
        actions.push(a);
        sample();
    }
    let secs = policy.timings().iter().map(|t| t.service_ns() as f64 * 1e-9).collect();
    Ok((actions, secs))
}

/// Runs a Frequency, Latency, Stability or Resources probe.
pub fn run_probe(policy: &mut PolicyHandle, profile: &StressProfile) -> Result<MetricRecord, StressError> {
    match profile.kind {
        StressKind::Adaptability => Err(StressError::WrongKind(StressKind::Adaptability)),
        StressKind::Resources => Ok(profile_resources(policy, profile)),
        _ => measure(policy, profile),
    }
}

fn measure(policy: &mut PolicyHandle, profile: &StressProfile) -> Result<MetricRecord, StressError> {
    profile.check()?;
    let (spec, scene) = profile.scenario()?;
    let mut rec = MetricRecord::empty(profile.kind, profile.level, policy);
    let _guard = exclusive();
    let (actions, secs) = match drive(policy, &spec, scene, profile.steps, profile.image_size, || {}) {
        Ok(x) => x,
        Err(e) => {
            log::warn!("{} {} probe failed: {e}", profile.kind, profile.level);
            rec.error = Some(e.to_string());
            return Ok(rec);
        }
    };
    let timed = &secs[profile.warmup as usize..];
    match profile.kind {
        StressKind::Frequency => {
            rec.frequency_hz = Some(timed.len() as f64 / timed.iter().sum::<f64>());
            rec.sample_count = timed.len() as u64;
        }
        StressKind::Latency => {
            let ms: Vec<f64> = timed.iter().map(|s| s * 1e3).collect();
            rec.latency_ms = Some(LatencyMs {
                mean: ms.iter().sum::<f64>() / ms.len() as f64,
                p95: percentile(&ms, 95.0).unwrap_or(0.0),
            });
            rec.sample_count = ms.len() as u64;
        }
        _ => {
            rec.stability = Some(stability_score(&actions)?);
            rec.sample_count = actions.len() as u64;
        }
    }
    Ok(rec)
}

/// Resident set size of a process in bytes, from procfs.
pub fn resident_bytes(pid: Option<u32>) -> Option<u64> {
    let path = match pid {
        Some(p) => format!("/proc/{p}/status"),
        None => "/proc/self/status".to_string(),
    };
    let status = std::fs::read_to_string(path).ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Peak resident memory over a short rollout, plus what the policy reports.
pub fn profile_resources(policy: &mut PolicyHandle, profile: &StressProfile) -> MetricRecord {
    let mut rec = MetricRecord::empty(StressKind::Resources, profile.level, policy);
    let (spec, scene) = match profile.scenario() {
        Ok(x) => x,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let _guard = exclusive();
    let pid = policy.process_id();
    let mut peak: Option<u64> = None;
    let mut sample = || {
        let total = resident_bytes(None).map(|own| own + pid.and_then(|p| resident_bytes(Some(p))).unwrap_or(0));
        peak = peak.max(total);
    };
    sample();
    let steps = RESOURCE_STEPS.min(profile.steps.max(1));
    let result = drive(policy, &spec, scene, steps, profile.image_size, &mut sample);
    if let Err(e) = result {
        rec.error = Some(e.to_string());
    }
    let reported = policy.resources();
    rec.resources = Some(Resources {
        peak_process_mem_bytes: peak,
        policy_artifact_bytes: reported.artifact_bytes,
        accelerator_mem_bytes: reported.accelerator_mem_bytes,
    });
    rec.sample_count = steps as u64;
    rec
}

/// Control-Easy episode with the level's mid-episode event injected.
///
/// v1 moves the cube at least 10 cm away, v2 switches the instruction to a
/// second cube, v3 follows the pick-up with a release instruction.
pub fn adaptability_episode(level: Level, seed: u64) -> Result<(TaskSpec, SceneState), StressError> {
    let template = if level == Level::V1 { 1 } else { 2 };
    let (spec, scene) = generate_task(Family::Control, Tier::Easy, template, seed)?;
    let mut rng = seeded(seed, &format!("adaptability/{level}"));
    let fire_step = 5 + bounded(&mut rng, 16);
    let cube = scene.goals[0].target();
    let cube_pos = scene.object(cube).expect("cube exists").pose.position;
    let clear_of = |s: &SceneState, p: [f64; 2], min: f64| {
        s.objects.iter().all(|o| {
            let q = o.pose.position;
            ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt() >= min
        })
    };
    let free_spot = |rng: &mut _, s: &SceneState| loop {
        let p = [uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2)];
        if clear_of(s, p, 0.1) {
            break p;
        }
    };
    let kind = match level {
        Level::V1 => {
            let p = free_spot(&mut rng, &scene);
            EventKind::DisplaceObject {
                object: cube,
                position: [p[0], p[1], cube_pos[2]],
            }
        }
        Level::V2 => {
            let p = free_spot(&mut rng, &scene);
            let id = scene.objects.iter().map(|o| o.id).max().unwrap_or(0) + 1;
            let size = scene.object(cube).expect("cube exists").size;
            let height = match scene.goals[0] {
                Goal::Lifted { height, .. } => height,
                _ => 0.05,
            };
            let mut scene = scene;
            scene
                .objects
                .push(SceneObject::on_table(id, Shape::Cube, [40, 80, 220], size, p[0], p[1]));
            let e = Event {
                fire_step,
                kind: EventKind::SwapInstruction {
                    instruction: "Pick up the blue cube.".into(),
                    goals: vec![Goal::Lifted {
                        object: id,
                        height,
                    }],
                },
            };
            let scene = inject_event(&scene, e).expect("event is valid");
            return Ok((spec, scene));
        }
        Level::V3 => EventKind::SequentialInstruction {
            instruction: "Release the cube.".into(),
            goals: vec![Goal::Released { object: cube }],
        },
    };
    let scene = inject_event(&scene, Event { fire_step, kind }).expect("event is valid");
    Ok((spec, scene))
}

/// Fraction of `n` event-perturbed episodes (seeds `seed..seed+n`) solved
/// against the post-event goal.
pub fn run_adaptability(
    policy: &mut PolicyHandle,
    level: Level,
    n: u32,
    seed: u64,
    image_size: u32,
) -> Result<MetricRecord, StressError> {
    let mut rec = MetricRecord::empty(StressKind::Adaptability, level, policy);
    let opts = RunOptions {
        image_size,
        ..RunOptions::default()
    };
    let _guard = exclusive();
    let mut successes = 0;
    for k in 0..n as u64 {
        let (spec, scene) = adaptability_episode(level, seed + k)?;
        let (outcome, _) = run_episode(policy, &spec, scene, &opts, false);
        successes += outcome.success as u32;
    }
    rec.adaptability_rate = Some(if n == 0 { 0.0 } else { successes as f64 / n as f64 });
    rec.sample_count = n as u64;
    Ok(rec)
}

#[cfg(test)]
mod tests;
