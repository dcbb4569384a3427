//! Closed-loop capability evaluation over the task catalog.
//!
//! Each (template, seed) pair is one episode: generate the task, then loop
//! observe, act, step until success or `max_steps`. Episodes are
//! independent, so they can be spread over worker threads; results are
//! merged by job index and never depend on scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{Action, CameraId, Episode, Family, Observation, Step, Tier};
use crate::policy::{PolicyError, PolicyHandle};
use crate::sim::{observe, step, SceneState, DEFAULT_DT};
use crate::storage::{DatasetWriter, StorageError};
use crate::taskgen::{generate_variant, SuccessTracker, TaskError, TaskSpec, TemplateRef, Variant};

#[derive(Debug, Error)]
pub enum CapabilityError {
    #[error("episodes per task must be at least 1")]
    NoEpisodes,
    #[error("empty catalog selection")]
    EmptyCatalog,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Square image side for every camera; 0 sends blank views.
    pub image_size: u32,
    /// Cameras blanked in what the policy sees.
    pub camera_mask: Vec<CameraId>,
    pub workers: usize,
    /// Grade Perception with the entangled criterion.
    pub entangled: bool,
    /// Include elapsed seconds in report metadata (breaks byte equality).
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            image_size: 16,
            camera_mask: Vec::new(),
            workers: 1,
            entangled: false,
            timing: false,
        }
    }
}

/// Result of one closed-loop episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub template: TemplateRef,
    pub seed: u64,
    pub success: bool,
    /// Contact-only verdict on the same trajectory (Perception only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isolated_success: Option<bool>,
    pub steps: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn episode_id(spec: &TaskSpec) -> String {
    let mut id = format!("{}-{}-{}-{}", spec.family, spec.tier, spec.template_id, spec.seed);
    if spec.entangled {
        id.push_str("-entangled");
    }
    id
}

/// Runs one episode; policy failures end it early as a failure.
pub fn run_episode(
    policy: &mut PolicyHandle,
    spec: &TaskSpec,
    scene: SceneState,
    opts: &RunOptions,
    record: bool,
) -> (EpisodeOutcome, Option<Episode>) {
    let mut outcome = EpisodeOutcome {
        template: spec.template_ref(),
        seed: spec.seed,
        success: false,
        isolated_success: None,
        steps: 0,
        error: None,
    };
    let mut tracker = SuccessTracker::new(spec);
    let mut isolated = (spec.family == Family::Perception).then(|| SuccessTracker::with_entangled(spec, false));
    let mut s = scene;
    let mut steps = Vec::new();
    let mut done = tracker.update(&s);
    let mut iso_done = isolated.as_mut().map(|t| t.update(&s)).unwrap_or(false);

    if let Err(e) = policy.reset(&spec.instruction, &s.embodiment) {
        log::warn!("{} seed {}: reset failed: {e}", spec.template_ref(), spec.seed);
        outcome.error = Some(e.to_string());
        return (outcome, None);
    }
    for i in 0..spec.max_steps {
        if done && s.event_queue.is_empty() {
            break;
        }
        let full = observe(&s, opts.image_size, &[], DEFAULT_DT);
        let view = masked_view(&full, &opts.camera_mask);
        let action = match policy.act(view.as_ref().unwrap_or(&full), Some(&s)) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("{} seed {}: {e}", spec.template_ref(), spec.seed);
                outcome.error = Some(e.to_string());
                break;
            }
        };
        s = match step(&s, &action, DEFAULT_DT) {
            Ok(next) => next,
            Err(e) => {
                outcome.error = Some(e.to_string());
                break;
            }
        };
        done = tracker.update(&s);
        if let Some(t) = isolated.as_mut() {
            iso_done = t.update(&s);
        }
        outcome.steps = i + 1;
        if record {
            // The simulator saturates out-of-range commands; store what it applied.
            let applied = Action(action.values().iter().map(|v| v.clamp(-1.0, 1.0)).collect());
            steps.push(Step {
                index: i,
                observation: full,
                action: applied,
                success: done,
            });
        }
    }
    outcome.success = done && s.event_queue.is_empty() && outcome.error.is_none();
    if isolated.is_some() {
        outcome.isolated_success = Some(iso_done);
    }
    let episode = (record && !steps.is_empty()).then(|| {
        if let Some(last) = steps.last_mut() {
            last.success = outcome.success;
        }
        Episode {
            episode_id: episode_id(spec),
            instruction: spec.instruction.clone(),
            embodiment: s.embodiment.clone(),
            task_meta: spec.task_meta(),
            steps,
            final_success: outcome.success,
        }
    });
    (outcome, episode)
}

/// The policy's copy of `full` with masked cameras zeroed; recordings keep all.
fn masked_view(full: &Observation, mask: &[CameraId]) -> Option<Observation> {
    if mask.is_empty() {
        return None;
    }
    let mut v = full.clone();
    for cam in mask {
        if let Some(views) = v.views.get_mut(cam) {
            for img in [&mut views.rgb, &mut views.depth, &mut views.segmentation] {
                img.data.fill(0);
            }
        }
    }
    Some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub seed: u64,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateResult {
    pub family: Family,
    pub tier: Tier,
    pub template_id: u8,
    pub name: String,
    pub episodes_run: u32,
    pub successes: u32,
    pub success_rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<EpisodeFailure>,
}

impl TemplateResult {
    fn from_outcomes(t: TemplateRef, outcomes: &[EpisodeOutcome]) -> Self {
        let successes = outcomes.iter().filter(|o| o.success).count() as u32;
        let episodes_run = outcomes.len() as u32;
        TemplateResult {
            family: t.family,
            tier: t.tier,
            template_id: t.template_id,
            name: t.name().to_string(),
            episodes_run,
            successes,
            success_rate: successes as f64 / episodes_run as f64,
            errors: outcomes
                .iter()
                .filter_map(|o| o.error.as_ref().map(|c| EpisodeFailure { seed: o.seed, cause: c.clone() }))
                .collect(),
        }
    }

    pub fn template_ref(&self) -> TemplateRef {
        TemplateRef {
            family: self.family,
            tier: self.tier,
            template_id: self.template_id,
        }
    }
}

/// Unweighted mean over the templates of one (family, tier) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub family: Family,
    pub tier: Tier,
    pub templates: u32,
    pub mean_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub policy_id: String,
    pub seed: u64,
    pub episodes_per_task: u32,
    pub image_size: u32,
    #[serde(default)]
    pub entangled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityReport {
    pub meta: RunMeta,
    pub templates: Vec<TemplateResult>,
    pub cells: Vec<CellMean>,
}

impl CapabilityReport {
    pub fn cell(&self, family: Family, tier: Tier) -> Option<&CellMean> {
        self.cells.iter().find(|c| c.family == family && c.tier == tier)
    }

    pub fn template(&self, t: TemplateRef) -> Option<&TemplateResult> {
        self.templates.iter().find(|r| r.template_ref() == t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn cell_means(templates: &[TemplateResult]) -> Vec<CellMean> {
    let mut cells: Vec<CellMean> = Vec::new();
    for r in templates {
        match cells.iter_mut().find(|c| c.family == r.family && c.tier == r.tier) {
            Some(c) => {
                c.mean_rate += r.success_rate;
                c.templates += 1;
            }
            None => cells.push(CellMean {
                family: r.family,
                tier: r.tier,
                templates: 1,
                mean_rate: r.success_rate,
            }),
        }
    }
    for c in cells.iter_mut() {
        c.mean_rate /= c.templates as f64;
    }
    cells.sort_by_key(|c| (c.family, c.tier));
    cells
}

/// Makes a fresh policy for each worker.
pub type PolicyFactory<'a> = dyn Fn() -> Result<PolicyHandle, PolicyError> + Sync + 'a;

/// Runs `jobs` over worker threads, returning outcomes in job order.
///
/// With a writer, episodes are recorded and appended in job order.
fn run_jobs(
    factory: &PolicyFactory<'_>,
    jobs: &[(TemplateRef, u64)],
    opts: &RunOptions,
    variant: &Variant,
    mut writer: Option<&mut DatasetWriter>,
) -> Result<Vec<EpisodeOutcome>, CapabilityError> {
    let record = writer.is_some();
    let workers = opts.workers.clamp(1, jobs.len().max(1));
    // Recording bounds memory by finishing a batch before the next starts.
    let batch = if record { workers } else { jobs.len().max(1) };
    let mut outcomes = Vec::with_capacity(jobs.len());
    let mut policies: Vec<Option<PolicyHandle>> = (0..workers).map(|_| None).collect();
    // Stress probes must not overlap with episodes.
    let _shared = crate::stress::TIMING_LOCK.read().unwrap_or_else(|e| e.into_inner());
    for chunk in jobs.chunks(batch) {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<(EpisodeOutcome, Option<Episode>)>>> =
            chunk.iter().map(|_| Mutex::new(None)).collect();
        let failure: Mutex<Option<CapabilityError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for slot in policies.iter_mut() {
                let (next, slots, failure) = (&next, &slots, &failure);
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&(t, seed)) = chunk.get(i) else { break };
                    let (spec, scene) = match generate_variant(t.family, t.tier, t.template_id, seed, variant) {
                        Ok(x) => x,
                        Err(e) => {
                            *failure.lock().unwrap() = Some(e.into());
                            break;
                        }
                    };
                    if slot.is_none() {
                        match factory() {
                            Ok(p) => *slot = Some(p),
                            Err(e) => {
                                *failure.lock().unwrap() = Some(e.into());
                                break;
                            }
                        }
                    }
                    let policy = slot.as_mut().unwrap();
                    let result = run_episode(policy, &spec, scene, opts, record);
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        for slot in slots {
            let (outcome, episode) = slot.into_inner().unwrap().expect("every job ran");
            if let (Some(w), Some(ep)) = (writer.as_deref_mut(), episode) {
                w.append(&ep)?;
            }
            outcomes.push(outcome);
        }
    }
    Ok(outcomes)
}

fn jobs(catalog: &[TemplateRef], n: u32, seed: u64) -> Vec<(TemplateRef, u64)> {
    catalog
        .iter()
        .flat_map(|t| (0..n as u64).map(move |k| (*t, seed + k)))
        .collect()
}

/// Runs `n` episodes (seeds `seed..seed+n`) for every template in `catalog`.
pub fn run_capability_suite(
    factory: &PolicyFactory<'_>,
    catalog: &[TemplateRef],
    n: u32,
    seed: u64,
    opts: &RunOptions,
    writer: Option<&mut DatasetWriter>,
) -> Result<CapabilityReport, CapabilityError> {
    if n == 0 {
        return Err(CapabilityError::NoEpisodes);
    }
    if catalog.is_empty() {
        return Err(CapabilityError::EmptyCatalog);
    }
    let started = Instant::now();
    let policy_id = factory()?.policy_id;
    let variant = Variant {
        probe: None,
        entangled: opts.entangled,
    };
    let catalog: Vec<TemplateRef> = if opts.entangled {
        catalog.iter().copied().filter(|t| t.family == Family::Perception).collect()
    } else {
        catalog.to_vec()
    };
    let jobs = jobs(&catalog, n, seed);
    let outcomes = run_jobs(factory, &jobs, opts, &variant, writer)?;
    let templates: Vec<TemplateResult> = catalog
        .iter()
        .zip(outcomes.chunks(n as usize))
        .map(|(t, o)| TemplateResult::from_outcomes(*t, o))
        .collect();
    Ok(CapabilityReport {
        meta: RunMeta {
            policy_id,
            seed,
            episodes_per_task: n,
            image_size: opts.image_size,
            entangled: opts.entangled,
            wall_time: opts.timing.then(|| started.elapsed().as_secs_f64()),
        },
        cells: cell_means(&templates),
        templates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub episodes: u32,
    pub successes: u32,
    pub rate: f64,
}

impl Rate {
    fn of(flags: impl Iterator<Item = bool>) -> Self {
        let (mut episodes, mut successes) = (0, 0);
        for f in flags {
            episodes += 1;
            successes += f as u32;
        }
        Rate {
            episodes,
            successes,
            rate: if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub template_id: u8,
    pub name: String,
    pub isolated: Rate,
    pub entangled: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub meta: RunMeta,
    pub tier: Tier,
    pub rows: Vec<AblationRow>,
    /// Entangled runs where the entangled predicate held but contact never did.
    pub implication_violations: u32,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Perception templates of `tier` graded isolated and entangled on identical seeds.
pub fn run_isolation_ablation(
    factory: &PolicyFactory<'_>,
    tier: Tier,
    n: u32,
    seed: u64,
    opts: &RunOptions,
) -> Result<AblationReport, CapabilityError> {
    if n == 0 {
        return Err(CapabilityError::NoEpisodes);
    }
    let started = Instant::now();
    let policy_id = factory()?.policy_id;
    let catalog = crate::taskgen::list_tasks(Some(&[Family::Perception]), Some(&[tier]));
    let jobs = jobs(&catalog, n, seed);
    let iso = run_jobs(factory, &jobs, opts, &Variant::default(), None)?;
    let ent_variant = Variant {
        probe: None,
        entangled: true,
    };
    let ent = run_jobs(factory, &jobs, opts, &ent_variant, None)?;
    let violations = ent
        .iter()
        .filter(|o| o.success && o.isolated_success == Some(false))
        .count() as u32;
    let rows = catalog
        .iter()
        .zip(iso.chunks(n as usize).zip(ent.chunks(n as usize)))
        .map(|(t, (i, e))| AblationRow {
            template_id: t.template_id,
            name: t.name().to_string(),
            isolated: Rate::of(i.iter().map(|o| o.success)),
            entangled: Rate::of(e.iter().map(|o| o.success)),
        })
        .collect();
    Ok(AblationReport {
        meta: RunMeta {
            policy_id,
            seed,
            episodes_per_task: n,
            image_size: opts.image_size,
            entangled: true,
            wall_time: opts.timing.then(|| started.elapsed().as_secs_f64()),
        },
        tier,
        rows,
        implication_violations: violations,
    })
}

#[cfg(test)]
mod tests;
