//! Policy contract and scripted reference policies.
//!
//! Every policy is driven through a [`PolicyHandle`], which enforces the
//! reset-before-act protocol, checks action sizes and records per-call
//! timestamps. The contract is synchronous: one observation in, one action
//! out.

mod expert;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{Action, EmbodimentConfig, Observation};
use crate::rng::{seeded, uniform, Rng};
use crate::sim::SceneState;

pub use expert::{FrozenPolicy, ReachOnlyPolicy, ScriptedExpert};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("embodiment mismatch: policy expects {expected} joints, scene has {got}")]
    EmbodimentMismatch { expected: u32, got: u32 },
    #[error("bridge disconnected: {0}")]
    BridgeDisconnected(String),
    #[error("bridge timed out after {0:?}")]
    BridgeTimeout(Duration),
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("bad policy selector: {0}")]
    BadSelector(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    InProcessScripted,
    ExternalBridge,
}

/// What a policy implementation sees on every call.
pub struct PolicyInput<'a> {
    pub observation: &'a Observation,
    /// Ground-truth state; only scripted policies read it.
    pub privileged: Option<&'a SceneState>,
}

/// Footprint a policy reports about itself; `None` means unknown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedResources {
    pub artifact_bytes: Option<u64>,
    pub accelerator_mem_bytes: Option<u64>,
}

pub trait Policy: Send {
    fn reset(&mut self, instruction: &str, embodiment: &EmbodimentConfig) -> Result<(), PolicyError>;
    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Action, PolicyError>;
    fn mode(&self) -> Mode {
        Mode::InProcessScripted
    }
    /// Separate OS process serving the policy, if any.
    fn process_id(&self) -> Option<u32> {
        None
    }
    /// In-process policies have no on-disk artifact.
    fn resources(&self) -> ReportedResources {
        ReportedResources {
            artifact_bytes: Some(0),
            accelerator_mem_bytes: None,
        }
    }
}

/// Nanosecond timestamps around one `act` call, relative to handle creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTiming {
    pub observe_delivered_ns: u64,
    pub action_returned_ns: u64,
}

impl CallTiming {
    pub fn service_ns(&self) -> u64 {
        self.action_returned_ns - self.observe_delivered_ns
    }
}

pub struct PolicyHandle {
    pub policy_id: String,
    pub embodiment: EmbodimentConfig,
    inner: Box<dyn Policy>,
    ready: bool,
    instruction: String,
    epoch: Instant,
    timings: Vec<CallTiming>,
}

impl PolicyHandle {
    pub fn new(policy_id: impl Into<String>, embodiment: EmbodimentConfig, inner: Box<dyn Policy>) -> Self {
        PolicyHandle {
            policy_id: policy_id.into(),
            embodiment,
            inner,
            ready: false,
            instruction: String::new(),
            epoch: Instant::now(),
            timings: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.inner.mode()
    }

    pub fn resources(&self) -> ReportedResources {
        self.inner.resources()
    }

    pub fn process_id(&self) -> Option<u32> {
        self.inner.process_id()
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    /// Clears policy state and latches the instruction.
    pub fn reset(&mut self, instruction: &str, embodiment: &EmbodimentConfig) -> Result<(), PolicyError> {
        self.ready = false;
        if embodiment.dof != self.embodiment.dof {
            return Err(PolicyError::EmbodimentMismatch {
                expected: self.embodiment.dof,
                got: embodiment.dof,
            });
        }
        self.inner.reset(instruction, embodiment)?;
        self.embodiment = embodiment.clone();
        self.instruction = instruction.to_string();
        self.ready = true;
        Ok(())
    }

    pub fn act(&mut self, observation: &Observation, privileged: Option<&SceneState>) -> Result<Action, PolicyError> {
        if !self.ready {
            return Err(PolicyError::ProtocolViolation("act before reset".into()));
        }
        let input = PolicyInput {
            observation,
            privileged,
        };
        let start = self.epoch.elapsed();
        let result = self.inner.act(&input);
        let end = self.epoch.elapsed();
        self.timings.push(CallTiming {
            observe_delivered_ns: start.as_nanos() as u64,
            action_returned_ns: end.as_nanos() as u64,
        });
        let action = result?;
        let want = self.embodiment.action_dim();
        if action.len() != want {
            return Err(PolicyError::MalformedAction(format!(
                "expected {want} values, got {}",
                action.len()
            )));
        }
        if action.values().iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::MalformedAction("non-finite value".into()));
        }
        Ok(action)
    }

    pub fn timings(&self) -> &[CallTiming] {
        &self.timings
    }

    pub fn clear_timings(&mut self) {
        self.timings.clear();
    }
}

/// I.i.d. uniform actions in [-1, 1]; reseeded on every reset.
pub struct RandomPolicy {
    seed: u64,
    rng: Rng,
    dim: usize,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            seed,
            rng: seeded(seed, "policy/random"),
            dim: 0,
        }
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self, _: &str, embodiment: &EmbodimentConfig) -> Result<(), PolicyError> {
        self.rng = seeded(self.seed, "policy/random");
        self.dim = embodiment.action_dim();
        Ok(())
    }

    fn act(&mut self, _: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        Ok(Action((0..self.dim).map(|_| uniform(&mut self.rng, -1.0, 1.0)).collect()))
    }
}

/// Sleeps for a fixed delay, then returns the zero action.
pub struct DelayedConstantPolicy {
    delay: Duration,
    dim: usize,
}

impl DelayedConstantPolicy {
    pub fn new(delay: Duration) -> Self {
        DelayedConstantPolicy { delay, dim: 0 }
    }
}

impl Policy for DelayedConstantPolicy {
    fn reset(&mut self, _: &str, embodiment: &EmbodimentConfig) -> Result<(), PolicyError> {
        self.dim = embodiment.action_dim();
        Ok(())
    }

    fn act(&mut self, _: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        // sleep may return early on some platforms; spin out the remainder.
        let deadline = Instant::now() + self.delay;
        std::thread::sleep(self.delay);
        while Instant::now() < deadline {
            std::hint::spin_loop();
        }
        Ok(Action::zeros(self.dim))
    }
}

/// Bounded i.i.d. noise of the given amplitude around zero.
pub struct JitterPolicy {
    amplitude: f64,
    rng: Rng,
    dim: usize,
}

impl JitterPolicy {
    pub fn new(amplitude: f64) -> Self {
        JitterPolicy {
            amplitude: amplitude.abs(),
            rng: seeded(0, "policy/jitter"),
            dim: 0,
        }
    }
}

impl Policy for JitterPolicy {
    fn reset(&mut self, _: &str, embodiment: &EmbodimentConfig) -> Result<(), PolicyError> {
        self.rng = seeded(0, "policy/jitter");
        self.dim = embodiment.action_dim();
        Ok(())
    }

    fn act(&mut self, _: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        let a = self.amplitude;
        let v = (0..self.dim)
            .map(|_| {
                let u = uniform(&mut self.rng, -1.0, 1.0);
                if a == 0.0 {
                    0.0
                } else {
                    u * a
                }
            })
            .collect();
        Ok(Action(v))
    }
}

/// Builds a policy from a selector string.
///
/// Accepted forms: `expert`, `frozen`, `reach-only`, `random:SEED`,
/// `delayed:MS`, `jitter:AMPLITUDE` and `bridge:COMMAND`.
pub fn from_selector(selector: &str, embodiment: &EmbodimentConfig) -> Result<PolicyHandle, PolicyError> {
    let (kind, arg) = match selector.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (selector, None),
    };
    let bad = || PolicyError::BadSelector(selector.to_string());
    let inner: Box<dyn Policy> = match (kind, arg) {
        ("expert", None) => Box::new(ScriptedExpert::new()),
        ("frozen", None) => Box::new(FrozenPolicy::new()),
        ("reach-only", None) => Box::new(ReachOnlyPolicy::new()),
        ("random", Some(a)) => Box::new(RandomPolicy::new(a.parse().map_err(|_| bad())?)),
        ("delayed", Some(a)) => Box::new(DelayedConstantPolicy::new(Duration::from_millis(
            a.parse().map_err(|_| bad())?,
        ))),
        ("jitter", Some(a)) => {
            let amp: f64 = a.parse().map_err(|_| bad())?;
            if !amp.is_finite() {
                return Err(bad());
            }
            Box::new(JitterPolicy::new(amp))
        }
        ("bridge", Some(cmd)) if !cmd.trim().is_empty() => {
            Box::new(crate::bridge::BridgePolicy::spawn(cmd, crate::bridge::DEFAULT_TIMEOUT)?)
        }
        _ => return Err(bad()),
    };
    Ok(PolicyHandle::new(selector, embodiment.clone(), inner))
}

#[cfg(test)]
mod tests;
