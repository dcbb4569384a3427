use std::time::Duration;

use super::*;
use crate::episode::{Family, Tier};
use crate::sim::{observe, step, DEFAULT_DT};
use crate::taskgen::{generate_task, SuccessTracker, TaskSpec};

fn blank_obs(s: &SceneState) -> Observation {
    observe(s, 0, &[], DEFAULT_DT)
}

pub(crate) fn rollout(spec: &TaskSpec, scene: SceneState, policy: &mut PolicyHandle) -> bool {
    policy.reset(&spec.instruction, &scene.embodiment).unwrap();
    let mut tracker = SuccessTracker::new(spec);
    let mut s = scene;
    tracker.update(&s);
    for _ in 0..spec.max_steps {
        let a = policy.act(&blank_obs(&s), Some(&s)).unwrap();
        s = step(&s, &a, DEFAULT_DT).unwrap();
        if tracker.update(&s) && s.event_queue.is_empty() {
            return true;
        }
    }
    false
}

fn handle(selector: &str) -> PolicyHandle {
    from_selector(selector, &EmbodimentConfig::desk_arm()).unwrap()
}

#[test]
fn act_requires_reset() {
    let (_, s) = generate_task(Family::Control, Tier::Easy, 1, 0).unwrap();
    let mut p = handle("random:1");
    assert!(matches!(p.act(&blank_obs(&s), Some(&s)), Err(PolicyError::ProtocolViolation(_))));
    p.reset("go", &s.embodiment).unwrap();
    assert_eq!(p.act(&blank_obs(&s), Some(&s)).unwrap().len(), 8);
}

#[test]
fn reset_checks_embodiment() {
    let mut p = handle("expert");
    let mut other = EmbodimentConfig::desk_arm();
    other.dof = 6;
    other.joint_limits.pop();
    assert_eq!(
        p.reset("go", &other),
        Err(PolicyError::EmbodimentMismatch { expected: 7, got: 6 })
    );
}

#[test]
fn expert_needs_privileged_state() {
    let (_, s) = generate_task(Family::Control, Tier::Easy, 1, 0).unwrap();
    let mut p = handle("expert");
    p.reset("go", &s.embodiment).unwrap();
    assert!(matches!(p.act(&blank_obs(&s), None), Err(PolicyError::ProtocolViolation(_))));
}

#[test]
fn random_policy_is_reproducible() {
    let (_, s) = generate_task(Family::Control, Tier::Easy, 1, 0).unwrap();
    let run = || {
        let mut p = handle("random:42");
        p.reset("go", &s.embodiment).unwrap();
        (0..20).map(|_| p.act(&blank_obs(&s), None).unwrap()).collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().flat_map(|x| x.values().to_vec()).all(|v| (-1.0..=1.0).contains(&v)));
    let mut other = handle("random:43");
    other.reset("go", &s.embodiment).unwrap();
    assert_ne!(other.act(&blank_obs(&s), None).unwrap(), a[0]);
}

#[test]
fn delayed_policy_service_time() {
    let (_, s) = generate_task(Family::Control, Tier::Easy, 1, 0).unwrap();
    let mut p = handle("delayed:50");
    p.reset("go", &s.embodiment).unwrap();
    let a = p.act(&blank_obs(&s), None).unwrap();
    let b = p.act(&blank_obs(&s), None).unwrap();
    assert_eq!(a, b);
    for t in p.timings() {
        assert!(Duration::from_nanos(t.service_ns()) >= Duration::from_millis(50));
    }
}

#[test]
fn zero_jitter_is_constant() {
    let (_, s) = generate_task(Family::Control, Tier::Easy, 1, 0).unwrap();
    let mut p = handle("jitter:0");
    p.reset("go", &s.embodiment).unwrap();
    for _ in 0..10 {
        assert!(p.act(&blank_obs(&s), None).unwrap().values().iter().all(|v| *v == 0.0));
    }
    let mut p = handle("jitter:0.3");
    p.reset("go", &s.embodiment).unwrap();
    let a = p.act(&blank_obs(&s), None).unwrap();
    assert!(a.values().iter().all(|v| v.abs() <= 0.3));
    assert!(a.values().iter().any(|v| *v != 0.0));
}

#[test]
fn selectors() {
    for ok in ["expert", "frozen", "reach-only", "random:3", "delayed:10", "jitter:0.1"] {
        assert_eq!(handle(ok).policy_id, ok);
    }
    for bad in ["", "expert:1", "random", "random:x", "delayed:-1", "jitter:nan", "bridge:", "teleop"] {
        assert!(from_selector(bad, &EmbodimentConfig::desk_arm()).is_err(), "{bad}");
    }
    assert_eq!(handle("expert").mode(), Mode::InProcessScripted);
}

fn expert_solves(family: Family, tier: Tier, seeds: std::ops::Range<u64>) {
    let mut p = handle("expert");
    for id in 1..=3 {
        for seed in seeds.clone() {
            let (spec, s) = generate_task(family, tier, id, seed).unwrap();
            assert!(rollout(&spec, s, &mut p), "{} seed {seed}", spec.template_ref());
        }
    }
}

#[test]
fn expert_solves_control_easy_and_medium() {
    expert_solves(Family::Control, Tier::Easy, 0..10);
    expert_solves(Family::Control, Tier::Medium, 0..10);
}

#[test]
fn expert_solves_spatial_easy_and_medium() {
    expert_solves(Family::SpatialReasoning, Tier::Easy, 0..10);
    expert_solves(Family::SpatialReasoning, Tier::Medium, 0..10);
}

#[test]
fn reach_only_touches_but_never_grasps() {
    let mut p = handle("reach-only");
    for seed in 0..5 {
        let (spec, s) = generate_task(Family::Perception, Tier::Easy, 1, seed).unwrap();
        assert!(rollout(&spec, s, &mut p));
        let v = crate::taskgen::Variant { probe: None, entangled: true };
        let (spec, s) = crate::taskgen::generate_variant(Family::Perception, Tier::Easy, 1, seed, &v).unwrap();
        assert!(!rollout(&spec, s, &mut p));
    }
}

#[test]
fn expert_solves_every_template() {
    let mut p = handle("expert");
    for t in crate::taskgen::list_tasks(None, None) {
        let fails: Vec<u64> = (0..10)
            .filter(|&seed| {
                let (spec, s) = generate_task(t.family, t.tier, t.template_id, seed).unwrap();
                !rollout(&spec, s, &mut p)
            })
            .collect();
        assert!(fails.is_empty(), "{t} fails on seeds {fails:?}");
    }
}
