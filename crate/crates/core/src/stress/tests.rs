use std::time::Duration;

use nalgebra::DVector;
use proptest::prelude::*;

use super::*;
use crate::episode::EmbodimentConfig;
use crate::policy::{from_selector, DelayedConstantPolicy};

fn handle(sel: &str) -> PolicyHandle {
    from_selector(sel, &EmbodimentConfig::desk_arm()).unwrap()
}

/// Direct evaluation with nalgebra vectors, indexing a_1..a_{T-1}.
fn oracle(actions: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for t in 1..actions.len() {
        let d = DVector::from_column_slice(&actions[t]) - DVector::from_column_slice(&actions[t - 1]);
        sum += d.norm();
    }
    (-sum / (actions.len() as f64 - 1.0)).exp()
}

fn to_actions(v: &[Vec<f64>]) -> Vec<Action> {
    v.iter().map(|a| Action(a.clone())).collect()
}

#[test]
fn stability_closed_forms() {
    let constant = vec![Action(vec![0.3, -0.2, 0.9]); 50];
    assert_eq!(stability_score(&constant).unwrap(), 1.0);
    let pair = [Action(vec![0.0, 0.0]), Action(vec![0.6, 0.8])];
    assert!((stability_score(&pair).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
}

#[test]
fn stability_errors() {
    assert!(matches!(stability_score(&[]), Err(StressError::TooShort(0))));
    assert!(matches!(stability_score(&[Action(vec![1.0])]), Err(StressError::TooShort(1))));
    let bad = [Action(vec![0.0; 3]), Action(vec![0.0; 3]), Action(vec![0.0; 2])];
    assert!(matches!(
        stability_score(&bad),
        Err(StressError::DimensionMismatch { index: 2, expected: 3, got: 2 })
    ));
}

fn sequence() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..9).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 2..60))
}

proptest! {
    #[test]
    fn stability_matches_oracle(seq in sequence()) {
        let s = stability_score(&to_actions(&seq)).unwrap();
        prop_assert!((s - oracle(&seq)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn stability_ignores_reversal_and_offset(seq in sequence(), c in -3.0f64..3.0) {
        let s = stability_score(&to_actions(&seq)).unwrap();
        let mut rev = seq.clone();
        rev.reverse();
        prop_assert!((stability_score(&to_actions(&rev)).unwrap() - s).abs() < 1e-12);
        let shifted: Vec<Vec<f64>> = seq.iter().map(|a| a.iter().map(|v| v + c).collect()).collect();
        prop_assert!((stability_score(&to_actions(&shifted)).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn larger_difference_lowers_stability(seq in sequence(), k in 0usize..60, bump in 0.01f64..2.0) {
        // Moving a_k away from a_{k-1} along their difference grows only that
        // one norm when a_k is the last action.
        let n = seq.len();
        let k = 1 + k % (n - 1);
        let mut longer = seq[..=k].to_vec();
        let before = stability_score(&to_actions(&longer)).unwrap();
        let d = longer[k][0] - longer[k - 1][0];
        longer[k][0] += if d >= 0.0 { bump } else { -bump };
        prop_assert!(stability_score(&to_actions(&longer)).unwrap() < before);
    }
}

#[test]
fn percentile_nearest_rank() {
    let v: Vec<f64> = (1..=20).map(f64::from).collect();
    assert_eq!(percentile(&v, 95.0), Some(19.0));
    assert_eq!(percentile(&v, 100.0), Some(20.0));
    assert_eq!(percentile(&[3.0], 95.0), Some(3.0));
    assert_eq!(percentile(&[], 95.0), None);
}

#[test]
fn parse_kinds_and_levels() {
    assert_eq!("stability".parse::<StressKind>().unwrap(), StressKind::Stability);
    assert_eq!("V2".parse::<Level>().unwrap(), Level::V2);
    assert!("speed".parse::<StressKind>().is_err());
    assert!("v4".parse::<Level>().is_err());
    assert_eq!(serde_json::to_string(&Level::V3).unwrap(), "\"v3\"");
}

#[test]
fn warmup_must_be_below_steps() {
    let mut p = StressProfile::new(StressKind::Latency, Level::V1);
    p.warmup = p.steps;
    assert!(matches!(run_probe(&mut handle("expert"), &p), Err(StressError::BadProfile { .. })));
    let p = StressProfile::new(StressKind::Adaptability, Level::V1);
    assert!(matches!(run_probe(&mut handle("expert"), &p), Err(StressError::WrongKind(_))));
}

#[test]
fn zero_jitter_is_perfectly_stable() {
    for level in [Level::V1, Level::V2, Level::V3] {
        let p = StressProfile::new(StressKind::Stability, level).with_steps(50);
        let r = run_probe(&mut handle("jitter:0"), &p).unwrap();
        assert_eq!(r.stability, Some(1.0));
        assert_eq!(r.sample_count, 50);
    }
    let p = StressProfile::new(StressKind::Stability, Level::V1).with_steps(50);
    let noisy = run_probe(&mut handle("random:1"), &p).unwrap().stability.unwrap();
    assert!(noisy < 0.5, "{noisy}");
}

fn delayed(ms: u64) -> PolicyHandle {
    PolicyHandle::new(
        format!("delayed:{ms}"),
        EmbodimentConfig::desk_arm(),
        Box::new(DelayedConstantPolicy::new(Duration::from_millis(ms))),
    )
}

#[test]
fn delayed_policy_frequency_and_latency_agree() {
    let mut last_hz = f64::INFINITY;
    for ms in [5u64, 20, 80] {
        let f = StressProfile::new(StressKind::Frequency, Level::V2).with_steps(20);
        let hz = run_probe(&mut delayed(ms), &f).unwrap().frequency_hz.unwrap();
        let l = StressProfile::new(StressKind::Latency, Level::V2).with_steps(20);
        let lat = run_probe(&mut delayed(ms), &l).unwrap().latency_ms.unwrap();
        assert!((hz - 1000.0 / ms as f64).abs() <= 0.1 * 1000.0 / ms as f64, "{ms} ms: {hz} Hz");
        assert!(lat.mean >= ms as f64 && lat.mean <= ms as f64 * 1.15, "{ms} ms: {lat:?}");
        assert!(lat.p95 >= lat.mean * 0.99);
        assert!((hz - 1000.0 / lat.mean).abs() <= 0.1 * hz);
        assert!(hz <= last_hz);
        last_hz = hz;
    }
}

#[test]
fn scripted_policy_latency_is_small() {
    let p = StressProfile::new(StressKind::Latency, Level::V3).with_steps(100);
    let r = run_probe(&mut handle("expert"), &p).unwrap();
    assert!(r.latency_ms.unwrap().mean < 5.0);
    assert_eq!(r.sample_count, 90);
    assert!(r.note.is_none());
}

#[test]
fn probe_records_policy_failure() {
    let mut p = handle("expert");
    p.embodiment.dof = 6;
    let r = run_probe(&mut p, &StressProfile::new(StressKind::Frequency, Level::V1)).unwrap();
    assert!(r.failed());
    assert!(r.frequency_hz.is_none());
}

#[test]
fn adaptability_events_fire_mid_episode() {
    for level in [Level::V1, Level::V2, Level::V3] {
        for seed in 0..10 {
            let (_, s) = adaptability_episode(level, seed).unwrap();
            let e = &s.event_queue[0];
            assert!((5..=20).contains(&e.fire_step));
            if let EventKind::DisplaceObject { object, position } = &e.kind {
                let p = s.object(*object).unwrap().pose.position;
                assert!(((p[0] - position[0]).powi(2) + (p[1] - position[1]).powi(2)).sqrt() >= 0.1);
            }
        }
    }
    assert_eq!(adaptability_episode(Level::V1, 3).unwrap(), adaptability_episode(Level::V1, 3).unwrap());
}

#[test]
fn expert_adapts_and_frozen_does_not() {
    for level in [Level::V1, Level::V2, Level::V3] {
        let e = run_adaptability(&mut handle("expert"), level, 10, 0, 0).unwrap();
        assert_eq!(e.adaptability_rate, Some(1.0), "{level}");
        let f = run_adaptability(&mut handle("frozen"), level, 10, 0, 0).unwrap();
        assert_eq!(f.adaptability_rate, Some(0.0), "{level}");
        assert_eq!(f.sample_count, 10);
    }
}

#[test]
fn in_process_resources() {
    let p = StressProfile::new(StressKind::Resources, Level::V1);
    let a = run_probe(&mut handle("expert"), &p).unwrap().resources.unwrap();
    let b = run_probe(&mut handle("expert"), &p).unwrap().resources.unwrap();
    assert_eq!(a.policy_artifact_bytes, Some(0));
    assert_eq!(a.accelerator_mem_bytes, None);
    let (x, y) = (a.peak_process_mem_bytes.unwrap() as f64, b.peak_process_mem_bytes.unwrap() as f64);
    assert!(x > 0.0);
    assert!((x - y).abs() <= 0.2 * x.max(y));
}

#[test]
fn record_json_omits_other_kinds() {
    let p = StressProfile::new(StressKind::Stability, Level::V1).with_steps(10);
    let r = run_probe(&mut handle("jitter:0"), &p).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["stability"], 1.0);
    assert!(v.get("frequency_hz").is_none());
    assert_eq!(serde_json::from_value::<MetricRecord>(v).unwrap(), r);
}
