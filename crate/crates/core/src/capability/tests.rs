use super::*;
use crate::episode::{validate_episode, EmbodimentConfig};
use crate::policy::from_selector;
use crate::storage::{Dataset, EpisodeRef};
use crate::taskgen::{generate_task, list_tasks};

fn factory(sel: &'static str) -> impl Fn() -> Result<PolicyHandle, PolicyError> + Sync {
    move || from_selector(sel, &EmbodimentConfig::desk_arm())
}

fn control_easy() -> Vec<TemplateRef> {
    list_tasks(Some(&[Family::Control]), Some(&[Tier::Easy]))
}

fn blind() -> RunOptions {
    RunOptions {
        image_size: 0,
        ..RunOptions::default()
    }
}

#[test]
fn expert_control_easy_is_perfect() {
    let r = run_capability_suite(&factory("expert"), &control_easy(), 4, 0, &blind(), None).unwrap();
    assert_eq!(r.templates.len(), 3);
    for t in &r.templates {
        assert_eq!((t.episodes_run, t.successes), (4, 4), "{}", t.name);
    }
    assert_eq!(r.cell(Family::Control, Tier::Easy).unwrap().mean_rate, 1.0);
    assert!(r.meta.wall_time.is_none());
}

#[test]
fn random_policy_fails() {
    let r = run_capability_suite(&factory("random:0"), &control_easy(), 3, 0, &blind(), None).unwrap();
    assert!(r.templates.iter().all(|t| t.successes == 0));
}

#[test]
fn worker_count_does_not_change_the_report() {
    let catalog = list_tasks(Some(&[Family::Control, Family::Language]), Some(&[Tier::Easy]));
    let one = run_capability_suite(&factory("frozen"), &catalog, 2, 5, &blind(), None).unwrap();
    let opts = RunOptions { workers: 4, ..blind() };
    let four = run_capability_suite(&factory("frozen"), &catalog, 2, 5, &opts, None).unwrap();
    assert_eq!(one.to_json(), four.to_json());
}

#[test]
fn cell_mean_is_unweighted() {
    let mk = |id, s, n| TemplateResult {
        family: Family::Control,
        tier: Tier::Easy,
        template_id: id,
        name: String::new(),
        episodes_run: n,
        successes: s,
        success_rate: s as f64 / n as f64,
        errors: vec![],
    };
    let cells = cell_means(&[mk(1, 1, 1), mk(2, 0, 100), mk(3, 50, 100)]);
    assert_eq!(cells.len(), 1);
    assert!((cells[0].mean_rate - 0.5).abs() < 1e-12);
}

#[test]
fn bad_arguments() {
    assert!(matches!(
        run_capability_suite(&factory("expert"), &control_easy(), 0, 0, &blind(), None),
        Err(CapabilityError::NoEpisodes)
    ));
    assert!(matches!(
        run_capability_suite(&factory("expert"), &[], 1, 0, &blind(), None),
        Err(CapabilityError::EmptyCatalog)
    ));
    assert!(matches!(
        run_capability_suite(&factory("nope"), &control_easy(), 1, 0, &blind(), None),
        Err(CapabilityError::Policy(PolicyError::BadSelector(_)))
    ));
}

#[test]
fn policy_errors_count_as_failures() {
    // A policy built for a 6-joint arm fails every reset on the 7-joint scene.
    let mut emb = EmbodimentConfig::desk_arm();
    emb.dof = 6;
    emb.joint_limits.pop();
    let f = move || from_selector("expert", &emb);
    let r = run_capability_suite(&f, &control_easy(), 2, 0, &blind(), None).unwrap();
    for t in &r.templates {
        assert_eq!(t.successes, 0);
        assert_eq!(t.errors.len(), 2);
    }
}

#[test]
fn recorded_episodes_are_valid_and_masked_only_for_the_policy() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::new(dir.path(), "cap", 2).unwrap();
    let opts = RunOptions {
        image_size: 8,
        camera_mask: vec![CameraId::Top],
        workers: 2,
        ..RunOptions::default()
    };
    let catalog = vec![control_easy()[0]];
    let r = run_capability_suite(&factory("expert"), &catalog, 3, 0, &opts, Some(&mut w)).unwrap();
    assert_eq!(r.templates[0].successes, 3);
    let (m, path) = w.finish().unwrap();
    assert_eq!(m.episode_count(), 3);
    let ds = Dataset::open(&path).unwrap();
    for (i, seed) in (0..3u64).enumerate() {
        let ep = ds.read(EpisodeRef { shard: i / 2, index: (i % 2) as u64 }).unwrap();
        assert!(validate_episode(&ep).is_valid());
        assert_eq!(ep.task_meta.seed, seed);
        assert!(ep.final_success);
        let top = &ep.steps[0].observation.views[&CameraId::Top];
        assert!(top.rgb.data.iter().any(|b| *b != 0), "recording keeps masked cameras");
    }
}

#[test]
fn masked_view_blanks_only_selected_cameras() {
    let (_, s) = generate_task(Family::Control, Tier::Easy, 1, 0).unwrap();
    let full = observe(&s, 8, &[], DEFAULT_DT);
    let v = masked_view(&full, &[CameraId::Top]).unwrap();
    assert_eq!(v, observe(&s, 8, &[CameraId::Top], DEFAULT_DT));
    assert!(masked_view(&full, &[]).is_none());
}

#[test]
fn ablation_implication_holds() {
    let r = run_isolation_ablation(&factory("expert"), Tier::Easy, 3, 0, &blind()).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.implication_violations, 0);
    for row in &r.rows {
        assert_eq!(row.isolated.rate, 1.0);
        assert_eq!(row.entangled.rate, 1.0);
    }
    let r = run_isolation_ablation(&factory("reach-only"), Tier::Easy, 3, 0, &blind()).unwrap();
    assert_eq!(r.implication_violations, 0);
    for row in &r.rows {
        assert_eq!(row.isolated.rate, 1.0);
        assert_eq!(row.entangled.rate, 0.0);
    }
}

#[test]
fn entangled_run_grades_perception_only() {
    let opts = RunOptions { entangled: true, ..blind() };
    let r = run_capability_suite(&factory("expert"), &list_tasks(None, Some(&[Tier::Easy])), 1, 0, &opts, None)
        .unwrap();
    assert!(r.templates.iter().all(|t| t.family == Family::Perception));
}

#[test]
fn episode_ids_are_stable() {
    let (spec, _) = generate_task(Family::Control, Tier::Easy, 2, 7).unwrap();
    assert_eq!(episode_id(&spec), "Control-Easy-2-7");
}
