use proptest::prelude::*;

use super::*;
use crate::capability::{cell_means, RunMeta};
use crate::stress::{LatencyMs, Resources};
use crate::taskgen::list_tasks;

fn report(policy: &str, rate: impl Fn(TemplateRef) -> (u32, u32)) -> CapabilityReport {
    let templates: Vec<TemplateResult> = list_tasks(None, None)
        .into_iter()
        .map(|t| {
            let (successes, episodes_run) = rate(t);
            TemplateResult {
                family: t.family,
                tier: t.tier,
                template_id: t.template_id,
                name: t.name().to_string(),
                episodes_run,
                successes,
                success_rate: if episodes_run == 0 { 0.0 } else { successes as f64 / episodes_run as f64 },
                errors: vec![],
            }
        })
        .collect();
    CapabilityReport {
        meta: RunMeta {
            policy_id: policy.to_string(),
            seed: 0,
            episodes_per_task: 10,
            image_size: 0,
            entangled: false,
            wall_time: None,
        },
        cells: cell_means(&templates),
        templates,
    }
}

fn cell(r: &EvalReport, f: Family, t: Tier) -> &AggregateCell {
    r.cells.iter().find(|c| c.family == f && c.tier == t).unwrap()
}

#[test]
fn two_policy_mean_and_population_std() {
    let a = report("a", |_| (5, 10));
    let b = report("b", |_| (7, 10));
    let r = aggregate(&[a, b], &[]).unwrap();
    assert_eq!(r.cells.len(), 18);
    for c in &r.cells {
        assert!((c.mean.unwrap() - 0.6).abs() < 1e-12);
        assert!((c.std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(c.count, 2);
    }
}

#[test]
fn single_policy_has_zero_std() {
    let r = aggregate(&[report("a", |t| (t.template_id as u32, 4))], &[]).unwrap();
    assert!(r.cells.iter().all(|c| c.std == Some(0.0)));
    // Template rates 1/4, 2/4, 3/4 average to one half.
    assert!((cell(&r, Family::Control, Tier::Easy).mean.unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn six_policies_give_eighteen_cells() {
    let reports: Vec<_> = (0..6).map(|i| report(&format!("p{i}"), move |_| (i, 5))).collect();
    let r = aggregate(&reports, &[]).unwrap();
    assert_eq!(r.cells.len(), 18);
    assert!(r.cells.iter().all(|c| c.count == 6));
}

#[test]
fn missing_cells_are_flagged_not_zeroed() {
    let a = report("a", |_| (1, 1));
    let b = report("b", |t| if t.family == Family::Language { (0, 0) } else { (0, 1) });
    let r = aggregate(&[a, b], &[]).unwrap();
    let lang = cell(&r, Family::Language, Tier::Easy);
    assert_eq!((lang.mean, lang.count), (Some(1.0), 1));
    assert_eq!(lang.missing, vec!["b".to_string()]);
    let ctrl = cell(&r, Family::Control, Tier::Easy);
    assert_eq!((ctrl.mean, ctrl.count), (Some(0.5), 2));
    assert!(ctrl.missing.is_empty());
    let nobody = aggregate(&[report("c", |_| (0, 0))], &[]).unwrap();
    assert!(nobody.cells.iter().all(|c| c.mean.is_none() && c.count == 0));
}

#[test]
fn catalog_mismatch_and_empty() {
    let a = report("a", |_| (1, 1));
    let mut b = report("b", |_| (1, 1));
    b.templates.pop();
    assert!(matches!(aggregate(&[a, b], &[]), Err(ReportError::CatalogMismatch { policy }) if policy == "b"));
    assert!(matches!(aggregate(&[], &[]), Err(ReportError::Empty)));
}

#[test]
fn unknown_format() {
    assert!(matches!("xml".parse::<ExportFormat>(), Err(ReportError::UnknownFormat(_))));
    for f in ["json", "csv", "radar_json"] {
        assert_eq!(f.parse::<ExportFormat>().unwrap().to_string(), f);
    }
}

#[test]
fn csv_rows_cover_the_catalog() {
    let r = aggregate(&[report("a", |_| (1, 2)), report("b, quoted", |_| (2, 2))], &[]).unwrap();
    let bytes = export(&r, ExportFormat::Csv, None).unwrap();
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER.to_vec());
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 54);
    assert_eq!(&rows[54][0], "b, quoted");
    assert_eq!(&rows[0][6], "0.5");
}

#[test]
fn radar_axes_and_tier_mask() {
    let r = aggregate(
        &[report("a", |t| if t.tier == Tier::Hard { (0, 4) } else { (4, 4) })],
        &[],
    )
    .unwrap();
    let full: serde_json::Value = serde_json::from_slice(&export(&r, ExportFormat::RadarJson, None).unwrap()).unwrap();
    let axes: Vec<&str> = full["axes"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(axes, ["Perception", "Control", "Language", "Spatial", "Dynamic", "Robustness"]);
    let v = full["series"][0]["values"].as_array().unwrap();
    assert_eq!(v.len(), 6);
    assert!((v[0].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let masked: serde_json::Value =
        serde_json::from_slice(&export(&r, ExportFormat::RadarJson, Some(&[Tier::Easy, Tier::Medium])).unwrap())
            .unwrap();
    assert_eq!(masked["tiers"], serde_json::json!(["Easy", "Medium"]));
    assert!(masked["series"][0]["per_tier"].get("Hard").is_none());
    for x in masked["mean"]["values"].as_array().unwrap() {
        assert_eq!(x.as_f64(), Some(1.0));
    }
}

fn stress_record(policy: &str, kind: StressKind, v: f64) -> MetricRecord {
    MetricRecord {
        kind,
        level: Level::V1,
        policy_id: policy.into(),
        frequency_hz: (kind == StressKind::Frequency).then_some(v),
        latency_ms: (kind == StressKind::Latency).then_some(LatencyMs { mean: v, p95: v }),
        stability: (kind == StressKind::Stability).then_some(v),
        adaptability_rate: None,
        resources: (kind == StressKind::Resources).then_some(Resources::default()),
        sample_count: 1,
        error: None,
        note: None,
    }
}

#[test]
fn stress_aggregates_skip_failures() {
    let mut bad = stress_record("c", StressKind::Frequency, 1.0);
    bad.error = Some("bridge timed out".into());
    let recs = vec![
        stress_record("a", StressKind::Frequency, 10.0),
        stress_record("b", StressKind::Frequency, 20.0),
        bad,
        stress_record("a", StressKind::Stability, 0.9),
    ];
    let r = aggregate(&[report("a", |_| (1, 1))], &recs).unwrap();
    assert_eq!(r.stress_cells.len(), 2);
    let f = &r.stress_cells[0];
    assert_eq!((f.kind, f.mean, f.std, f.count), (StressKind::Frequency, Some(15.0), Some(5.0), 2));
    assert_eq!(f.failed, vec!["c".to_string()]);
}

#[test]
fn json_roundtrip_is_lossless() {
    let r = aggregate(
        &[report("a", |t| (t.template_id as u32, 3)), report("b", |_| (0, 0))],
        &[stress_record("a", StressKind::Latency, 1.0 / 3.0)],
    )
    .unwrap();
    let bytes = export(&r, ExportFormat::Json, None).unwrap();
    let back: EvalReport = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(back, r);
    assert_eq!(export(&back, ExportFormat::Json, None).unwrap(), bytes);
}

proptest! {
    #[test]
    fn aggregate_is_permutation_invariant(
        rates in prop::collection::vec(prop::collection::vec(0u32..=5, 54), 1..6),
        rotate in 0usize..6,
    ) {
        let reports: Vec<CapabilityReport> = rates
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let r = r.clone();
                let all = list_tasks(None, None);
                report(&format!("p{i}"), move |t| (r[all.iter().position(|x| *x == t).unwrap()], 5))
            })
            .collect();
        let mut shuffled = reports.clone();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = aggregate(&reports, &[]).unwrap();
        let b = aggregate(&shuffled, &[]).unwrap();
        prop_assert_eq!(export(&a, ExportFormat::Json, None).unwrap(), export(&b, ExportFormat::Json, None).unwrap());
        for c in &a.cells {
            prop_assert!(c.std.unwrap() >= 0.0);
        }
    }
}
