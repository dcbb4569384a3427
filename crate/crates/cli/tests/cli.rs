use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_nebula");

fn nebula(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("NEBULA_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = nebula(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, n: &str, extra: &[&str]) -> PathBuf {
    let d = dir.join("d");
    let mut args = vec!["gen", "--family", "Control", "--tier", "Easy", "--n", n, "--seed", "7", "--out", s(&d)];
    args.extend_from_slice(extra);
    ok(&args);
    d
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_writes_one_shard_of_thirty() {
    let t = tempfile::tempdir().unwrap();
    let d = gen(t.path(), "10", &[]);
    let m: Value = serde_json::from_slice(&fs::read(d.join("nebula.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["shards"].as_array().unwrap().len(), 1);
    assert_eq!(m["shards"][0]["episode_count"], 30);
    let v = json(&ok(&["verify", "--deep", s(&d)]));
    assert_eq!(v["ok"], true);
    assert_eq!(v["episodes"], 30);
}

#[test]
fn verify_detects_corruption() {
    let t = tempfile::tempdir().unwrap();
    let d = gen(t.path(), "2", &[]);
    let shard = d.join("nebula-00000.nebs");
    let mut bytes = fs::read(&shard).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&shard, bytes).unwrap();
    let out = nebula(&["verify", s(&d)]);
    assert_eq!(code(&out), 1);
    assert_eq!(json(&out)["ok"], false);
    assert_eq!(code(&nebula(&["verify", s(&shard)])), 1);
}

#[test]
fn query_matches_brute_force() {
    let t = tempfile::tempdir().unwrap();
    let d = gen(t.path(), "4", &[]);
    let m: Value = serde_json::from_slice(&fs::read(d.join("nebula.manifest.json")).unwrap()).unwrap();
    for q in [r#"{"final_success":1}"#, r#"{"template_id":[2]}"#, r#"{"instruction_contains":"BIN"}"#] {
        let got = json(&ok(&["query", "--query", q, s(&d)]));
        let expr: Value = serde_json::from_str(q).unwrap();
        let mut want = vec![];
        for (si, shard) in m["shards"].as_array().unwrap().iter().enumerate() {
            for (i, e) in shard["episodes"].as_array().unwrap().iter().enumerate() {
                let hit = match (expr.get("final_success"), expr.get("template_id"), expr.get("instruction_contains")) {
                    (Some(f), _, _) => e["final_success"].as_bool().unwrap() == (f == 1),
                    (_, Some(ids), _) => ids.as_array().unwrap().contains(&e["template_id"]),
                    (_, _, Some(n)) => e["instruction"]
                        .as_str()
                        .unwrap()
                        .to_lowercase()
                        .contains(&n.as_str().unwrap().to_lowercase()),
                    _ => true,
                };
                if hit {
                    want.push(serde_json::json!({"shard": si, "index": i}));
                }
            }
        }
        assert_eq!(got, Value::Array(want), "{q}");
    }
    assert_eq!(code(&nebula(&["query", "--query", "{\"colour\":1}", s(&d)])), 2);
    assert_eq!(code(&nebula(&["query", s(&t.path().join("missing"))])), 1);
}

#[test]
fn split_holds_out_robustness() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen", "--family", "Control,Robustness", "--tier", "Easy", "--n", "3", "--out", s(&d)]);
    let m: Value = serde_json::from_slice(&fs::read(d.join("nebula.manifest.json")).unwrap()).unwrap();
    let eps = m["shards"][0]["episodes"].as_array().unwrap().clone();
    let split = json(&ok(&["split", "--holdout-robustness", "--train-ratio", "0.5", s(&d)]));
    let family = |r: &Value| eps[r["index"].as_u64().unwrap() as usize]["family"].clone();
    assert!(split["train"].as_array().unwrap().iter().all(|r| family(r) == "Control"));
    let test_robust = split["test"].as_array().unwrap().iter().filter(|r| family(r) == "Robustness").count();
    assert_eq!(test_robust, 9);
    assert_eq!(code(&nebula(&["split", "--train-ratio", "1.5", s(&d)])), 2);
}

#[test]
fn stress_stability_of_constant_policy() {
    let r = json(&ok(&["run-stress", "--kind", "stability", "--level", "v1", "--policy", "jitter:0.0"]));
    assert_eq!(r["stability"], 1.0);
    let r = json(&ok(&["run-stress", "--kind", "resources", "--level", "v1", "--workers", "4"]));
    assert_eq!(r["resources"]["policy_artifact_bytes"], 0);
    assert!(r["resources"]["peak_process_mem_bytes"].as_u64().unwrap() > 0);
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["frobnicate"],
        vec!["run-stress", "--kind", "speed", "--level", "v1"],
        vec!["run-stress", "--kind", "latency", "--level", "v1", "--steps", "10", "--warmup", "10"],
        vec!["run-capability", "--policy", "teleop"],
        vec!["run-capability", "--family", "Cooking"],
        vec!["run-capability", "--record"],
        vec!["report", "--format", "xml", "x.json"],
        vec!["gen"],
    ] {
        assert_eq!(code(&nebula(&args)), 2, "{args:?}");
    }
    assert_eq!(code(&nebula(&["--help"])), 0);
    for sub in ["gen", "run-capability", "run-stress", "ablate-isolation", "query", "split", "verify", "report"] {
        let out = nebula(&[sub, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--config"), "{sub}");
    }
}

fn capability(dir: &Path, seed_args: &[&str], env_seed: Option<&str>, config: Option<&Path>) -> Value {
    let out = dir.join("out");
    let mut cmd = Command::new(BIN);
    cmd.args(["run-capability", "--family", "Control", "--tier", "Easy", "--template", "1", "--n", "1"]);
    cmd.args(["--image-size", "0", "--out", s(&out)]).args(seed_args);
    if let Some(c) = config {
        cmd.args(["--config", s(c)]);
    }
    cmd.env_remove("NEBULA_SEED");
    if let Some(e) = env_seed {
        cmd.env("NEBULA_SEED", e);
    }
    let o = cmd.output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&fs::read(out.join("capability.json")).unwrap()).unwrap()
}

#[test]
fn config_precedence() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 11, "n": 2, "policy": "frozen"}"#).unwrap();
    let seed = |v: &Value| v["meta"]["seed"].as_u64().unwrap();
    assert_eq!(seed(&capability(t.path(), &[], None, None)), 0);
    assert_eq!(seed(&capability(t.path(), &[], Some("5"), None)), 5);
    let r = capability(t.path(), &[], Some("5"), Some(&cfg));
    assert_eq!((seed(&r), r["meta"]["episodes_per_task"].as_u64()), (11, Some(1)));
    assert_eq!(r["meta"]["policy_id"], "frozen");
    assert_eq!(seed(&capability(t.path(), &["--seed", "3"], Some("5"), Some(&cfg))), 3);
    fs::write(&cfg, r#"{"colour": 1}"#).unwrap();
    assert_eq!(code(&nebula(&["run-capability", "--config", s(&cfg)])), 2);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let t = tempfile::tempdir().unwrap();
            let d = gen(t.path(), "3", &["--shard-size", "4"]);
            let c = t.path().join("c");
            ok(&["run-capability", "--family", "Control,Language", "--tier", "Easy", "--n", "2", "--workers", "3", "--record", "--out", s(&c)]);
            (files(&d), files(&c), files(&c.join("episodes")), t)
        })
        .collect();
    assert_eq!(runs[0].0, runs[1].0);
    assert_eq!(runs[0].1, runs[1].1);
    assert_eq!(runs[0].2, runs[1].2);
    assert!(runs[0].0.len() >= 3);
}

#[test]
fn report_from_capability_outputs() {
    let t = tempfile::tempdir().unwrap();
    let mut inputs = vec![];
    for p in ["expert", "random:0"] {
        let out = t.path().join(p.replace(':', "_"));
        ok(&["run-capability", "--family", "Control", "--tier", "Easy", "--n", "2", "--image-size", "0", "--policy", p, "--out", s(&out)]);
        inputs.push(out.join("capability.json"));
    }
    let args = |fmt: &'static str| {
        let mut a = vec!["report".to_string(), "--format".into(), fmt.into()];
        a.extend(inputs.iter().map(|p| s(p).to_string()));
        a
    };
    let run = |a: Vec<String>| ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let r = json(&run(args("json")));
    let cell = &r["cells"][0];
    assert_eq!((cell["mean"].as_f64(), cell["std"].as_f64()), (Some(0.5), Some(0.5)));
    let csv = String::from_utf8(run(args("csv")).stdout).unwrap();
    assert_eq!(csv.lines().next(), Some("policy_id,family,tier,template_id,episodes,successes,rate"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    let mut a = args("radar_json");
    a.extend(["--tier-mask".into(), "Easy,Medium".into()]);
    let radar = json(&run(a));
    assert_eq!(radar["axes"].as_array().unwrap().len(), 6);
}

fn bridge_selector(script: &str) -> String {
    format!("bridge:{script}")
}

#[test]
fn bridge_policy_runs_an_episode() {
    let t = tempfile::tempdir().unwrap();
    let sel = bridge_selector(&format!("'{BIN}' bridge-echo"));
    let out = t.path().join("o");
    ok(&["run-capability", "--family", "Control", "--tier", "Easy", "--template", "1", "--n", "1", "--policy", &sel, "--out", s(&out)]);
    let r: Value = serde_json::from_slice(&fs::read(out.join("capability.json")).unwrap()).unwrap();
    assert_eq!(r["templates"][0]["episodes_run"], 1);
    assert_eq!(r["templates"][0]["successes"], 0);
    assert!(r["templates"][0].get("errors").is_none());
}

#[test]
fn killed_bridge_fails_episodes_not_the_harness() {
    let t = tempfile::tempdir().unwrap();
    let script = format!("'{BIN}' bridge-echo & p=$!; sleep 0.3; kill -9 $p; wait");
    let sel = bridge_selector(&script);
    let out = t.path().join("o");
    let o = nebula(&[
        "run-capability", "--family", "Control", "--tier", "Hard", "--n", "30", "--policy", &sel, "--out", s(&out),
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&fs::read(out.join("capability.json")).unwrap()).unwrap();
    let errors: usize = r["templates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.get("errors").map_or(0, |e| e.as_array().unwrap().len()))
        .sum();
    assert!(errors > 0);
    let total: u64 = r["templates"].as_array().unwrap().iter().map(|t| t["episodes_run"].as_u64().unwrap()).sum();
    assert_eq!(total, 90);
    assert!(String::from_utf8_lossy(&o.stderr).contains("disconnected"));
}

#[test]
fn ablation_reports_the_gap() {
    let r = json(&ok(&["ablate-isolation", "--n", "2", "--image-size", "0"]));
    assert_eq!(r["implication_violations"], 0);
    for row in r["rows"].as_array().unwrap() {
        assert_eq!(row["isolated"]["rate"], 1.0);
        assert_eq!(row["entangled"]["rate"], 0.0);
    }
}
