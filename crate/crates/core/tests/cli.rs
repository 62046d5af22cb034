use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_microphys");

fn shipped() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/herding_48.json")
}

fn microphys(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("MICROPHYS_SEED").output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Shipped config cut down to `reps` replications.
fn small_config(dir: &Path, reps: u32) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(shipped()).unwrap()).unwrap();
    v["replications"] = reps.into();
    let p = dir.join("small.json");
    fs::write(&p, v.to_string()).unwrap();
    p
}

#[test]
fn run_writes_artifacts_per_condition() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = microphys(&["run", "--config", arg(&shipped()), "--seed", "7", "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for cond in ["hidden", "organic", "seeded"] {
        let d = out.join(cond);
        for f in ["config.json", "summary.csv", "provenance.json", "replication_00000.jsonl", "replication_00999.jsonl"] {
            assert!(d.join(f).exists(), "{cond}/{f}");
        }
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("herding (macro): detected"), "{stdout}");
}

#[test]
fn seed_precedence_flag_env_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 5);
    let first_line = |dir: &Path| fs::read_to_string(dir.join("hidden/replication_00000.jsonl")).unwrap();
    let run = |out: &str, seed: Option<&str>, env: Option<&str>| {
        let out = tmp.path().join(out);
        let mut c = Command::new(BIN);
        c.args(["run", "--config", arg(&cfg), "--condition", "hidden", "--out", arg(&out)]);
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        c.env_remove("MICROPHYS_SEED");
        if let Some(e) = env {
            c.env("MICROPHYS_SEED", e);
        }
        assert!(c.output().unwrap().status.success());
        first_line(&out)
    };
    let file = run("file", None, None);
    let env = run("env", None, Some("99"));
    let flag = run("flag", Some("99"), Some("5"));
    let flag_only = run("flag_only", Some("99"), None);
    assert_ne!(file, env);
    assert_eq!(env, flag);
    assert_eq!(flag, flag_only);

    let mut c = Command::new(BIN);
    c.args(["run", "--config", arg(&cfg), "--out", arg(&tmp.path().join("bad"))]);
    c.env("MICROPHYS_SEED", "not-a-seed");
    assert_eq!(c.output().unwrap().status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(microphys(&["bogus"]).status.code(), Some(1));
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version":"1","slate_szie":48}"#).unwrap();
    let o = microphys(&["run", "--config", arg(&bad), "--out", arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("slate_szie: unknown field") && err.contains("slate_size: missing required field"), "{err}");
    let o = microphys(&["validate", "--run", arg(&tmp.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn attack_prints_lift_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 400);
    let csv = tmp.path().join("lift.csv");
    let o = microphys(&["attack", "--config", arg(&cfg), "--pin", "7:1", "--condition", "hidden", "--out", arg(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout, fs::read_to_string(&csv).unwrap());
    let mut lines = stdout.lines();
    assert_eq!(
        lines.next().unwrap(),
        "condition,target,decisions,base_rate,base_se,treated_rate,treated_se,lift,lift_se"
    );
    let row: Vec<f64> = lines.next().unwrap().split(',').skip(2).map(|x| x.parse().unwrap()).collect();
    assert_eq!(row[0], 4000.0);
    assert!(row[5] > 0.5, "lift {}", row[5]);
}

#[test]
fn validate_replay_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 50);
    let out = tmp.path().join("out");
    assert!(microphys(&["run", "--config", arg(&cfg), "--out", arg(&out)]).status.success());

    let o = microphys(&["replay", "--run", arg(&out.join("organic"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("matches: 50 replications, 500 events"));

    let reference = tmp.path().join("ref.csv");
    assert!(microphys(&["export", "--run", arg(&out.join("hidden")), "--out", arg(&reference)]).status.success());
    let o = microphys(&[
        "validate",
        "--run",
        arg(&out.join("hidden")),
        "--reference",
        arg(&reference),
        "--resamples",
        "200",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.contains("[PASS] descriptive"), "{report}");
    assert!(report.contains("[NOT EVALUATED] explanatory"), "{report}");
    assert!(report.contains("[PASS] observational"), "{report}");
    assert!(report.contains("distance 0.0000"), "{report}");

    // tampering with a recorded decision is caught by replay
    let path = out.join("organic/replication_00003.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let order = lines[4]["order"].clone();
    lines[4]["decision"] = serde_json::json!([order[2]]);
    let edited: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(&path, edited).unwrap();
    let o = microphys(&["replay", "--run", arg(&out.join("organic"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn sweep_and_sense() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 20);
    let out = tmp.path().join("sweep");
    let o = microphys(&[
        "sweep",
        "--config",
        arg(&cfg),
        "--condition",
        "hidden",
        "--grid",
        "policy.temperature=0.5,2.0",
        "--grid",
        "architecture.rounds=1,3",
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut cells: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    cells.sort();
    assert_eq!(cells.len(), 4, "{cells:?}");
    assert!(cells.contains(&"hidden[policy.temperature=0.5,architecture.rounds=3]".to_string()), "{cells:?}");

    let o = microphys(&["sense", "--config", arg(&cfg), "--condition", "seeded", "--dims", "visibility,memory"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1 + 2 * 2, "{stdout}");
    assert!(stdout.starts_with("condition,dimension,detector,"));
}

#[cfg(unix)]
#[test]
fn external_agent_run_replays_without_the_agent() {
    let tmp = tempfile::tempdir().unwrap();
    let script = tmp.path().join("agent.sh");
    // endorse whatever sits in the second slot
    fs::write(
        &script,
        "while read line; do\n  id=$(printf '%s' \"$line\" | sed 's/^{\"slate\":\\[{\"item_id\":[0-9]*,[^}]*},{\"item_id\":\\([0-9]*\\).*/\\1/')\n  echo \"{\\\"endorse\\\":[$id]}\"\ndone\n",
    )
    .unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(shipped()).unwrap()).unwrap();
    v["replications"] = 3.into();
    v["policy"] = serde_json::json!({"kind": "external", "command": ["sh", arg(&script)], "timeout_ms": 10000});
    let cfg = tmp.path().join("ext.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let out = tmp.path().join("out");
    let o = microphys(&["run", "--config", arg(&cfg), "--condition", "organic", "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let text = fs::read_to_string(out.join("organic/replication_00001.jsonl")).unwrap();
    for line in text.lines() {
        let e: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(e["decision"], serde_json::json!([e["order"][1]]), "{line}");
    }

    fs::remove_file(&script).unwrap();
    let o = microphys(&["replay", "--run", arg(&out.join("organic"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
