use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const QUICK: &str = r#"version = 1
env = "mountain_car"
seed = 11

[fit]
thresholds = [1e-5, 1e-3]
ridges = [0.0]

[train]
population = 8
iterations = 2
horizon = 120
selection_episodes = 2

[eval]
episodes = 4
action_map_resolution = 5
"#;

fn sindy_rl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sindy-rl"))
        .args(args)
        .env("SINDY_RL_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn hashes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_on_five_rows_reports_too_few_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = sindy_rl(&[
        "--env",
        "mountain_car",
        "--out",
        s(out),
        "collect",
        "--n-transitions",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sindy_rl(&["--env", "mountain_car", "--out", s(out), "fit"]);
    assert_eq!(o.status.code(), Some(7));
    assert!(stderr(&o).contains("too few transitions"), "{}", stderr(&o));
}

#[test]
fn eval_with_mismatched_model_reports_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let mc = dir.path().join("mc");
    let ll = dir.path().join("ll");
    assert!(sindy_rl(&["--env", "mountain_car", "--out", s(&mc), "collect"])
        .status
        .success());
    assert!(
        sindy_rl(&["--env", "mountain_car", "--out", s(&mc), "fit", "--thresholds", "1e-4"])
            .status
            .success()
    );
    assert!(sindy_rl(&["--env", "lunar_lander", "--out", s(&ll), "collect"])
        .status
        .success());
    let model = mc.join("model.json");
    let data = ll.join("dataset.csv");
    let o = sindy_rl(&[
        "--env",
        "lunar_lander",
        "--out",
        s(&ll),
        "eval",
        "--model",
        s(&model),
        "--dataset",
        s(&data),
    ]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));
    let o = sindy_rl(&["--env", "lunar_lander", "--out", s(&ll), "train", "--model", s(&model)]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
}

#[test]
fn input_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = sindy_rl(&["--env", "mountain_car", "--out", s(out), "fit"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing input file"));

    let cfg = out.join("old.toml");
    std::fs::write(&cfg, "version = 7\nenv = \"mountain_car\"\n").unwrap();
    let o = sindy_rl(&["--config", s(&cfg), "--out", s(out), "collect"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));

    assert!(sindy_rl(&["--env", "mountain_car", "--out", s(out), "collect"])
        .status
        .success());
    let csv = out.join("dataset.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    std::fs::write(&csv, text.replacen("s0,s1,", "x0,x1,", 1)).unwrap();
    let o = sindy_rl(&["--env", "mountain_car", "--out", s(out), "fit"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let o = sindy_rl(&["--out", s(out), "collect"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_documents_flags() {
    let o = sindy_rl(&["--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--config",
        "--seed",
        "--out",
        "--env",
        "SINDY_RL_LOG",
        "pipeline",
        "ablate",
        "compare",
    ] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    let o = sindy_rl(&["train", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--model", "--real", "--iterations", "--population", "--horizon"] {
        assert!(text.contains(flag), "{flag} missing from train help");
    }
}

#[test]
fn pipeline_equals_manual_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    std::fs::write(&cfg, QUICK).unwrap();
    let auto = dir.path().join("auto");
    let manual = dir.path().join("manual");

    let o = sindy_rl(&["--config", s(&cfg), "--out", s(&auto), "pipeline"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let stages: [&[&str]; 8] = [
        &["collect"],
        &["fit"],
        &["train"],
        &["eval"],
        &["ablate"],
        &["train", "--real"],
        &["eval", "--baseline"],
        &["compare"],
    ];
    let mut before = BTreeMap::new();
    for stage in stages {
        let mut args = vec!["--config", s(&cfg), "--out", s(&manual)];
        args.extend_from_slice(stage);
        let o = sindy_rl(&args);
        assert!(o.status.success(), "{stage:?}: {}", stderr(&o));
        let after = hashes(&manual);
        for (name, bytes) in &before {
            assert_eq!(after.get(name), Some(bytes), "{stage:?} rewrote {name}");
        }
        before = after;
    }

    let auto_files = hashes(&auto);
    for (name, bytes) in &before {
        assert_eq!(auto_files.get(name), Some(bytes), "{name} differs");
    }
    for name in auto_files.keys() {
        if name != "manifest.json" && name != "config.toml" {
            assert!(before.contains_key(name), "{name} only produced by pipeline");
        }
    }

    let again = dir.path().join("again");
    assert!(sindy_rl(&["--config", s(&cfg), "--out", s(&again), "pipeline"])
        .status
        .success());
    assert_eq!(
        std::fs::read(auto.join("manifest.json")).unwrap(),
        std::fs::read(again.join("manifest.json")).unwrap()
    );
}

#[test]
fn seed_flag_changes_derived_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    std::fs::write(&cfg, QUICK).unwrap();
    let o = sindy_rl(&["--config", s(&cfg), "--seed", "40", "show-config"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("seed = 40"), "{text}");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(
        sindy_rl(&["--config", s(&cfg), "--seed", "1", "--out", s(&a), "collect"])
            .status
            .success()
    );
    assert!(
        sindy_rl(&["--config", s(&cfg), "--seed", "2", "--out", s(&b), "collect"])
            .status
            .success()
    );
    assert_ne!(
        std::fs::read(a.join("dataset.csv")).unwrap(),
        std::fs::read(b.join("dataset.csv")).unwrap()
    );
}
