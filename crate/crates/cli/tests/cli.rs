use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 2
attacks = ["direct", "label_only"]
[dataset]
train_per_class = 60
test_per_class = 20
aux_per_class = 100
[attack]
budget = 400
[models.protectee_train]
epochs = 5
[models.mapper_train]
epochs = 5
"#;

fn queen(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_queen"))
        .args(args)
        .current_dir(dir)
        .env_remove("QUEEN_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = queen(args, dir);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn plan_prints_the_reference_bound() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["plan", "--t", "0.2"], dir.path());
    assert!(text.contains("737.776"), "{text}");
    assert!(text.contains("0.01646"), "{text}");
}

#[test]
fn gen_data_writes_three_splits() {
    let dir = workdir();
    ok(&["gen-data", "-c", "small.toml", "-o", "data"], dir.path());
    for s in ["train", "test", "aux"] {
        assert!(dir.path().join(format!("data/{s}.bin")).exists());
    }
}

#[test]
fn serve_resumes_from_saved_state() {
    let dir = workdir();
    let p = dir.path();
    ok(&["train", "-c", "small.toml", "-o", "model"], p);
    let queries: String = (0..6)
        .map(|i| {
            let row: Vec<String> = (0..16)
                .map(|j| format!("{}", ((i * 16 + j) % 7) as f64 * 0.3 - 0.9))
                .collect();
            row.join(",") + "\n"
        })
        .collect();
    let (head, tail): (Vec<&str>, Vec<&str>) = {
        let lines: Vec<&str> = queries.lines().collect();
        (lines[..3].to_vec(), lines[3..].to_vec())
    };
    std::fs::write(p.join("all.txt"), &queries).unwrap();
    std::fs::write(p.join("head.txt"), head.join("\n")).unwrap();
    std::fs::write(p.join("tail.txt"), tail.join("\n")).unwrap();

    let straight = ok(
        &["serve", "--state", "model/state.bin", "--input", "all.txt"],
        p,
    );
    ok(
        &[
            "serve",
            "--state",
            "model/state.bin",
            "--input",
            "head.txt",
            "--save",
            "mid.bin",
        ],
        p,
    );
    let resumed = ok(&["serve", "--state", "mid.bin", "--input", "tail.txt"], p);
    let lines: Vec<&str> = straight.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[3..].join("\n"), resumed.trim_end());
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let sum: f64 = v["probs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p.as_f64().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    assert!(ok(&["analyze", "--state", "mid.bin"], p).contains("served 3"));
}

#[test]
fn serve_rejects_wrong_dimension() {
    let dir = workdir();
    let p = dir.path();
    ok(&["train", "-c", "small.toml", "-o", "model"], p);
    std::fs::write(p.join("bad.txt"), "1,2,3\n").unwrap();
    let out = queen(
        &["serve", "--state", "model/state.bin", "--input", "bad.txt"],
        p,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 16 values"));
}

#[test]
fn evaluate_writes_reports() {
    let dir = workdir();
    let p = dir.path();
    ok(&["evaluate", "-c", "small.toml", "-o", "out"], p);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 2);
    assert_eq!(json["attacks"].as_array().unwrap().len(), 2);
    assert!(p.join("out/report.txt").exists());
}

#[test]
fn environment_seed_wins() {
    let dir = workdir();
    let out = Command::new(env!("CARGO_BIN_EXE_queen"))
        .args(["train", "-c", "small.toml", "--seed", "4", "-o", "m"])
        .current_dir(dir.path())
        .env("QUEEN_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = std::fs::read_to_string(dir.path().join("m/config.toml")).unwrap();
    assert!(cfg.starts_with("seed = 9\n"), "{cfg}");
}

#[test]
fn attack_exports_a_query_log() {
    let dir = workdir();
    let p = dir.path();
    let text = ok(
        &[
            "attack",
            "-c",
            "small.toml",
            "--kind",
            "smoothing",
            "-o",
            "log",
        ],
        p,
    );
    assert!(text.contains("400 queries"), "{text}");
    let manifest = std::fs::read_to_string(p.join("log/manifest.txt")).unwrap();
    assert!(manifest.contains("rows=400"), "{manifest}");
}

#[test]
fn unknown_attack_kind_is_rejected() {
    let dir = workdir();
    let out = queen(
        &["attack", "-c", "small.toml", "--kind", "bogus", "-o", "x"],
        dir.path(),
    );
    assert!(!out.status.success());
}
