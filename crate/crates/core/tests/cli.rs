use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_recunlearn"));
    c.env("RECUNLEARN_LOG", "error");
    for (k, _) in std::env::vars() {
        if k.starts_with("RECUNLEARN_") && k != "RECUNLEARN_LOG" {
            c.env_remove(k);
        }
    }
    c
}

#[test]
fn config_prints_schema_and_defaults() {
    let out = bin().arg("config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("recunlearn.config/v1"));
    assert!(text.contains("[model]"));
}

#[test]
fn env_seed_is_applied_and_flag_wins() {
    let out = bin().env("RECUNLEARN_SEED", "77").arg("config").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.trim() == "seed = 77"), "{text}");

    let out = bin().env("RECUNLEARN_SEED", "77").args(["config", "--seed", "5"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.trim() == "seed = 5"), "{text}");
}

#[test]
fn file_values_are_merged() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "schema = \"recunlearn.config/v1\"\n[model]\nembed_dim = 7\n").unwrap();
    let out = bin().args(["config", "--config"]).arg(&path).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("embed_dim = 7"));
    assert!(text.contains("reg_lambda = 2.0"));
}

#[test]
fn unknown_config_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "schema = \"recunlearn.config/v1\"\nbogus = 1\n").unwrap();
    let out = bin().args(["config", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["prepare", "--format", "movielens", "--data"])
        .arg(dir.path().join("nope.dat"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prepare_then_train_on_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ratings.csv");
    let mut text = String::from("user,item,rating\n");
    for u in 0..30 {
        for i in 0..12 {
            if (u + i) % 3 != 0 {
                text.push_str(&format!("{u},{i},{}\n", 1 + (u * i) % 5));
            }
        }
    }
    std::fs::write(&data, text).unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "schema = \"recunlearn.config/v1\"\n[model]\nepochs = 5\n").unwrap();
    let run = |cmd: &str| {
        bin()
            .args([cmd, "--format", "csv", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(dir.path().join("out"))
            .arg("--config")
            .arg(&cfg)
            .output()
            .unwrap()
    };
    let p = run("prepare");
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let t = run("train");
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let stats = std::fs::read_to_string(dir.path().join("out/data/stats.json")).unwrap();
    assert!(stats.contains("recunlearn.stats/v1"));
    assert!(dir.path().join("out/model/original.json").exists());
}
