use std::path::Path;
use std::process::{Command, Output};

fn uwsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uwsplat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn missing_scene_fails_without_writing_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "c.json",
        r#"{"scene": "absent", "output": "out", "iterations": 10}"#,
    );
    let out = uwsplat(&["train", "--config", path(&config)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("absent"), "{}", stderr(&out));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn synth_train_render_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let out = uwsplat(&[
        "synth",
        "--seed",
        "4",
        "--out",
        path(&scene),
        "--gaussians",
        "40",
        "--views",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(scene.join("manifest.json").exists());

    let config = write_config(
        dir.path(),
        "c.json",
        r#"{"scene": "scene", "output": "run", "iterations": 30, "sh_degree": 1, "log_interval": 10, "eval_interval": 0}"#,
    );
    let out = uwsplat(&["train", "--config", path(&config)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["iter"], 0);
    assert_eq!(lines.last().unwrap()["iterations"], 30);

    let ckpt = dir.path().join("run/final.ckpt");
    let mut renders = Vec::new();
    for (name, flag) in [("a.png", "--observed"), ("b.png", "--observed"), ("c.png", "--clean")] {
        let png = dir.path().join(name);
        let out = uwsplat(&[
            "render",
            "--checkpoint",
            path(&ckpt),
            "--camera",
            "1",
            "--out",
            path(&png),
            flag,
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        renders.push(std::fs::read(&png).unwrap());
    }
    assert_eq!(renders[0], renders[1]);
    assert_ne!(renders[0], renders[2]);

    let out = uwsplat(&[
        "render",
        "--checkpoint",
        path(&ckpt),
        "--camera",
        "9",
        "--out",
        path(&dir.path().join("x.png")),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("camera 9"), "{}", stderr(&out));

    let out = uwsplat(&["eval", "--checkpoint", path(&ckpt), "--scene", path(&scene)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["views"], serde_json::json!([0]));
    assert!(report["psnr"].as_f64().unwrap() > 10.0);
}

#[test]
fn gradcheck_reports_each_group() {
    let out = uwsplat(&["gradcheck", "--group", "opacity"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("PASS opacity"), "{stdout}");

    let out = uwsplat(&["gradcheck", "--group", "colour"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("colour"), "{}", stderr(&out));
}

#[test]
fn thread_override_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_uwsplat"))
        .args(["gradcheck", "--group", "medium"])
        .env("UWSPLAT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("UWSPLAT_THREADS"));

    let out = Command::new(env!("CARGO_BIN_EXE_uwsplat"))
        .args(["gradcheck", "--group", "medium"])
        .env("UWSPLAT_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn ablate_writes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    assert!(uwsplat(&[
        "synth",
        "--seed",
        "2",
        "--out",
        path(&scene),
        "--gaussians",
        "30",
        "--views",
        "3"
    ])
    .status
    .success());
    let config = write_config(
        dir.path(),
        "c.json",
        r#"{"scene": "scene", "output": "grid", "iterations": 20, "sh_degree": 0}"#,
    );
    let out = uwsplat(&["ablate", "--config", path(&config)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("grid/ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = table.iter().map(|r| r["variant"]["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["M1", "M2", "M3", "full"]);
}
