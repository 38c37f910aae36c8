mod common;

use std::path::Path;

use uwsplat::checkpoint::Checkpoint;
use uwsplat::config::TrainConfig;
use uwsplat::scene::save_scene;
use uwsplat::synth::{synth_scene, SynthConfig};
use uwsplat::train::{train_command, LogLine, FINAL_CHECKPOINT, LOG_FILE};

fn write_scene(dir: &Path) {
    let scene = synth_scene(&SynthConfig::new(1, 50, 4, common::synth_medium())).unwrap();
    save_scene(&scene, &dir.join("scene")).unwrap();
}

fn config(dir: &Path, iterations: usize) -> TrainConfig {
    let mut c = TrainConfig {
        scene: dir.join("scene"),
        output: dir.join("run"),
        iterations,
        seed: 5,
        sh_degree: 1,
        log_interval: 1,
        eval_interval: 10,
        ..TrainConfig::default()
    };
    c.sync();
    c
}

fn read_log(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn smoke_run_reduces_training_error_and_switches_stage_at_120() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path());
    let config = config(dir.path(), 200);
    let mut lines: Vec<LogLine> = Vec::new();
    let summary = train_command(&config, |l| lines.push(l.clone())).unwrap();
    assert_eq!(summary.iterations, 200);

    let log = read_log(&config.output.join(LOG_FILE));
    assert_eq!(log.len(), lines.len());
    for key in ["iter", "stage", "frame_kind", "loss", "psnr", "ssim"] {
        assert!(log[0].get(key).is_some(), "missing key {key}");
    }
    let l2_at = |iter: u64| {
        log.iter()
            .find(|l| l["iter"] == iter && !l["train_l2"].is_null())
            .and_then(|l| l["train_l2"].as_f64())
            .unwrap()
    };
    let (early, last) = (l2_at(10), l2_at(200));
    assert!(last < early, "train l2 {last} not below iteration-10 value {early}");

    let first_stage2 = log.iter().find(|l| l["stage"] == 2).unwrap();
    assert_eq!(first_stage2["iter"], 120);
    assert!(log
        .iter()
        .filter(|l| l["iter"].as_u64().unwrap() < 120)
        .all(|l| l["stage"] == 1));

    for file in [
        FINAL_CHECKPOINT,
        "metrics.json",
        "previews/final_clean.png",
        "previews/final_observed.png",
    ] {
        assert!(config.output.join(file).exists(), "{file} missing");
    }
}

#[test]
fn missing_scene_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = config(dir.path(), 20);
    let err = train_command(&config, |_| {}).unwrap_err();
    assert!(err.to_string().contains("scene"), "{err}");
    assert!(!config.output.exists());
}

#[test]
fn resume_at_500_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path());
    let mut full = config(dir.path(), 1000);
    full.log_interval = 100;
    full.eval_interval = 0;
    full.densify.start_iteration = 100;
    full.densify.interval = 100;
    full.checkpoint_iterations = vec![500];
    train_command(&full, |_| {}).unwrap();

    let mut resumed = full.clone();
    resumed.output = dir.path().join("resumed");
    resumed.checkpoint_iterations.clear();
    resumed.resume = Some(full.output.join("iter_000500.ckpt"));
    train_command(&resumed, |_| {}).unwrap();

    let a = Checkpoint::load(&full.output.join(FINAL_CHECKPOINT)).unwrap();
    let b = Checkpoint::load(&resumed.output.join(FINAL_CHECKPOINT)).unwrap();
    assert!(a.cloud.len() > 50, "densification never ran");
    assert_eq!(a.iteration, 1000);
    assert_eq!(a.cloud, b.cloud);
    assert_eq!(a.medium, b.medium);
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.grad_stats, b.grad_stats);
    assert_eq!(a.log_gamma.to_bits(), b.log_gamma.to_bits());
}

#[test]
fn resume_refuses_a_different_projector_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path());
    let mut c = config(dir.path(), 20);
    c.checkpoint_iterations = vec![10];
    train_command(&c, |_| {}).unwrap();
    let mut r = c.clone();
    r.output = dir.path().join("r");
    r.projector_seed = 8;
    r.resume = Some(c.output.join("iter_000010.ckpt"));
    let err = train_command(&r, |_| {}).unwrap_err().to_string();
    assert!(err.contains("projector seed"), "{err}");
}
