//! Checkpoint, config, and metrics persistence contracts exercised through
//! the library API on a small fast configuration.

use std::path::PathBuf;

use ndft_cli::checkpoint;
use ndft_cli::config::ExperimentConfig;
use ndft_cli::metrics_log::{self, MetricsWriter};
use ndft_core::train::{TrainMode, Trainer};

fn tiny() -> ExperimentConfig {
    let text = "\
[data]
image_size = 16
classes = 3
holdout = 2
scale_max = 5
scale_min = 3

[nuisance.altitude]
levels = low,high
effect = scale
jitter = 0.4

[nuisance.weather]
levels = day,night
effect = brightness
jitter = 0.03

[arch]
trunk_channels = 4,8
pooled_blocks = 2
task_channels = 8
nuisance_hidden = 8

[train]
mode = ndft
gammas = 0.02,0.02
batch_size = 8
iterations = 40
pretrain_task_iters = 10
pretrain_head_cap = 30
strengthen_cap = 10
restart_period = 18
restart_retrain_cap = 20
lr = 0.02
eval_interval = 20
eval_samples = 32
";
    ExperimentConfig::parse(text).unwrap()
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ndft-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn save_load_save_is_byte_identical() {
    let mut cfg = tiny();
    cfg.train.seed = 5;
    let mut trainer = Trainer::new(&cfg.arch, &cfg.data, &cfg.train).unwrap();
    trainer.run(|_| {}).unwrap();

    let dir = tmpdir("roundtrip");
    let p1 = dir.join("a.ckpt");
    let p2 = dir.join("b.ckpt");
    checkpoint::save(&trainer, &p1).unwrap();
    let loaded = checkpoint::load(&p1).unwrap();
    let resumed = checkpoint::resume(&cfg.arch, &cfg.data, &cfg.train, &loaded).unwrap();
    checkpoint::save(&resumed, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn flipped_version_byte_is_rejected_before_tensors() {
    let mut cfg = tiny();
    cfg.train.seed = 6;
    let mut trainer = Trainer::new(&cfg.arch, &cfg.data, &cfg.train).unwrap();
    trainer.pretrain().unwrap();
    let dir = tmpdir("version");
    let path = dir.join("v.ckpt");
    checkpoint::save(&trainer, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8] ^= 0xff; // version field
    std::fs::write(&path, bytes).unwrap();
    let err = checkpoint::load(&path).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn truncated_checkpoint_names_the_bad_record() {
    let mut cfg = tiny();
    cfg.train.seed = 7;
    let mut trainer = Trainer::new(&cfg.arch, &cfg.data, &cfg.train).unwrap();
    trainer.pretrain().unwrap();
    let dir = tmpdir("truncate");
    let path = dir.join("t.ckpt");
    checkpoint::save(&trainer, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    let err = checkpoint::load(&path).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn resume_continues_the_metrics_stream() {
    // Straight run vs save-at-midpoint + resume: identical tails except for
    // the single-precision storage rounding at the checkpoint boundary.
    let mut cfg = tiny();
    cfg.train.seed = 8;

    let mut straight = Trainer::new(&cfg.arch, &cfg.data, &cfg.train).unwrap();
    let records_straight = straight.run_collect().unwrap();

    let mut first_half = Trainer::new(&cfg.arch, &cfg.data, &cfg.train).unwrap();
    first_half.pretrain().unwrap();
    while first_half.state.iteration < 20 {
        let b = first_half.next_batch().unwrap();
        first_half.main_step(&b).unwrap();
        first_half.strengthen_adversaries().unwrap();
        if first_half.restart_due() {
            first_half.restart_adversaries().unwrap();
        }
    }
    let dir = tmpdir("resume");
    let path = dir.join("mid.ckpt");
    checkpoint::save(&first_half, &path).unwrap();
    let ckpt = checkpoint::load(&path).unwrap();
    let mut resumed = checkpoint::resume(&cfg.arch, &cfg.data, &cfg.train, &ckpt).unwrap();
    assert_eq!(resumed.state.iteration, 20);
    let mut final_record = None;
    while resumed.state.iteration < cfg.train.iterations {
        let b = resumed.next_batch().unwrap();
        let rep = resumed.main_step(&b).unwrap();
        resumed.strengthen_adversaries().unwrap();
        if resumed.restart_due() {
            resumed.restart_adversaries().unwrap();
        }
        if resumed.state.iteration == cfg.train.iterations {
            final_record = Some(resumed.metrics_record(Some(rep.breakdown)).unwrap());
        }
    }
    let resumed_final = final_record.unwrap();
    let straight_final = records_straight.last().unwrap();
    assert_eq!(straight_final.iteration, resumed_final.iteration);
    assert!(
        (straight_final.overall - resumed_final.overall).abs() <= 0.01 + 1e-12,
        "straight {} vs resumed {}",
        straight_final.overall,
        resumed_final.overall
    );
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn metrics_file_round_trips_and_exports() {
    let mut cfg = tiny();
    cfg.train.seed = 9;
    let dir = tmpdir("metrics");
    let path = dir.join("m.jsonl");
    let mut trainer = Trainer::new(&cfg.arch, &cfg.data, &cfg.train).unwrap();
    let mut writer = MetricsWriter::create(&path).unwrap();
    let mut kept = Vec::new();
    trainer
        .run(|r| {
            writer.log(r).unwrap();
            kept.push(r.clone());
        })
        .unwrap();
    let back = metrics_log::read_jsonl(&path).unwrap();
    assert_eq!(back, kept);
    // Schema stability: every line carries the same field set.
    let text = std::fs::read_to_string(&path).unwrap();
    let field_sets: Vec<Vec<String>> = text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let mut keys: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
            keys.sort();
            keys
        })
        .collect();
    for fs in &field_sets[1..] {
        assert_eq!(fs, &field_sets[0]);
    }
    let csv = dir.join("m.csv");
    metrics_log::export_csv(&back, &csv).unwrap();
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(rows, back.len() + 1);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn two_runs_same_config_write_byte_identical_metrics() {
    let mut cfg = tiny();
    cfg.train.seed = 10;
    let dir = tmpdir("repro");
    let mut files = Vec::new();
    for tag in ["one", "two"] {
        let path = dir.join(format!("{tag}.jsonl"));
        let mut trainer = Trainer::new(&cfg.arch, &cfg.data, &cfg.train).unwrap();
        let mut writer = MetricsWriter::create(&path).unwrap();
        trainer.run(|r| writer.log(r).unwrap()).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    std::fs::remove_dir_all(&dir).unwrap();
}
