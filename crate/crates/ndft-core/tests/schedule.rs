//! Schedule-level invariants of the alternating trainer, exercised on a
//! small fast configuration: coordinate-descent isolation, the γ → 0
//! reduction, restart clocking, and mode contracts.

use ndft_core::nn::SgdConfig;
use ndft_core::synth::{EffectKind, NuisanceSpec};
use ndft_core::train::{TrainConfig, TrainMode, Trainer};
use ndft_core::{ArchConfig, DataConfig};

fn tiny_data() -> DataConfig {
    DataConfig {
        image_size: 16,
        classes: 3,
        specs: vec![
            NuisanceSpec {
                name: "altitude".into(),
                levels: vec!["low".into(), "high".into()],
                effect: EffectKind::Scale,
                jitter: 0.4,
            },
            NuisanceSpec {
                name: "weather".into(),
                levels: vec!["day".into(), "night".into()],
                effect: EffectKind::Brightness,
                jitter: 0.03,
            },
        ],
        holdout: 1,
        scale_range: (5.0, 3.0),
        ..DataConfig::default()
    }
}

fn tiny_arch(data: &DataConfig) -> ArchConfig {
    ArchConfig {
        image_size: data.image_size,
        classes: data.classes,
        trunk_channels: vec![4, 8],
        pooled_blocks: 2,
        task_channels: 8,
        nuisance_hidden: 8,
        levels: data.level_counts(),
        ..ArchConfig::default()
    }
}

fn tiny_cfg(mode: TrainMode, gammas: Vec<f64>, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        gammas,
        batch_size: 8,
        iterations: 60,
        pretrain_task_iters: 10,
        pretrain_head_cap: 40,
        strengthen_cap: 15,
        restart_period: 25,
        restart_retrain_cap: 30,
        optimizer: SgdConfig { lr: 0.02, momentum: 0.9, lr_decay_at: None, lr_decay_factor: 0.1 },
        eval_interval: 30,
        eval_samples: 32,
        seed,
        ..TrainConfig::default()
    }
}

fn group_fingerprints(trainer: &Trainer) -> Vec<(String, u64)> {
    trainer
        .model
        .groups()
        .iter()
        .map(|g| (g.name.clone(), g.fingerprint()))
        .collect()
}

#[test]
fn zero_gamma_ndft_reproduces_baseline_trajectory_bit_exactly() {
    let data = tiny_data();
    let arch = tiny_arch(&data);

    let mut baseline = Trainer::new(&arch, &data, &tiny_cfg(TrainMode::Baseline, vec![0.0, 0.0], 9)).unwrap();
    let mut ndft = Trainer::new(&arch, &data, &tiny_cfg(TrainMode::Ndft, vec![0.0, 0.0], 9)).unwrap();

    baseline.pretrain().unwrap();
    ndft.pretrain().unwrap();
    for step in 0..40 {
        let bb = baseline.next_batch().unwrap();
        baseline.main_step(&bb).unwrap();
        baseline.strengthen_adversaries().unwrap();
        if baseline.restart_due() {
            baseline.restart_adversaries().unwrap();
        }
        let nb = ndft.next_batch().unwrap();
        ndft.main_step(&nb).unwrap();
        ndft.strengthen_adversaries().unwrap();
        if ndft.restart_due() {
            ndft.restart_adversaries().unwrap();
        }
        let fb = group_fingerprints(&baseline);
        let fn_ = group_fingerprints(&ndft);
        for ((name, a), (_, b)) in fb.iter().zip(fn_.iter()) {
            assert_eq!(a, b, "step {step}: group {name} diverged between baseline and γ=0 ndft");
        }
    }
}

#[test]
fn main_step_never_touches_nuisance_heads() {
    let data = tiny_data();
    let arch = tiny_arch(&data);
    let mut t = Trainer::new(&arch, &data, &tiny_cfg(TrainMode::Ndft, vec![0.02, 0.02], 3)).unwrap();
    t.pretrain().unwrap();
    for _ in 0..30 {
        let heads_before: Vec<u64> = t
            .model
            .groups()
            .iter()
            .filter(|g| g.name.starts_with("f_N"))
            .map(|g| g.fingerprint())
            .collect();
        let batch = t.next_batch().unwrap();
        t.main_step(&batch).unwrap();
        let heads_after: Vec<u64> = t
            .model
            .groups()
            .iter()
            .filter(|g| g.name.starts_with("f_N"))
            .map(|g| g.fingerprint())
            .collect();
        assert_eq!(heads_before, heads_after);
        t.strengthen_adversaries().unwrap();
        if t.restart_due() {
            t.restart_adversaries().unwrap();
        }
    }
}

#[test]
fn strengthen_and_restart_never_touch_trunk_or_task_head() {
    let data = tiny_data();
    let arch = tiny_arch(&data);
    let mut t = Trainer::new(&arch, &data, &tiny_cfg(TrainMode::Ndft, vec![0.02, 0.02], 4)).unwrap();
    t.pretrain().unwrap();
    let mut restarts_seen = 0;
    for _ in 0..60 {
        let batch = t.next_batch().unwrap();
        t.main_step(&batch).unwrap();
        let trunk = t.model.group("f_T").unwrap().fingerprint();
        let task = t.model.group("f_O").unwrap().fingerprint();
        t.strengthen_adversaries().unwrap();
        if t.restart_due() {
            t.restart_adversaries().unwrap();
            restarts_seen += 1;
        }
        assert_eq!(t.model.group("f_T").unwrap().fingerprint(), trunk, "trunk moved");
        assert_eq!(t.model.group("f_O").unwrap().fingerprint(), task, "task head moved");
    }
    assert!(restarts_seen >= 2, "restart period 25 over 60 iterations fires at least twice");
    assert_eq!(t.state.restart_log, vec![25, 50], "restarts fire exactly at multiples of R");
}

#[test]
fn restart_resets_heads_to_near_chance_before_retraining() {
    let data = tiny_data();
    let arch = tiny_arch(&data);
    let mut cfg = tiny_cfg(TrainMode::Ndft, vec![0.02, 0.02], 5);
    cfg.restart_retrain_cap = 0; // observe the freshly reset heads
    let mut t = Trainer::new(&arch, &data, &cfg).unwrap();
    t.pretrain().unwrap();
    for _ in 0..25 {
        let batch = t.next_batch().unwrap();
        t.main_step(&batch).unwrap();
        t.strengthen_adversaries().unwrap();
    }
    assert!(t.restart_due());
    t.restart_adversaries().unwrap();
    // Freshly reinitialized heads on a fresh batch: accuracy within ±10
    // points of chance for every factor (chance is 1/2 here).
    let batch = t.next_batch().unwrap();
    let report = t.main_step(&batch).unwrap();
    for (i, &acc) in report.head_acc.iter().enumerate() {
        let chance = 1.0 / data.level_counts()[i] as f64;
        assert!(
            (acc - chance).abs() <= 0.30,
            "head {i} accuracy {acc} far from chance {chance} right after reinit"
        );
    }
}

#[test]
fn pretrain_is_mode_independent() {
    let data = tiny_data();
    let arch = tiny_arch(&data);
    let mut a = Trainer::new(&arch, &data, &tiny_cfg(TrainMode::Baseline, vec![0.0, 0.0], 11)).unwrap();
    let mut b = Trainer::new(&arch, &data, &tiny_cfg(TrainMode::Ndft, vec![0.05, 0.05], 11)).unwrap();
    a.pretrain().unwrap();
    b.pretrain().unwrap();
    assert_eq!(group_fingerprints(&a), group_fingerprints(&b));
}

#[test]
fn auxiliary_mode_skips_strengthen_and_restart_in_run() {
    let data = tiny_data();
    let arch = tiny_arch(&data);
    let mut cfg = tiny_cfg(TrainMode::Auxiliary, vec![0.02, 0.02], 6);
    cfg.iterations = 30;
    cfg.restart_period = 10;
    let mut t = Trainer::new(&arch, &data, &cfg).unwrap();
    t.run(|_| {}).unwrap();
    assert!(t.state.restart_log.is_empty(), "auxiliary mode never restarts");
    assert!(t.state.last_strengthen.is_none(), "auxiliary mode never strengthens");
    assert_eq!(t.state.iteration, 30);
}

#[test]
fn two_runs_same_seed_produce_identical_metrics() {
    let data = tiny_data();
    let arch = tiny_arch(&data);
    let cfg = tiny_cfg(TrainMode::Ndft, vec![0.02, 0.02], 12);
    let mut a = Trainer::new(&arch, &data, &cfg).unwrap();
    let ra = a.run_collect().unwrap();
    let mut b = Trainer::new(&arch, &data, &cfg).unwrap();
    let rb = b.run_collect().unwrap();
    assert_eq!(ra, rb);
    assert!(!ra.is_empty());
    for r in &ra {
        if let Some(loss) = &r.loss {
            assert!(loss.is_finite());
            // ndft-mode nuisance term is bounded below by Σ γ(−ln levels).
            let term: f64 = loss
                .gammas
                .iter()
                .zip(&loss.l_ne)
                .map(|(g, l)| g * l)
                .sum();
            let bound: f64 = loss
                .gammas
                .iter()
                .zip(data.level_counts())
                .map(|(g, lv)| g * -(lv as f64).ln())
                .sum();
            assert!(term >= bound - 1e-12, "nuisance term {term} under bound {bound}");
        }
    }
}

#[test]
fn non_adversarial_mode_differs_only_in_composed_loss() {
    // Auxiliary vs ndft on identical tensors: totals differ exactly by
    // Σ γ_i (L_N − L_ne); verified through the trainer's own breakdowns on
    // the first main step (identical states after pretraining).
    let data = tiny_data();
    let arch = tiny_arch(&data);
    let mut aux = Trainer::new(&arch, &data, &tiny_cfg(TrainMode::Auxiliary, vec![0.03, 0.01], 13)).unwrap();
    let mut ndft = Trainer::new(&arch, &data, &tiny_cfg(TrainMode::Ndft, vec![0.03, 0.01], 13)).unwrap();
    aux.pretrain().unwrap();
    ndft.pretrain().unwrap();
    let ba = aux.next_batch().unwrap();
    let ra = aux.main_step(&ba).unwrap();
    let bn = ndft.next_batch().unwrap();
    let rn = ndft.main_step(&bn).unwrap();
    let gap: f64 = ra
        .breakdown
        .gammas
        .iter()
        .zip(ra.breakdown.l_n.iter().zip(&ra.breakdown.l_ne))
        .map(|(g, (ln, lne))| g * (ln - lne))
        .sum();
    assert!(
        (ra.breakdown.total - rn.breakdown.total - gap).abs() < 1e-12,
        "aux total {} vs ndft total {} gap {gap}",
        ra.breakdown.total,
        rn.breakdown.total
    );
}
