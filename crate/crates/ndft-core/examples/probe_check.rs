use std::time::Instant;
use ndft_core::eval::{self, EvalSet, FeatureSource, ProbeConfig};
use ndft_core::synth::Partition;
use ndft_core::train::{TrainConfig, TrainMode, Trainer};
use ndft_core::{ArchConfig, DataConfig};

fn arch() -> ArchConfig {
    ArchConfig { trunk_channels: vec![8, 16, 24], task_channels: 24,
        pooled_blocks: 2, box_head_gain: 0.25, ..ArchConfig::default() }
}

fn recipe(mode: TrainMode, gamma: f64, seed: u64) -> TrainConfig {
    let mut c = TrainConfig { seed, ..TrainConfig::default() };
    c.mode = mode;
    c.gammas = vec![gamma; 3];
    c.batch_size = 28;
    c.pretrain_task_iters = 1400;
    c.iterations = 1000;
    c.optimizer.lr = 0.02;
    c.optimizer.lr_decay_at = Some(1800);
    c.eval_interval = 500;
    c.eval_samples = 400;
    c
}

fn main() {
    let data = DataConfig::default();
    let a = arch();
    for (label, mode, gamma) in [
        ("baseline", TrainMode::Baseline, 0.0),
        ("ndft g=0.01", TrainMode::Ndft, 0.01),
        ("ndft g=0.03", TrainMode::Ndft, 0.03),
    ] {
        let t0 = Instant::now();
        let cfg = recipe(mode, gamma, 11);
        let mut tr = Trainer::new(&a, &data, &cfg).unwrap();
        tr.run(|_| {}).unwrap();
        let seen = EvalSet::build(&data, &tr.split, Partition::ValSeen, 500, 11).unwrap();
        let unseen = EvalSet::build(&data, &tr.split, Partition::ValUnseen, 500, 11).unwrap();
        let s = eval::evaluate_model(&tr.model, &seen, 0.5).unwrap();
        let u = eval::evaluate_model(&tr.model, &unseen, 0.5).unwrap();
        let pc = ProbeConfig { seed: 11, ..ProbeConfig::default() };
        let mut probes = vec![];
        for f in 0..3 {
            let p = eval::probe_nuisance(FeatureSource::Trunk(&tr.model), &data, &tr.split, f, &pc).unwrap();
            probes.push(format!("{:.0}({:+.0})", p.accuracy * 100.0, p.leakage * 100.0));
        }
        println!("{label}: seen {:.3} unseen {:.3} probes acc(leak)pts {:?} warn {} ({:.0}s)",
            s.overall, u.overall, probes, tr.state.warnings.len(), t0.elapsed().as_secs_f64());
    }
}
