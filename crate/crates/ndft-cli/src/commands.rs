//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use ndft_core::eval::{self, EvalSet, FeatureSource, GridSpec, Subset};
use ndft_core::synth::{self, Partition};
use ndft_core::train::Trainer;
use ndft_core::gradcheck;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::metrics_log::{self, MetricsWriter};

pub fn parse_partition(s: &str) -> Result<Partition> {
    match s {
        "train" => Ok(Partition::Train),
        "val-seen" => Ok(Partition::ValSeen),
        "val-unseen" => Ok(Partition::ValUnseen),
        other => bail!("unknown partition '{other}' (train|val-seen|val-unseen)"),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub csv: bool,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), args.seed)?;
    ensure_dir(&args.out)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let ckpt_path = args.out.join("final.ckpt");
    let manifest = RunManifest::new(
        "train",
        args.seed,
        cfg.to_text(),
        vec![
            metrics_path.display().to_string(),
            ckpt_path.display().to_string(),
        ],
    );
    manifest.write(&args.out.join("manifest.json"))?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let trainer = checkpoint::resume(&cfg.arch, &cfg.data, &cfg.train, &ckpt)?;
            eprintln!(
                "resumed from {} at iteration {}",
                path.display(),
                trainer.state.iteration
            );
            trainer
        }
        None => Trainer::new(&cfg.arch, &cfg.data, &cfg.train).map_err(|e| anyhow!("{e}"))?,
    };

    let mut writer = MetricsWriter::create(&metrics_path)?;
    let started = std::time::Instant::now();
    let resuming = args.resume.is_some();
    let mut sink_err: Option<anyhow::Error> = None;
    let run_res = if resuming && trainer.state.iteration > 0 {
        // Resumed runs skip pretraining and continue the outer loop.
        continue_run(&mut trainer, &mut writer, &mut sink_err)
    } else {
        trainer
            .run(|record| {
                if sink_err.is_none() {
                    if let Err(e) = writer.log(record) {
                        sink_err = Some(e);
                    }
                    eprintln!(
                        "iter {:>6}  val-seen {:.3}  heads {:?}",
                        record.iteration,
                        record.overall,
                        record.head_acc.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
                    );
                }
            })
            .map_err(|e| anyhow!("{e}"))
    };
    if let Some(e) = sink_err {
        return Err(e.context("metrics sink failed; run aborted after flushing"));
    }
    run_res?;

    checkpoint::save(&trainer, &ckpt_path)?;
    if args.csv {
        let records = metrics_log::read_jsonl(&metrics_path)?;
        metrics_log::export_csv(&records, &args.out.join("metrics.csv"))?;
    }
    for w in &trainer.state.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "done: {} iterations in {:.1}s; outputs in {}",
        trainer.state.iteration,
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn continue_run(
    trainer: &mut Trainer,
    writer: &mut MetricsWriter<std::io::BufWriter<std::fs::File>>,
    sink_err: &mut Option<anyhow::Error>,
) -> Result<()> {
    while trainer.state.iteration < trainer.cfg.iterations {
        let batch = trainer.next_batch().map_err(|e| anyhow!("{e}"))?;
        let report = trainer.main_step(&batch).map_err(|e| anyhow!("{e}"))?;
        if trainer.cfg.mode.adversarial_schedule() && trainer.model.k() > 0 {
            trainer.strengthen_adversaries().map_err(|e| anyhow!("{e}"))?;
            if trainer.restart_due() {
                trainer.restart_adversaries().map_err(|e| anyhow!("{e}"))?;
            }
        }
        if trainer.state.iteration % trainer.cfg.eval_interval == 0
            || trainer.state.iteration == trainer.cfg.iterations
        {
            let record = trainer
                .metrics_record(Some(report.breakdown))
                .map_err(|e| anyhow!("{e}"))?;
            if sink_err.is_none() {
                if let Err(e) = writer.log(&record) {
                    *sink_err = Some(e);
                }
            }
        }
    }
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub partition: String,
    pub samples: usize,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), args.seed)?;
    let partition = parse_partition(&args.partition)?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let trainer = checkpoint::resume(&cfg.arch, &cfg.data, &cfg.train, &ckpt)?;
    let set = EvalSet::build(&cfg.data, &trainer.split, partition, args.samples, args.seed)
        .map_err(|e| anyhow!("{e}"))?;
    let mut outcome =
        eval::evaluate_model(&trainer.model, &set, cfg.train.iou_threshold).map_err(|e| anyhow!("{e}"))?;
    outcome.per_level = eval::per_level_rows(&cfg.data, &outcome.per_domain);
    println!("partition: {}", args.partition);
    println!("overall:   {:.4}", outcome.overall);
    for row in &outcome.per_level {
        println!("{:>10} {:<8} {:.4}  (n={})", row.factor, row.level, row.metric, row.count);
    }
    println!("head accuracies: {:?}", outcome.head_acc);
    Ok(())
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub factor: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn probe(args: &ProbeArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), args.seed)?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let trainer = checkpoint::resume(&cfg.arch, &cfg.data, &cfg.train, &ckpt)?;
    let factors: Vec<usize> = match args.factor {
        Some(f) if f < cfg.data.k() => vec![f],
        Some(f) => bail!("factor {f} out of range (k = {})", cfg.data.k()),
        None => (0..cfg.data.k()).collect(),
    };
    let mut results = Vec::new();
    for f in factors {
        let r = eval::probe_nuisance(
            FeatureSource::Trunk(&trainer.model),
            &cfg.data,
            &trainer.split,
            f,
            &cfg.probe,
        )
        .map_err(|e| anyhow!("{e}"))?;
        println!(
            "{:>10}: probe accuracy {:.4}  chance {:.4}  leakage {:+.4}{}",
            cfg.data.specs[f].name,
            r.accuracy,
            r.chance,
            r.leakage,
            if r.converged { "" } else { "  [non-convergent]" }
        );
        results.push(r);
    }
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&results)?)?;
    }
    Ok(())
}

pub struct GridArgs {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub seeds: usize,
    pub subsets: String,
    pub gamma: f64,
    pub out: PathBuf,
    pub probes: bool,
}

pub fn parse_subsets(spec: &str, cfg: &ExperimentConfig) -> Result<Vec<Subset>> {
    if spec == "all" {
        return Ok(eval::all_subsets(cfg.data.k()));
    }
    let initial_of = |f: usize| {
        cfg.data.specs[f]
            .name
            .chars()
            .next()
            .unwrap_or('?')
            .to_ascii_uppercase()
    };
    spec.split(';')
        .map(|part| {
            let part = part.trim();
            if part.is_empty() || part == "none" {
                return Ok(Vec::new());
            }
            part.split('+')
                .map(|token| {
                    let token = token.trim();
                    if token.len() != 1 {
                        bail!("subset token '{token}' is not a factor initial");
                    }
                    let ch = token.chars().next().unwrap().to_ascii_uppercase();
                    (0..cfg.data.k())
                        .find(|&f| initial_of(f) == ch)
                        .ok_or_else(|| anyhow!("no factor with initial '{ch}'"))
                })
                .collect()
        })
        .collect()
}

pub fn grid(args: &GridArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), args.seed)?;
    ensure_dir(&args.out)?;
    let manifest = RunManifest::new(
        "grid",
        args.seed,
        cfg.to_text(),
        vec![
            args.out.join("grid.json").display().to_string(),
            args.out.join("table.txt").display().to_string(),
        ],
    );
    manifest.write(&args.out.join("manifest.json"))?;

    let subsets = parse_subsets(&args.subsets, &cfg)?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| args.seed + i).collect();
    let mut spec = GridSpec::new(cfg.data.k(), seeds, args.gamma);
    spec.subsets = subsets;
    spec.probes = args.probes;
    spec.probe_cfg = cfg.probe.clone();
    spec.eval_samples = cfg.train.eval_samples.max(400);

    let result = eval::ablation_grid(&cfg.arch, &cfg.data, &cfg.train, &spec);
    for cell in &result.cells {
        if let Some(err) = &cell.failed {
            eprintln!("cell {} seed {} failed: {err}", cell.label, cell.seed);
        }
    }
    let table = result.table_text(&cfg.data);
    print!("{table}");
    std::fs::write(args.out.join("table.txt"), &table)?;
    std::fs::write(args.out.join("grid.json"), serde_json::to_string_pretty(&result)?)?;
    Ok(())
}

pub struct TransferArgs {
    pub source: PathBuf,
    pub baseline: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub retrain_iters: u64,
}

pub fn transfer(args: &TransferArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), args.seed)?;
    let target = cfg.data.transfer_target();
    let mut report = |label: &str, path: &Path| -> Result<f64> {
        let ckpt = checkpoint::load(path)?;
        let trainer = checkpoint::resume(&cfg.arch, &cfg.data, &cfg.train, &ckpt)?;
        let outcome = eval::transfer(
            &trainer.model,
            &target,
            args.retrain_iters,
            cfg.train.batch_size,
            &cfg.train.optimizer,
            cfg.train.eval_samples,
            args.seed,
        )
        .map_err(|e| anyhow!("{e}"))?;
        let (before, after) = outcome.trunk_fingerprint;
        if before != after {
            bail!("freeze contract violated: trunk changed during transfer");
        }
        println!(
            "{label}: frozen-trunk {:.4}  from-scratch {:.4}",
            outcome.frozen_metric, outcome.scratch_metric
        );
        Ok(outcome.frozen_metric)
    };
    let source_metric = report("source", &args.source)?;
    if let Some(baseline) = &args.baseline {
        let baseline_metric = report("baseline", baseline)?;
        println!("margin: {:+.4}", source_metric - baseline_metric);
    }
    Ok(())
}

pub struct GradcheckArgs {
    pub seed: u64,
    pub points: usize,
    pub step: f64,
    pub tolerance: f64,
}

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let entries = gradcheck::standard_sweep(args.seed, args.points, args.step, args.tolerance)
        .map_err(|e| anyhow!("{e}"))?;
    let mut worst: f64 = 0.0;
    let mut failed = 0usize;
    println!("{:<22} {:>12} {:>12}  status", "op", "max rel err", "mean rel err");
    for e in &entries {
        println!(
            "{:<22} {:>12.3e} {:>12.3e}  {}",
            e.name,
            e.report.max_rel_err,
            e.report.mean_rel_err,
            if e.report.passed { "ok" } else { "FAIL" }
        );
        worst = worst.max(e.report.max_rel_err);
        if !e.report.passed {
            failed += 1;
        }
    }
    println!(
        "checked {} ops/losses at {} points each: max rel err {:.3e} (tolerance {:.1e})",
        entries.len(),
        args.points,
        worst,
        args.tolerance
    );
    if failed > 0 {
        bail!("{failed} checks exceeded tolerance");
    }
    Ok(())
}

pub struct ExportArgs {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub partition: String,
    pub count: usize,
    pub out: PathBuf,
}

pub fn export_data(args: &ExportArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), args.seed)?;
    let partition = parse_partition(&args.partition)?;
    let split = synth::make_split(&cfg.data, args.seed).map_err(|e| anyhow!("{e}"))?;
    let samples =
        synth::fixed_set(&cfg.data, &split, partition, args.count, args.seed).map_err(|e| anyhow!("{e}"))?;
    ensure_dir(&args.out)?;
    synth::export_dataset(&samples, cfg.data.image_size, cfg.data.k(), &args.out)
        .map_err(|e| anyhow!("{e}"))?;
    let manifest = RunManifest::new(
        "export-data",
        args.seed,
        cfg.to_text(),
        vec![
            args.out.join("images.bin").display().to_string(),
            args.out.join("index.txt").display().to_string(),
        ],
    );
    manifest.write(&args.out.join("manifest.json"))?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}
