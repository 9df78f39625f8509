//! Measurement harness: task metrics, leakage probes, the ablation grid,
//! and the frozen-trunk transfer experiment.
//!
//! The task metric is detection-style accuracy: a sample counts as correct
//! when the class argmax matches and the predicted box overlaps the target
//! at IoU ≥ threshold (0.5 by default; the stricter 0.7 convention is a
//! config knob). With one object per image and one predicted box,
//! precision/recall machinery degenerates, so a thresholded accuracy is the
//! faithful desk-scale stand-in for AP.
//!
//! Leakage is measured by a *fresh* probe: a newly initialized head (same
//! architecture as the training-time nuisance heads) trained on frozen
//! features and scored on held-out samples. The training-time adversary is
//! entangled with the schedule; a fresh probe is the fair residual-
//! information test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::Result;
use crate::losses::{self, accuracy};
use crate::nn::{ArchConfig, NdftModel, NuisanceHead, ParamGroup, SgdConfig, SgdState};
use crate::rng::{Stream, StreamRng};
use crate::synth::{self, Batch, DataConfig, DomainSplit, Partition, Sample};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainMode, Trainer};

/// Intersection-over-union of two `(x_min, y_min, x_max, y_max)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A fixed evaluation set, rendered once and reused across snapshots.
pub struct EvalSet {
    pub partition: Partition,
    pub samples: Vec<Sample>,
    batches: Vec<Batch>,
}

const EVAL_CHUNK: usize = 64;

impl EvalSet {
    pub fn build(
        cfg: &DataConfig,
        split: &DomainSplit,
        partition: Partition,
        count: usize,
        seed: u64,
    ) -> Result<EvalSet> {
        let samples = synth::fixed_set(cfg, split, partition, count, seed)?;
        let batches = samples
            .chunks(EVAL_CHUNK)
            .map(|chunk| Batch::from_samples(chunk, cfg.image_size, cfg.k()))
            .collect();
        Ok(EvalSet { partition, samples, batches })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-level slice of the task metric (one row of the grid tables).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetric {
    pub factor: String,
    pub level: String,
    pub metric: f64,
    pub count: usize,
}

/// Task and monitor metrics of one model snapshot on one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub overall: f64,
    /// One entry per nuisance-level combination present in the partition.
    pub per_domain: Vec<(Vec<usize>, f64, usize)>,
    pub per_level: Vec<LevelMetric>,
    /// Accuracy of the model's own (training-time) nuisance heads.
    pub head_acc: Vec<f64>,
}

/// Deterministic function of `(model snapshot, evaluation set)`.
pub fn evaluate_model(model: &NdftModel, set: &EvalSet, iou_threshold: f64) -> Result<EvalOutcome> {
    let k = model.k();
    let mut correct_total = 0usize;
    let mut head_correct = vec![0usize; k];
    let mut domain_hit: std::collections::BTreeMap<Vec<usize>, (usize, usize)> =
        std::collections::BTreeMap::new();
    let mut cursor = 0usize;
    for batch in &set.batches {
        let tape = Tape::no_grad();
        let out = model.forward(&tape, &batch.images)?;
        let cls = out.class_logits.data();
        let boxes = out.box_pred.data();
        let classes = model.cfg.classes;
        for b in 0..batch.len() {
            let sample = &set.samples[cursor + b];
            let row = &cls[b * classes..(b + 1) * classes];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let pred_box = [
                boxes[b * 4],
                boxes[b * 4 + 1],
                boxes[b * 4 + 2],
                boxes[b * 4 + 3],
            ];
            let hit = argmax == sample.class && iou(pred_box, sample.bbox) >= iou_threshold;
            if hit {
                correct_total += 1;
            }
            let slot = domain_hit.entry(sample.nuisances.clone()).or_insert((0, 0));
            slot.1 += 1;
            if hit {
                slot.0 += 1;
            }
        }
        drop(cls);
        drop(boxes);
        for (i, logits) in out.nuisance_logits.iter().enumerate() {
            let acc = accuracy(logits, &batch.nuisances[i]);
            head_correct[i] += (acc * batch.len() as f64).round() as usize;
        }
        cursor += batch.len();
    }
    let n = set.len().max(1);
    let per_domain: Vec<(Vec<usize>, f64, usize)> = domain_hit
        .iter()
        .map(|(combo, &(hits, count))| (combo.clone(), hits as f64 / count.max(1) as f64, count))
        .collect();
    Ok(EvalOutcome {
        overall: correct_total as f64 / n as f64,
        per_level: Vec::new(), // filled by the caller with factor names
        per_domain,
        head_acc: head_correct.iter().map(|&c| c as f64 / n as f64).collect(),
    })
}

/// Expands per-domain counts into the per-factor-level rows.
pub fn per_level_rows(cfg: &DataConfig, per_domain: &[(Vec<usize>, f64, usize)]) -> Vec<LevelMetric> {
    let mut rows = Vec::new();
    for (f, spec) in cfg.specs.iter().enumerate() {
        for (lv, lv_name) in spec.levels.iter().enumerate() {
            let mut hits = 0.0;
            let mut count = 0usize;
            for (combo, metric, n) in per_domain {
                if combo[f] == lv {
                    hits += metric * *n as f64;
                    count += n;
                }
            }
            rows.push(LevelMetric {
                factor: spec.name.clone(),
                level: lv_name.clone(),
                metric: if count > 0 { hits / count as f64 } else { f64::NAN },
                count,
            });
        }
    }
    rows
}

/// One evaluation snapshot in the metrics stream.
///
/// `wall_clock_s` is diagnostic only: it is excluded from serialization and
/// from equality so a repeated run produces byte-identical metrics files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub mode: String,
    pub gammas: Vec<f64>,
    pub partition: Partition,
    pub overall: f64,
    pub per_domain: Vec<(Vec<usize>, f64, usize)>,
    pub per_level: Vec<LevelMetric>,
    pub head_acc: Vec<f64>,
    pub loss: Option<crate::losses::LossBreakdown>,
    #[serde(skip, default)]
    pub wall_clock_s: f64,
}

impl PartialEq for MetricsRecord {
    fn eq(&self, other: &Self) -> bool {
        self.iteration == other.iteration
            && self.mode == other.mode
            && self.gammas == other.gammas
            && self.partition == other.partition
            && self.overall == other.overall
            && self.per_domain == other.per_domain
            && self.per_level == other.per_level
            && self.head_acc == other.head_acc
            && self.loss == other.loss
    }
}

impl MetricsRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        iteration: u64,
        mode: String,
        gammas: Vec<f64>,
        partition: Partition,
        outcome: EvalOutcome,
        loss: Option<crate::losses::LossBreakdown>,
        wall_clock_s: f64,
    ) -> MetricsRecord {
        MetricsRecord {
            iteration,
            mode,
            gammas,
            partition,
            overall: outcome.overall,
            per_domain: outcome.per_domain,
            per_level: outcome.per_level,
            head_acc: outcome.head_acc,
            loss,
            wall_clock_s,
        }
    }
}

// ───── leakage probes ─────

/// What the probe reads its features from.
pub enum FeatureSource<'a> {
    /// Pooled trunk features of a frozen model.
    Trunk(&'a NdftModel),
    /// Flattened raw pixels (identity-transform fixture).
    RawPixels,
    /// A constant vector (null calibration: the probe must land at chance).
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_n: usize,
    pub test_n: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_n: 1500,
            test_n: 600,
            steps: 600,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            hidden: 32,
            seed: 0,
        }
    }
}

/// Residual-information measurement for one nuisance factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub nuisance: usize,
    pub accuracy: f64,
    pub chance: f64,
    /// `accuracy − chance`.
    pub leakage: f64,
    /// False when the probe stalled below chance + 2 points with its loss
    /// still falling at the step cap.
    pub converged: bool,
}

/// Expected squared feature norm after probe normalization.
const PROBE_NORM_BUDGET: f64 = 32.0;

fn feature_normalizer(x: &Tensor, dim: usize) -> (Vec<f64>, f64) {
    let data = x.data();
    let n = data.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in data.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut sq = 0.0;
    for row in data.chunks(dim) {
        for (m, v) in mean.iter().zip(row) {
            sq += (v - m) * (v - m);
        }
    }
    sq /= n as f64;
    (mean, (PROBE_NORM_BUDGET / sq.max(1e-12)).sqrt())
}

fn apply_normalizer(x: &Tensor, mean: &[f64], scale: f64, dim: usize) {
    let mut data = x.data_mut();
    for row in data.chunks_mut(dim) {
        for (v, m) in row.iter_mut().zip(mean) {
            *v = (*v - m) * scale;
        }
    }
}

fn probe_features(source: &FeatureSource, samples: &[Sample], cfg: &DataConfig) -> Result<(Tensor, usize)> {
    let n = samples.len();
    match source {
        FeatureSource::Trunk(model) => {
            let mut rows: Vec<f64> = Vec::new();
            let mut dim = 0;
            for chunk in samples.chunks(EVAL_CHUNK) {
                let batch = Batch::from_samples(chunk, cfg.image_size, cfg.k());
                let tape = Tape::no_grad();
                let features = model.trunk_features(&tape, &batch.images)?;
                let pooled = tape.global_avg_pool(&features)?;
                dim = pooled.shape()[1];
                rows.extend_from_slice(&pooled.data());
            }
            Ok((Tensor::new(&[n, dim], rows)?, dim))
        }
        FeatureSource::RawPixels => {
            let dim = cfg.image_size * cfg.image_size;
            let mut rows = Vec::with_capacity(n * dim);
            for s in samples {
                rows.extend_from_slice(&s.image);
            }
            Ok((Tensor::new(&[n, dim], rows)?, dim))
        }
        FeatureSource::Constant => {
            let dim = 8;
            Ok((Tensor::new(&[n, dim], vec![1.0; n * dim])?, dim))
        }
    }
}

/// A probe set stratified over the factor's levels (exactly balanced), with
/// each sample's remaining factors drawn from the seen combinations that
/// contain the stratified level. Balance makes `1/levels` the exact
/// no-information accuracy.
fn balanced_probe_set(
    cfg: &DataConfig,
    split: &DomainSplit,
    factor: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let levels = cfg.level_counts()[factor];
    (0..count)
        .map(|i| {
            let mut rng = StreamRng::indexed(seed, Stream::Eval, 0xb << 60 | i as u64);
            let level = i % levels;
            let eligible: Vec<&Vec<usize>> =
                split.seen.iter().filter(|c| c[factor] == level).collect();
            let combo = eligible[rng.below(eligible.len())];
            let class = rng.below(cfg.classes);
            synth::render(cfg, class, combo, &mut rng)
        })
        .collect()
}

/// Trains a fresh head on frozen features and scores it on held-out
/// samples. The feature extractor is never updated.
pub fn probe_nuisance(
    source: FeatureSource,
    data_cfg: &DataConfig,
    split: &DomainSplit,
    nuisance: usize,
    probe_cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let levels = data_cfg.level_counts()[nuisance];
    let chance = 1.0 / levels as f64;
    let train =
        balanced_probe_set(data_cfg, split, nuisance, probe_cfg.train_n, probe_cfg.seed ^ 0x9e37)?;
    let test =
        balanced_probe_set(data_cfg, split, nuisance, probe_cfg.test_n, probe_cfg.seed ^ 0x51f1)?;
    let (train_x, dim) = probe_features(&source, &train, data_cfg)?;
    let (test_x, _) = probe_features(&source, &test, data_cfg)?;
    let train_y: Vec<usize> = train.iter().map(|s| s.nuisances[nuisance]).collect();
    let test_y: Vec<usize> = test.iter().map(|s| s.nuisances[nuisance]).collect();

    // Center and rescale to a fixed norm budget (statistics from the train
    // side only) so one step size works for any feature source or scale.
    let (mean, scale) = feature_normalizer(&train_x, dim);
    apply_normalizer(&train_x, &mean, scale, dim);
    apply_normalizer(&test_x, &mean, scale, dim);

    let mut rng = StreamRng::stream(probe_cfg.seed, Stream::Eval);
    let head = NuisanceHead::init(dim, probe_cfg.hidden, levels, &mut rng);
    let group = ParamGroup { name: "probe".into(), params: head.params("probe") };
    let sgd_cfg = SgdConfig {
        lr: probe_cfg.lr,
        momentum: probe_cfg.momentum,
        lr_decay_at: None,
        lr_decay_factor: 1.0,
    };
    let mut sgd = SgdState::new(&group, &sgd_cfg);

    let n = train.len();
    let mut losses_log = Vec::with_capacity(probe_cfg.steps as usize);
    let train_data = train_x.data().clone();
    for _ in 0..probe_cfg.steps {
        let idx: Vec<usize> = (0..probe_cfg.batch_size).map(|_| rng.below(n)).collect();
        let mut xb = Vec::with_capacity(probe_cfg.batch_size * dim);
        let mut yb = Vec::with_capacity(probe_cfg.batch_size);
        for &i in &idx {
            xb.extend_from_slice(&train_data[i * dim..(i + 1) * dim]);
            yb.push(train_y[i]);
        }
        let xb = Tensor::new(&[probe_cfg.batch_size, dim], xb)?;
        let tape = Tape::new();
        let logits = head.forward(&tape, &xb)?;
        let loss = losses::nuisance_ce(&tape, &logits, &yb)?;
        losses_log.push(loss.scalar_value()?);
        tape.backward(&loss)?;
        sgd.step(&group)?;
    }

    let tape = Tape::no_grad();
    let logits = head.forward(&tape, &test_x)?;
    let acc = accuracy(&logits, &test_y);

    // Convergence flag: stalled near chance while the loss kept falling.
    let converged = if acc < chance + 0.02 && losses_log.len() >= 20 {
        let tail = losses_log.len() / 10;
        let recent: f64 = losses_log[losses_log.len() - tail..].iter().sum::<f64>() / tail as f64;
        let earlier: f64 =
            losses_log[losses_log.len() - 2 * tail..losses_log.len() - tail].iter().sum::<f64>() / tail as f64;
        recent >= earlier * 0.99
    } else {
        true
    };

    Ok(ProbeResult { nuisance, accuracy: acc, chance, leakage: acc - chance, converged })
}

/// All factors probed against one source.
pub fn probe_all(
    model: &NdftModel,
    data_cfg: &DataConfig,
    split: &DomainSplit,
    probe_cfg: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    (0..data_cfg.k())
        .map(|i| probe_nuisance(FeatureSource::Trunk(model), data_cfg, split, i, probe_cfg))
        .collect()
}

// ───── ablation grid ─────

/// Which γ entries are switched on for one grid cell.
pub type Subset = Vec<usize>;

/// Canonical power set of k factors, smallest subsets first.
pub fn all_subsets(k: usize) -> Vec<Subset> {
    let mut subsets: Vec<Subset> = (0..1usize << k)
        .map(|mask| (0..k).filter(|i| mask >> i & 1 == 1).collect())
        .collect();
    subsets.sort_by_key(|s: &Subset| (s.len(), s.clone()));
    subsets
}

pub fn subset_label(cfg: &DataConfig, subset: &Subset) -> String {
    if subset.is_empty() {
        return "none".to_string();
    }
    subset
        .iter()
        .map(|&i| {
            cfg.specs[i]
                .name
                .chars()
                .next()
                .unwrap_or('?')
                .to_ascii_uppercase()
                .to_string()
        })
        .collect::<Vec<_>>()
        .join("+")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub subset: Subset,
    pub label: String,
    pub seed: u64,
    /// Exact configuration the cell ran with (reproducibility closure).
    pub config: TrainConfig,
    pub val_seen: f64,
    pub val_unseen: f64,
    pub per_level_unseen: Vec<LevelMetric>,
    pub probes: Vec<ProbeResult>,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
}

/// Grid execution plan.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub subsets: Vec<Subset>,
    pub seeds: Vec<u64>,
    /// γ applied to every factor in a cell's subset.
    pub gamma: f64,
    /// Train fresh probes for each cell (skippable to save time).
    pub probes: bool,
    pub probe_cfg: ProbeConfig,
    pub eval_samples: usize,
}

impl GridSpec {
    pub fn new(k: usize, seeds: Vec<u64>, gamma: f64) -> GridSpec {
        GridSpec {
            subsets: all_subsets(k),
            seeds,
            gamma,
            probes: true,
            probe_cfg: ProbeConfig::default(),
            eval_samples: 600,
        }
    }
}

/// Runs one train+evaluate cell of the grid.
pub fn run_cell(
    arch: &ArchConfig,
    data_cfg: &DataConfig,
    base: &TrainConfig,
    spec: &GridSpec,
    subset: &Subset,
    seed: u64,
) -> GridCell {
    let mut cfg = base.clone();
    cfg.mode = TrainMode::Ndft;
    cfg.seed = seed;
    cfg.gammas = vec![0.0; arch.k()];
    for &i in subset {
        cfg.gammas[i] = spec.gamma;
    }
    let label = subset_label(data_cfg, subset);
    let outcome = (|| -> Result<(f64, f64, Vec<LevelMetric>, Vec<ProbeResult>)> {
        let mut trainer = Trainer::new(arch, data_cfg, &cfg)?;
        trainer.run(|_| {})?;
        let seen_set = EvalSet::build(data_cfg, &trainer.split, Partition::ValSeen, spec.eval_samples, seed)?;
        let unseen_set =
            EvalSet::build(data_cfg, &trainer.split, Partition::ValUnseen, spec.eval_samples, seed)?;
        let seen = evaluate_model(&trainer.model, &seen_set, cfg.iou_threshold)?;
        let unseen = evaluate_model(&trainer.model, &unseen_set, cfg.iou_threshold)?;
        let per_level = per_level_rows(data_cfg, &unseen.per_domain);
        let probes = if spec.probes {
            let mut pc = spec.probe_cfg.clone();
            pc.seed = seed;
            probe_all(&trainer.model, data_cfg, &trainer.split, &pc)?
        } else {
            Vec::new()
        };
        Ok((seen.overall, unseen.overall, per_level, probes))
    })();
    match outcome {
        Ok((val_seen, val_unseen, per_level_unseen, probes)) => GridCell {
            subset: subset.clone(),
            label,
            seed,
            config: cfg,
            val_seen,
            val_unseen,
            per_level_unseen,
            probes,
            failed: None,
        },
        Err(e) => GridCell {
            subset: subset.clone(),
            label,
            seed,
            config: cfg,
            val_seen: f64::NAN,
            val_unseen: f64::NAN,
            per_level_unseen: Vec::new(),
            probes: Vec::new(),
            failed: Some(e.to_string()),
        },
    }
}

/// One train+evaluate per subset per seed, cells independent and parallel.
pub fn ablation_grid(
    arch: &ArchConfig,
    data_cfg: &DataConfig,
    base: &TrainConfig,
    spec: &GridSpec,
) -> GridResult {
    let jobs: Vec<(Subset, u64)> = spec
        .subsets
        .iter()
        .flat_map(|s| spec.seeds.iter().map(move |&seed| (s.clone(), seed)))
        .collect();
    let cells: Vec<GridCell> = jobs
        .par_iter()
        .map(|(subset, seed)| run_cell(arch, data_cfg, base, spec, subset, *seed))
        .collect();
    GridResult { cells }
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl GridResult {
    pub fn cells_for(&self, subset: &Subset) -> Vec<&GridCell> {
        self.cells.iter().filter(|c| &c.subset == subset && c.failed.is_none()).collect()
    }

    pub fn median_unseen(&self, subset: &Subset) -> f64 {
        let mut vals: Vec<f64> = self.cells_for(subset).iter().map(|c| c.val_unseen).collect();
        median(&mut vals)
    }

    pub fn median_seen(&self, subset: &Subset) -> f64 {
        let mut vals: Vec<f64> = self.cells_for(subset).iter().map(|c| c.val_seen).collect();
        median(&mut vals)
    }

    /// Median probe accuracy per factor for one subset.
    pub fn median_probe(&self, subset: &Subset, factor: usize) -> f64 {
        let mut vals: Vec<f64> = self
            .cells_for(subset)
            .iter()
            .filter_map(|c| c.probes.iter().find(|p| p.nuisance == factor).map(|p| p.accuracy))
            .collect();
        median(&mut vals)
    }

    /// Aligned text table: factor-level rows × subset columns, seed medians,
    /// with the overall row last.
    pub fn table_text(&self, data_cfg: &DataConfig) -> String {
        let mut subsets: Vec<Subset> = Vec::new();
        for c in &self.cells {
            if !subsets.contains(&c.subset) {
                subsets.push(c.subset.clone());
            }
        }
        subsets.sort_by_key(|s| (s.len(), s.clone()));
        let mut out = String::new();
        let label_w = 18usize;
        out.push_str(&format!("{:label_w$}", "metric: val-unseen"));
        for s in &subsets {
            out.push_str(&format!(" {:>8}", subset_label(data_cfg, s)));
        }
        out.push('\n');
        for spec in &data_cfg.specs {
            out.push_str(&format!("-- {} --\n", spec.name));
            for lv_name in &spec.levels {
                out.push_str(&format!("{:label_w$}", lv_name));
                for s in &subsets {
                    let mut vals: Vec<f64> = self
                        .cells_for(s)
                        .iter()
                        .filter_map(|c| {
                            c.per_level_unseen
                                .iter()
                                .find(|r| r.factor == spec.name && r.level == *lv_name)
                                .map(|r| r.metric)
                        })
                        .collect();
                    let m = median(&mut vals);
                    if m.is_nan() {
                        out.push_str(&format!(" {:>8}", "-"));
                    } else {
                        out.push_str(&format!(" {:>8.3}", m));
                    }
                }
                out.push('\n');
            }
        }
        out.push_str(&format!("{:label_w$}", "overall"));
        for s in &subsets {
            out.push_str(&format!(" {:>8.3}", self.median_unseen(s)));
        }
        out.push('\n');
        out
    }
}

// ───── frozen-trunk transfer ─────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    /// Target val-seen metric with the frozen source trunk.
    pub frozen_metric: f64,
    /// Target metric for a model trained from scratch with the same budget.
    pub scratch_metric: f64,
    /// Trunk fingerprint before/after, proving the freeze contract.
    pub trunk_fingerprint: (u64, u64),
}

/// Re-trains only the task head on the target generator with the trunk
/// frozen, then evaluates on the target's validation split. Also trains a
/// from-scratch control with the same step budget.
pub fn transfer(
    source: &NdftModel,
    target_cfg: &DataConfig,
    retrain_iters: u64,
    batch_size: usize,
    optimizer: &SgdConfig,
    eval_samples: usize,
    seed: u64,
) -> Result<TransferOutcome> {
    let split = synth::make_split(target_cfg, seed)?;
    let model = source.deep_clone();
    let fp_before = model.group("f_T")?.fingerprint();

    // Fresh task head, frozen trunk.
    let mut reinit_rng = StreamRng::indexed(seed, Stream::Init, 0x7f);
    model.reinit_group("f_O", &mut reinit_rng)?;
    let trunk = model.group("f_T")?;
    trunk.set_requires_grad(false);
    for i in 1..=model.k() {
        model.group(&format!("f_N[{i}]"))?.set_requires_grad(false);
    }
    let task = model.group("f_O")?;
    let mut sgd = SgdState::new(&task, optimizer);
    let mut data_rng = StreamRng::indexed(seed, Stream::Data, 0x7f);
    for _ in 0..retrain_iters {
        let batch = synth::sample_batch(target_cfg, &split, Partition::Train, batch_size, &mut data_rng)?;
        let tape = Tape::new();
        let features = model.trunk_features(&tape, &batch.images)?;
        let (class_logits, box_pred) = model.task_outputs(&tape, &features)?;
        let (l_cls, l_box) =
            losses::task_loss(&tape, &class_logits, &box_pred, &batch.labels, &batch.boxes)?;
        let total = tape.add(&l_cls, &l_box)?;
        tape.backward(&total)?;
        sgd.step(&task)?;
    }
    let fp_after = model.group("f_T")?.fingerprint();
    let set = EvalSet::build(target_cfg, &split, Partition::ValSeen, eval_samples, seed)?;
    let frozen = evaluate_model(&model, &set, 0.5)?;

    // From-scratch control: same budget, full model trainable.
    let mut scratch_rng = StreamRng::indexed(seed, Stream::Init, 0x5c);
    let scratch = NdftModel::build(&source.cfg, &mut scratch_rng)?;
    let trunk_s = scratch.group("f_T")?;
    let task_s = scratch.group("f_O")?;
    for i in 1..=scratch.k() {
        scratch.group(&format!("f_N[{i}]"))?.set_requires_grad(false);
    }
    let mut sgd_t = SgdState::new(&trunk_s, optimizer);
    let mut sgd_o = SgdState::new(&task_s, optimizer);
    let mut data_rng = StreamRng::indexed(seed, Stream::Data, 0x5c);
    for _ in 0..retrain_iters {
        let batch = synth::sample_batch(target_cfg, &split, Partition::Train, batch_size, &mut data_rng)?;
        let tape = Tape::new();
        let features = scratch.trunk_features(&tape, &batch.images)?;
        let (class_logits, box_pred) = scratch.task_outputs(&tape, &features)?;
        let (l_cls, l_box) =
            losses::task_loss(&tape, &class_logits, &box_pred, &batch.labels, &batch.boxes)?;
        let total = tape.add(&l_cls, &l_box)?;
        tape.backward(&total)?;
        sgd_t.step(&trunk_s)?;
        sgd_o.step(&task_s)?;
    }
    let scratch_out = evaluate_model(&scratch, &set, 0.5)?;

    Ok(TransferOutcome {
        frozen_metric: frozen.overall,
        scratch_metric: scratch_out.overall,
        trunk_fingerprint: (fp_before, fp_after),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_definition_cases() {
        assert!((iou([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]) - 1.0).abs() < 1e-12);
        assert_eq!(iou([0.0, 0.0, 0.4, 0.4], [0.5, 0.5, 1.0, 1.0]), 0.0);
        let v = iou([0.0, 0.0, 1.0, 1.0], [0.5, 0.0, 1.5, 1.0]);
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn subsets_enumerate_the_power_set() {
        let subsets = all_subsets(3);
        assert_eq!(subsets.len(), 8);
        assert_eq!(subsets[0], Vec::<usize>::new());
        assert_eq!(subsets[7], vec![0, 1, 2]);
    }

    #[test]
    fn subset_labels_use_factor_initials() {
        let cfg = DataConfig::default();
        assert_eq!(subset_label(&cfg, &vec![]), "none");
        assert_eq!(subset_label(&cfg, &vec![0, 1, 2]), "A+V+W");
        assert_eq!(subset_label(&cfg, &vec![1]), "V");
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut vec![]).is_nan());
    }

    #[test]
    fn untrained_model_scores_near_zero() {
        let data_cfg = DataConfig::default();
        let arch = ArchConfig::default();
        let mut rng = StreamRng::stream(3, Stream::Init);
        let model = NdftModel::build(&arch, &mut rng).unwrap();
        let split = synth::make_split(&data_cfg, 3).unwrap();
        let set = EvalSet::build(&data_cfg, &split, Partition::ValSeen, 200, 3).unwrap();
        let out = evaluate_model(&model, &set, 0.5).unwrap();
        assert!(out.overall < 0.05, "untrained metric {}", out.overall);
    }

    #[test]
    fn probe_on_constant_features_sits_at_chance() {
        let data_cfg = DataConfig::default();
        let split = synth::make_split(&data_cfg, 1).unwrap();
        let pc = ProbeConfig { train_n: 600, test_n: 400, steps: 200, ..ProbeConfig::default() };
        for factor in 0..3 {
            let r =
                probe_nuisance(FeatureSource::Constant, &data_cfg, &split, factor, &pc).unwrap();
            assert!(
                (r.accuracy - r.chance).abs() <= 0.05,
                "factor {factor}: {} vs chance {}",
                r.accuracy,
                r.chance
            );
        }
    }

    #[test]
    fn probe_on_raw_pixels_recovers_every_factor() {
        let data_cfg = DataConfig::default();
        let split = synth::make_split(&data_cfg, 1).unwrap();
        let pc = ProbeConfig::default();
        for factor in 0..3 {
            let r =
                probe_nuisance(FeatureSource::RawPixels, &data_cfg, &split, factor, &pc).unwrap();
            assert!(r.accuracy >= 0.90, "factor {factor}: raw-pixel probe {}", r.accuracy);
        }
    }
}
