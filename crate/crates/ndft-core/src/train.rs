//! The alternating three-party training schedule.
//!
//! One outer iteration is:
//!
//! 1. **main step** — one SGD step on `f_T ∪ f_O` minimizing the mode's
//!    composed loss, with every nuisance head frozen;
//! 2. **adversary strengthening** — while any nuisance head's accuracy on
//!    the current mini-batch sits at or below τ, step that head on its
//!    cross-entropy with the trunk frozen (bounded by an inner-step cap);
//! 3. **periodic restart** — every `restart_period` iterations all nuisance
//!    heads are re-initialized and retrained against the frozen trunk, which
//!    keeps the adversaries strong and shakes off bad local minima.
//!
//! Before the outer loop, `pretrain` fits `f_T ∪ f_O` on the task alone and
//! then brings every head above τ; pretraining is identical across modes, so
//! any mode difference is confined to the outer loop.
//!
//! Modes: `baseline` composes the task loss only (heads stay live as
//! monitors); `ndft` adds the γ-weighted negative-entropy terms; `auxiliary`
//! adds γ-weighted head cross-entropies instead (sign-flipped multi-task
//! control, no strengthening or restarts); `grad-reversal` subtracts the
//! head cross-entropies (ablation alternative).
//!
//! Batches for the main step, for strengthening, and for restart retraining
//! come from separate named streams, so the `f_T ∪ f_O` trajectory is
//! independent of how many batches the adversary side consumes. With all
//! γ = 0 an `ndft` run therefore reproduces the baseline trajectory
//! bit-exactly.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::eval::{self, EvalSet, MetricsRecord};
use crate::losses::{self, accuracy, ComposeInputs, LossBreakdown, LossMode};
use crate::nn::{ArchConfig, NdftModel, ParamGroup, SgdConfig, SgdState};
use crate::rng::{Stream, StreamRng};
use crate::synth::{self, Batch, DataConfig, DomainSplit, Partition};

/// Training schedule variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Baseline,
    Ndft,
    Auxiliary,
    GradReversal,
}

impl TrainMode {
    pub fn loss_mode(self) -> LossMode {
        match self {
            TrainMode::Baseline => LossMode::Baseline,
            TrainMode::Ndft => LossMode::Ndft,
            TrainMode::Auxiliary => LossMode::Auxiliary,
            TrainMode::GradReversal => LossMode::GradReversal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Ndft => "ndft",
            TrainMode::Auxiliary => "auxiliary",
            TrainMode::GradReversal => "grad-reversal",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "ndft" => Ok(TrainMode::Ndft),
            "auxiliary" => Ok(TrainMode::Auxiliary),
            "grad-reversal" => Ok(TrainMode::GradReversal),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }

    /// Whether the schedule runs adversary strengthening and restarts.
    pub fn adversarial_schedule(self) -> bool {
        !matches!(self, TrainMode::Auxiliary)
    }
}

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Per-nuisance adversarial weights; must match the model's head count.
    pub gammas: Vec<f64>,
    pub batch_size: usize,
    /// Outer-loop iterations after pretraining.
    pub iterations: u64,
    pub pretrain_task_iters: u64,
    /// Step budget for bringing heads above τ during pretraining.
    pub pretrain_head_cap: u64,
    /// Strengthening accuracy threshold.
    pub tau: f64,
    /// Inner-step cap per strengthening invocation.
    pub strengthen_cap: u64,
    pub restart_period: u64,
    /// Post-restart retraining budget (steps, or until all heads clear τ).
    pub restart_retrain_cap: u64,
    /// Re-run the task pretraining phase after each restart instead of
    /// resuming the outer loop (comparison flag; default off).
    pub destructive_restart: bool,
    pub optimizer: SgdConfig,
    /// Multiplier on the base learning rate for the nuisance heads.
    pub head_lr_scale: f64,
    /// Momentum for the nuisance heads; zero by default — the heads chase a
    /// moving trunk, and momentum makes that chase oscillate.
    pub head_momentum: f64,
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub iou_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Ndft,
            gammas: vec![0.01; 3],
            batch_size: 28,
            iterations: 2000,
            pretrain_task_iters: 2400,
            pretrain_head_cap: 500,
            tau: 0.9,
            strengthen_cap: 200,
            restart_period: 1000,
            restart_retrain_cap: 300,
            destructive_restart: false,
            optimizer: SgdConfig::default(),
            head_lr_scale: 2.0,
            head_momentum: 0.0,
            eval_interval: 200,
            eval_samples: 400,
            iou_threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if self.restart_period == 0 {
            return Err(Error::Config("restart_period must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.gammas.len() != k {
            return Err(Error::Config(format!(
                "{} gammas configured for {} nuisance heads",
                self.gammas.len(),
                k
            )));
        }
        if let Some(&bad) = self.gammas.iter().find(|&&g| g < 0.0 || !g.is_finite()) {
            return Err(Error::Config(format!("gammas must be finite and ≥ 0, got {bad}")));
        }
        Ok(())
    }
}

/// Named stream states owned by one run.
pub struct RngSet {
    pub data: StreamRng,
    pub adversary: StreamRng,
    pub restart: StreamRng,
}

impl RngSet {
    fn new(seed: u64) -> RngSet {
        RngSet {
            data: StreamRng::stream(seed, Stream::Data),
            adversary: StreamRng::stream(seed, Stream::Adversary),
            restart: StreamRng::stream(seed, Stream::Restart),
        }
    }
}

/// Mutable run state threaded through the schedule.
pub struct TrainState {
    /// Completed outer-loop iterations.
    pub iteration: u64,
    /// Every `f_T ∪ f_O` update so far, pretraining included; the one
    /// learning-rate decay is indexed against this counter.
    pub total_task_steps: u64,
    /// Iterations since the last restart; stays in `[0, restart_period)`
    /// between operations.
    pub restart_clock: u64,
    /// Optimizer slots aligned with the model's canonical group order.
    pub sgd: Vec<SgdState>,
    pub rngs: RngSet,
    /// Head accuracies on the latest main-step batch (strengthening guard).
    pub last_head_acc: Vec<f64>,
    pub last_strengthen: Option<StrengthenReport>,
    /// Iterations at which a restart fired.
    pub restart_log: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Outcome of one main step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub head_acc: Vec<f64>,
}

/// Outcome of one strengthening invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthenReport {
    pub inner_steps: Vec<u64>,
    pub final_acc: Vec<f64>,
    pub cap_exhausted: bool,
}

/// Outcome of one restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub at_iteration: u64,
    pub retrain_steps: u64,
    pub final_acc: Vec<f64>,
    pub reached_tau: bool,
}

/// Owns a model plus schedule state and drives the full run.
pub struct Trainer {
    pub arch: ArchConfig,
    pub data_cfg: DataConfig,
    pub cfg: TrainConfig,
    pub split: DomainSplit,
    pub model: NdftModel,
    pub state: TrainState,
    val_seen: Option<EvalSet>,
}

impl Trainer {
    /// Builds a fresh, untrained trainer. All randomness fans out from
    /// `cfg.seed`.
    pub fn new(arch: &ArchConfig, data_cfg: &DataConfig, cfg: &TrainConfig) -> Result<Trainer> {
        data_cfg.validate()?;
        if arch.levels != data_cfg.level_counts() {
            return Err(Error::Config(format!(
                "model levels {:?} do not match data levels {:?}",
                arch.levels,
                data_cfg.level_counts()
            )));
        }
        cfg.validate(arch.k())?;
        let split = synth::make_split(data_cfg, cfg.seed)?;
        let mut init_rng = StreamRng::stream(cfg.seed, Stream::Init);
        let model = NdftModel::build(arch, &mut init_rng)?;
        let head_opt = SgdConfig {
            lr: cfg.optimizer.lr * cfg.head_lr_scale,
            momentum: cfg.head_momentum,
            ..cfg.optimizer.clone()
        };
        let sgd = model
            .groups()
            .iter()
            .map(|g| {
                let opt = if g.name.starts_with("f_N") { &head_opt } else { &cfg.optimizer };
                SgdState::new(g, opt)
            })
            .collect();
        let state = TrainState {
            iteration: 0,
            total_task_steps: 0,
            restart_clock: 0,
            sgd,
            rngs: RngSet::new(cfg.seed),
            last_head_acc: vec![0.0; arch.k()],
            last_strengthen: None,
            restart_log: Vec::new(),
            warnings: Vec::new(),
        };
        Ok(Trainer {
            arch: arch.clone(),
            data_cfg: data_cfg.clone(),
            cfg: cfg.clone(),
            split,
            model,
            state,
            val_seen: None,
        })
    }

    fn group(&self, name: &str) -> ParamGroup {
        self.model.group(name).expect("canonical group")
    }

    fn sgd_index(&self, name: &str) -> usize {
        match name {
            "f_T" => 0,
            "f_O" => 1,
            _ => {
                let idx: usize = name
                    .trim_start_matches("f_N[")
                    .trim_end_matches(']')
                    .parse()
                    .expect("canonical head name");
                1 + idx
            }
        }
    }

    /// Draws the next main-loop batch from the data stream.
    pub fn next_batch(&mut self) -> Result<Batch> {
        sample_batch_from(
            &self.data_cfg,
            &self.split,
            Partition::Train,
            self.cfg.batch_size,
            &mut self.state.rngs.data,
        )
    }

    fn adversary_batch(&mut self) -> Result<Batch> {
        sample_batch_from(
            &self.data_cfg,
            &self.split,
            Partition::Train,
            self.cfg.batch_size,
            &mut self.state.rngs.adversary,
        )
    }

    fn restart_batch(&mut self) -> Result<Batch> {
        sample_batch_from(
            &self.data_cfg,
            &self.split,
            Partition::Train,
            self.cfg.batch_size,
            &mut self.state.rngs.restart,
        )
    }

    /// Task pretraining on `L_O` alone, then head pretraining to τ. Runs the
    /// same way in every mode.
    pub fn pretrain(&mut self) -> Result<()> {
        for _ in 0..self.cfg.pretrain_task_iters {
            let batch = self.next_batch()?;
            self.task_step(&batch)?;
        }
        if self.model.k() > 0 {
            self.fit_heads_to_tau(HeadPhase::Pretrain)?;
        }
        Ok(())
    }

    /// One SGD step on `f_T ∪ f_O` against the plain task loss.
    fn task_step(&mut self, batch: &Batch) -> Result<()> {
        let heads: Vec<ParamGroup> =
            self.model.group_names().iter().skip(2).map(|n| self.group(n)).collect();
        for h in &heads {
            h.set_requires_grad(false);
        }
        let result = (|| -> Result<()> {
            let tape = Tape::new();
            let features = self.model.trunk_features(&tape, &batch.images)?;
            let (class_logits, box_pred) = self.model.task_outputs(&tape, &features)?;
            let (l_cls, l_box) =
                losses::task_loss(&tape, &class_logits, &box_pred, &batch.labels, &batch.boxes)?;
            let total = tape.add(&l_cls, &l_box)?;
            tape.backward(&total)?;
            let trunk = self.group("f_T");
            let task = self.group("f_O");
            self.state.sgd[0].step(&trunk)?;
            self.state.sgd[1].step(&task)?;
            Ok(())
        })();
        for h in &heads {
            h.set_requires_grad(true);
        }
        self.after_task_update();
        result
    }

    /// Counts a trunk/task update and applies the one lr decay when due.
    fn after_task_update(&mut self) {
        self.state.total_task_steps += 1;
        if self.cfg.optimizer.lr_decay_at == Some(self.state.total_task_steps) {
            for s in &mut self.state.sgd {
                s.set_lr(s.lr() * self.cfg.optimizer.lr_decay_factor);
            }
        }
    }

    /// One main-loop step: exactly one SGD update of `f_T ∪ f_O` on the
    /// composed loss. Nuisance heads are bit-identical before and after.
    pub fn main_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let heads: Vec<ParamGroup> =
            self.model.group_names().iter().skip(2).map(|n| self.group(n)).collect();
        for h in &heads {
            h.set_requires_grad(false);
        }
        let result = self.main_step_inner(batch);
        for h in &heads {
            h.set_requires_grad(true);
        }
        let report = result?;

        self.state.iteration += 1;
        self.state.restart_clock += 1;
        self.after_task_update();
        self.state.last_head_acc = report.head_acc.clone();
        Ok(report)
    }

    fn main_step_inner(&mut self, batch: &Batch) -> Result<StepReport> {
        let tape = Tape::new();
        let out = self.model.forward(&tape, &batch.images)?;
        let inputs = ComposeInputs {
            class_logits: &out.class_logits,
            box_pred: &out.box_pred,
            labels: &batch.labels,
            boxes: &batch.boxes,
            nuisance_logits: &out.nuisance_logits,
            nuisance_labels: Some(&batch.nuisances),
            gammas: &self.cfg.gammas,
        };
        let (total, breakdown) = losses::compose(&tape, self.cfg.mode.loss_mode(), &inputs)?;
        if !breakdown.is_finite() {
            return Err(Error::Numerical {
                iteration: self.state.iteration,
                msg: format!("non-finite loss components: {breakdown:?}"),
            });
        }
        tape.backward(&total)?;
        let trunk = self.group("f_T");
        let task = self.group("f_O");
        self.state.sgd[0].step(&trunk)?;
        self.state.sgd[1].step(&task)?;
        let head_acc = out
            .nuisance_logits
            .iter()
            .enumerate()
            .map(|(i, logits)| accuracy(logits, &batch.nuisances[i]))
            .collect();
        Ok(StepReport { breakdown, head_acc })
    }

    /// Whether the strengthening guard trips: some head at or below τ on the
    /// latest main-step batch.
    fn guard_trips(&self) -> bool {
        self.state.last_head_acc.iter().any(|&a| a <= self.cfg.tau)
    }

    /// Inner while-loop of the schedule: steps every weak head on fresh
    /// batches until all clear τ or the cap runs out. The trunk and task
    /// head are bit-identical before and after.
    pub fn strengthen_adversaries(&mut self) -> Result<StrengthenReport> {
        let k = self.model.k();
        if k == 0 || !self.guard_trips() {
            let report = StrengthenReport {
                inner_steps: vec![0; k],
                final_acc: self.state.last_head_acc.clone(),
                cap_exhausted: false,
            };
            self.state.last_strengthen = Some(report.clone());
            return Ok(report);
        }
        let report = self.fit_heads_inner(HeadPhase::Strengthen)?;
        self.state.last_strengthen = Some(report.clone());
        if report.cap_exhausted {
            self.state.warnings.push(format!(
                "iteration {}: strengthening cap {} exhausted (accuracies {:?})",
                self.state.iteration, self.cfg.strengthen_cap, report.final_acc
            ));
        }
        Ok(report)
    }

    pub fn restart_due(&self) -> bool {
        self.cfg.mode.adversarial_schedule()
            && self.model.k() > 0
            && self.state.restart_clock >= self.cfg.restart_period
    }

    /// Re-initializes every nuisance head and retrains it against the frozen
    /// trunk. `f_T ∪ f_O` are bit-identical before and after unless the
    /// destructive-restart flag re-runs task pretraining.
    pub fn restart_adversaries(&mut self) -> Result<RestartReport> {
        let k = self.model.k();
        for i in 1..=k {
            let name = format!("f_N[{i}]");
            // Reinit draws come from the restart stream; optimizer momentum
            // of the restarted group is dropped with it.
            self.model.reinit_group(&name, &mut self.state.rngs.restart)?;
            let idx = self.sgd_index(&name);
            self.state.sgd[idx].reset();
        }
        let inner = self.fit_heads_inner(HeadPhase::Restart)?;
        let report = RestartReport {
            at_iteration: self.state.iteration,
            retrain_steps: inner.inner_steps.iter().sum(),
            final_acc: inner.final_acc,
            reached_tau: !inner.cap_exhausted,
        };
        self.state.restart_clock = 0;
        self.state.restart_log.push(self.state.iteration);
        if self.cfg.destructive_restart {
            for _ in 0..self.cfg.pretrain_task_iters {
                let batch = self.next_batch()?;
                self.task_step(&batch)?;
            }
        }
        Ok(report)
    }

    /// Shared head-fitting loop used by pretraining, strengthening, and
    /// restart retraining; each phase draws from its own stream and budget.
    fn fit_heads_inner(&mut self, phase: HeadPhase) -> Result<StrengthenReport> {
        let k = self.model.k();
        let cap = match phase {
            HeadPhase::Pretrain => self.cfg.pretrain_head_cap,
            HeadPhase::Strengthen => self.cfg.strengthen_cap,
            HeadPhase::Restart => self.cfg.restart_retrain_cap,
        };
        let trunk = self.group("f_T");
        let task = self.group("f_O");
        trunk.set_requires_grad(false);
        task.set_requires_grad(false);
        let result = (|| -> Result<StrengthenReport> {
            let mut inner_steps = vec![0u64; k];
            let mut acc = vec![0.0; k];
            let mut rounds = 0u64;
            loop {
                let batch = match phase {
                    HeadPhase::Pretrain | HeadPhase::Strengthen => self.adversary_batch()?,
                    HeadPhase::Restart => self.restart_batch()?,
                };
                let tape = Tape::new();
                let features = self.model.trunk_features(&tape, &batch.images)?;
                let logits = self.model.nuisance_logits(&tape, &features)?;
                for (i, l) in logits.iter().enumerate() {
                    acc[i] = accuracy(l, &batch.nuisances[i]);
                }
                let weak: Vec<usize> =
                    (0..k).filter(|&i| acc[i] <= self.cfg.tau).collect();
                if weak.is_empty() {
                    return Ok(StrengthenReport { inner_steps, final_acc: acc, cap_exhausted: false });
                }
                if rounds >= cap {
                    return Ok(StrengthenReport { inner_steps, final_acc: acc, cap_exhausted: true });
                }
                for &i in &weak {
                    let l_n = losses::nuisance_ce(&tape, &logits[i], &batch.nuisances[i])?;
                    tape.backward(&l_n)?;
                    let name = format!("f_N[{}]", i + 1);
                    let group = self.group(&name);
                    let idx = self.sgd_index(&name);
                    self.state.sgd[idx].step(&group)?;
                    inner_steps[i] += 1;
                }
                rounds += 1;
            }
        })();
        trunk.set_requires_grad(true);
        task.set_requires_grad(true);
        result
    }

    fn fit_heads_to_tau(&mut self, phase: HeadPhase) -> Result<()> {
        let report = self.fit_heads_inner(phase)?;
        if report.cap_exhausted {
            self.state.warnings.push(format!(
                "head pretraining hit its cap with accuracies {:?}",
                report.final_acc
            ));
        }
        Ok(())
    }

    /// Builds (once) the validation set used for periodic records.
    fn ensure_val_seen(&mut self) -> Result<()> {
        if self.val_seen.is_none() {
            self.val_seen = Some(EvalSet::build(
                &self.data_cfg,
                &self.split,
                Partition::ValSeen,
                self.cfg.eval_samples,
                self.cfg.seed,
            )?);
        }
        Ok(())
    }

    /// Evaluates the current model on the cached val-seen set and stamps the
    /// record with run metadata.
    pub fn metrics_record(&mut self, breakdown: Option<LossBreakdown>) -> Result<MetricsRecord> {
        let started = std::time::Instant::now();
        self.ensure_val_seen()?;
        let set = self.val_seen.as_ref().expect("ensured above");
        let mut outcome = eval::evaluate_model(&self.model, set, self.cfg.iou_threshold)?;
        outcome.per_level = eval::per_level_rows(&self.data_cfg, &outcome.per_domain);
        Ok(MetricsRecord::assemble(
            self.state.iteration,
            self.cfg.mode.as_str().to_string(),
            self.cfg.gammas.clone(),
            Partition::ValSeen,
            outcome,
            breakdown,
            started.elapsed().as_secs_f64(),
        ))
    }

    /// Runs pretraining plus the full outer loop, emitting one record after
    /// pretraining and every `eval_interval` iterations.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord)) -> Result<()> {
        self.pretrain()?;
        let record = self.metrics_record(None)?;
        sink(&record);
        while self.state.iteration < self.cfg.iterations {
            let batch = self.next_batch()?;
            let report = self.main_step(&batch)?;
            if self.cfg.mode.adversarial_schedule() && self.model.k() > 0 {
                self.strengthen_adversaries()?;
                if self.restart_due() {
                    self.restart_adversaries()?;
                }
            }
            if self.state.iteration % self.cfg.eval_interval == 0
                || self.state.iteration == self.cfg.iterations
            {
                let record = self.metrics_record(Some(report.breakdown))?;
                sink(&record);
            }
        }
        Ok(())
    }

    /// Convenience wrapper returning the collected records.
    pub fn run_collect(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        self.run(|r| records.push(r.clone()))?;
        Ok(records)
    }
}

#[derive(Clone, Copy)]
enum HeadPhase {
    Pretrain,
    Strengthen,
    Restart,
}

fn sample_batch_from(
    cfg: &DataConfig,
    split: &DomainSplit,
    partition: Partition,
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<Batch> {
    synth::sample_batch(cfg, split, partition, batch_size, rng)
}

/// Trains one configuration end to end and returns the model plus records.
pub fn train(
    arch: &ArchConfig,
    data_cfg: &DataConfig,
    cfg: &TrainConfig,
) -> Result<(Trainer, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(arch, data_cfg, cfg)?;
    let records = trainer.run_collect()?;
    Ok((trainer, records))
}
