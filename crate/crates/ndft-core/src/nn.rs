//! Layers, initialization, SGD, and the three-part model.
//!
//! The model splits its trainable tensors into disjoint named groups that
//! the trainer updates by coordinate descent:
//!
//! - `f_T` — the shared trunk: a stack of conv→relu→pool blocks producing one
//!   feature map consumed by every head.
//! - `f_O` — the task head: one conv block plus a class-logit and a
//!   box-regression linear layer.
//! - `f_N[i]` — one small MLP per nuisance, reading a global average pool of
//!   the trunk features and emitting that nuisance's level logits.
//!
//! Weights use uniform fan-in initialization, biases start at zero, and all
//! draws come from an explicit stream so two builds from the same seed are
//! bit-identical.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Shape of the network; `levels` lists the per-nuisance level counts and
/// implicitly sets the number of nuisance heads (`k = levels.len()`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub classes: usize,
    pub trunk_channels: Vec<usize>,
    /// How many leading trunk blocks downsample 2× (the rest keep their
    /// resolution). Box regression needs the trunk output no coarser than
    /// image/4.
    pub pooled_blocks: usize,
    pub task_channels: usize,
    pub nuisance_hidden: usize,
    /// Output gain of the box head; conditions the small box-regression
    /// gradients against the larger classification ones.
    pub box_head_gain: f64,
    pub levels: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 1,
            image_size: 32,
            classes: 4,
            trunk_channels: vec![8, 16, 24],
            pooled_blocks: 2,
            task_channels: 24,
            nuisance_hidden: 32,
            box_head_gain: 0.25,
            levels: vec![3, 3, 2],
        }
    }
}

impl ArchConfig {
    pub fn k(&self) -> usize {
        self.levels.len()
    }

    /// Spatial side of the trunk output.
    pub fn feature_side(&self) -> usize {
        self.image_size >> self.pooled_blocks.min(self.trunk_channels.len())
    }

    pub fn feature_channels(&self) -> usize {
        *self.trunk_channels.last().unwrap_or(&self.in_channels)
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        if let Some(&bad) = self.levels.iter().find(|&&l| l < 2) {
            return Err(Error::Config(format!(
                "nuisance level count must be at least 2, got {bad}"
            )));
        }
        if self.trunk_channels.is_empty() {
            return Err(Error::Config("trunk needs at least one block".into()));
        }
        if self.pooled_blocks > self.trunk_channels.len() {
            return Err(Error::Config(format!(
                "pooled_blocks {} exceeds trunk depth {}",
                self.pooled_blocks,
                self.trunk_channels.len()
            )));
        }
        let div = 1usize << self.pooled_blocks;
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by trunk downsampling {div}",
                self.image_size
            )));
        }
        if !(self.box_head_gain.is_finite() && self.box_head_gain > 0.0) {
            return Err(Error::Config("box_head_gain must be positive".into()));
        }
        Ok(())
    }
}

/// Half-width of the uniform fan-in initializer: `√(6/fan_in)` keeps the
/// activation scale roughly constant through conv→relu stacks.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Prior box the regression head deviates from, roughly the dataset's mean
/// object box in normalized coordinates.
pub const BOX_PRIOR: [f64; 4] = [0.28, 0.28, 0.72, 0.72];

fn uniform_fan_in(rng: &mut StreamRng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = init_bound(fan_in);
    (0..n).map(|_| rng.uniform(-bound, bound)).collect()
}

/// 3×3-style convolution layer with per-channel bias.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    fn init(cin: usize, cout: usize, ksize: usize, stride: usize, padding: usize, rng: &mut StreamRng) -> Conv2d {
        let fan_in = cin * ksize * ksize;
        let weight = Tensor::param(
            &[cout, cin, ksize, ksize],
            uniform_fan_in(rng, fan_in, cout * cin * ksize * ksize),
        )
        .expect("conv weight shape");
        let bias = Tensor::param(&[cout], vec![0.0; cout]).expect("conv bias shape");
        Conv2d { weight, bias, stride, padding }
    }

    fn reinit(&self, rng: &mut StreamRng) {
        let s = self.weight.shape().to_vec();
        let fan_in = s[1] * s[2] * s[3];
        let fresh = uniform_fan_in(rng, fan_in, self.weight.numel());
        self.weight.data_mut().copy_from_slice(&fresh);
        self.weight.zero_grad();
        self.bias.data_mut().fill(0.0);
        self.bias.zero_grad();
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let y = tape.conv2d(x, &self.weight, self.stride, self.padding)?;
        tape.bias_add_channel(&y, &self.bias)
    }

    fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Fully connected layer; weight is stored `(in × out)`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(input: usize, output: usize, rng: &mut StreamRng) -> Linear {
        let weight =
            Tensor::param(&[input, output], uniform_fan_in(rng, input, input * output)).expect("linear weight");
        let bias = Tensor::param(&[output], vec![0.0; output]).expect("linear bias");
        Linear { weight, bias }
    }

    fn reinit(&self, rng: &mut StreamRng) {
        let s = self.weight.shape().to_vec();
        let fresh = uniform_fan_in(rng, s[0], self.weight.numel());
        self.weight.data_mut().copy_from_slice(&fresh);
        self.weight.zero_grad();
        self.bias.data_mut().fill(0.0);
        self.bias.zero_grad();
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, &self.weight)?;
        tape.bias_add_row(&y, &self.bias)
    }

    fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Two-layer MLP head used for nuisance prediction and for leakage probes.
#[derive(Clone)]
pub struct NuisanceHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl NuisanceHead {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut StreamRng) -> NuisanceHead {
        NuisanceHead {
            fc1: Linear::init(input, hidden, rng),
            fc2: Linear::init(hidden, output, rng),
        }
    }

    fn reinit(&self, rng: &mut StreamRng) {
        self.fc1.reinit(rng);
        self.fc2.reinit(rng);
    }

    /// `x` is a `(B × input)` matrix of features.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.relu(&self.fc1.forward(tape, x)?)?;
        self.fc2.forward(tape, &h)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut p = self.fc1.params(&format!("{prefix}/fc1"));
        p.extend(self.fc2.params(&format!("{prefix}/fc2")));
        p
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.weight.shape()[1]
    }
}

/// A named, disjoint set of trainable tensors.
#[derive(Clone)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<(String, Tensor)>,
}

impl ParamGroup {
    pub fn set_requires_grad(&self, on: bool) {
        for (_, t) in &self.params {
            t.set_requires_grad(on);
        }
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bit-level fingerprint over names and data, for isolation checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.params {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= t.bit_fingerprint();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Outputs of a full forward pass.
pub struct ModelOut {
    pub features: Tensor,
    pub class_logits: Tensor,
    pub box_pred: Tensor,
    pub nuisance_logits: Vec<Tensor>,
}

/// Shared trunk, task head, and nuisance heads with disjoint param groups.
pub struct NdftModel {
    pub cfg: ArchConfig,
    trunk: Vec<Conv2d>,
    task_conv: Conv2d,
    class_head: Linear,
    box_head: Linear,
    nuisance_heads: Vec<NuisanceHead>,
}

impl NdftModel {
    /// Builds and initializes the model. `k = 0` (empty `levels`) yields a
    /// pure task model with no nuisance heads.
    pub fn build(cfg: &ArchConfig, rng: &mut StreamRng) -> Result<NdftModel> {
        cfg.validate()?;
        let mut trunk = Vec::new();
        let mut cin = cfg.in_channels;
        for &cout in &cfg.trunk_channels {
            trunk.push(Conv2d::init(cin, cout, 3, 1, 1, rng));
            cin = cout;
        }
        let feat_side = cfg.feature_side();
        let task_conv = Conv2d::init(cin, cfg.task_channels, 3, 1, 1, rng);
        let flat = cfg.task_channels * feat_side * feat_side;
        let class_head = Linear::init(flat, cfg.classes, rng);
        let box_head = Linear::init(flat, 4, rng);
        let nuisance_heads = cfg
            .levels
            .iter()
            .map(|&lv| NuisanceHead::init(cin, cfg.nuisance_hidden, lv, rng))
            .collect();
        Ok(NdftModel { cfg: cfg.clone(), trunk, task_conv, class_head, box_head, nuisance_heads })
    }

    pub fn k(&self) -> usize {
        self.nuisance_heads.len()
    }

    /// `f_T`: conv→relu blocks over `(B×C×H×W)` images; the first
    /// `pooled_blocks` blocks downsample 2×.
    pub fn trunk_features(&self, tape: &Tape, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for (i, block) in self.trunk.iter().enumerate() {
            let y = tape.relu(&block.forward(tape, &x)?)?;
            x = if i < self.cfg.pooled_blocks {
                tape.max_pool2d(&y, 2, 2)?
            } else {
                y
            };
        }
        Ok(x)
    }

    /// `f_O`: task conv block then class and box linear heads. The box head
    /// regresses a deviation from a fixed central prior box (the one-object
    /// stand-in for a detector's anchors).
    pub fn task_outputs(&self, tape: &Tape, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let y = tape.relu(&self.task_conv.forward(tape, features)?)?;
        let b = y.shape()[0];
        let flat = tape.reshape(&y, &[b, y.numel() / b])?;
        let class_logits = self.class_head.forward(tape, &flat)?;
        let box_raw = self.box_head.forward(tape, &flat)?;
        let dev = tape.scale(&box_raw, self.cfg.box_head_gain)?;
        let prior = Tensor::new(&[b, 4], BOX_PRIOR.repeat(b))?;
        let box_pred = tape.add(&dev, &prior)?;
        Ok((class_logits, box_pred))
    }

    /// All nuisance heads applied to the pooled trunk features.
    pub fn nuisance_logits(&self, tape: &Tape, features: &Tensor) -> Result<Vec<Tensor>> {
        if self.nuisance_heads.is_empty() {
            return Ok(Vec::new());
        }
        let pooled = tape.global_avg_pool(features)?;
        self.nuisance_heads
            .iter()
            .map(|head| head.forward(tape, &pooled))
            .collect()
    }

    pub fn forward(&self, tape: &Tape, images: &Tensor) -> Result<ModelOut> {
        let expect = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if images.shape().len() != 4 || images.shape()[1..] != expect {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: images.shape().to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let features = self.trunk_features(tape, images)?;
        let (class_logits, box_pred) = self.task_outputs(tape, &features)?;
        let nuisance_logits = self.nuisance_logits(tape, &features)?;
        Ok(ModelOut { features, class_logits, box_pred, nuisance_logits })
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut names = vec!["f_T".to_string(), "f_O".to_string()];
        for i in 1..=self.k() {
            names.push(format!("f_N[{i}]"));
        }
        names
    }

    pub fn group(&self, name: &str) -> Result<ParamGroup> {
        let params = match name {
            "f_T" => self
                .trunk
                .iter()
                .enumerate()
                .flat_map(|(i, c)| c.params(&format!("f_T/conv{i}")))
                .collect(),
            "f_O" => {
                let mut p = self.task_conv.params("f_O/conv");
                p.extend(self.class_head.params("f_O/cls"));
                p.extend(self.box_head.params("f_O/box"));
                p
            }
            _ => {
                let idx = parse_nuisance_group(name, self.k())?;
                self.nuisance_heads[idx].params(&format!("f_N[{}]", idx + 1))
            }
        };
        Ok(ParamGroup { name: name.to_string(), params })
    }

    /// All groups in canonical order: `f_T`, `f_O`, `f_N[1..k]`.
    pub fn groups(&self) -> Vec<ParamGroup> {
        self.group_names()
            .iter()
            .map(|n| self.group(n).expect("canonical group"))
            .collect()
    }

    /// Every named parameter across all groups.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.groups().into_iter().flat_map(|g| g.params).collect()
    }

    /// Redraws one group from the initializer distribution; other groups are
    /// untouched. Stale gradients of the group are cleared.
    pub fn reinit_group(&self, name: &str, rng: &mut StreamRng) -> Result<()> {
        match name {
            "f_T" => {
                for c in &self.trunk {
                    c.reinit(rng);
                }
            }
            "f_O" => {
                self.task_conv.reinit(rng);
                self.class_head.reinit(rng);
                self.box_head.reinit(rng);
            }
            _ => {
                let idx = parse_nuisance_group(name, self.k())?;
                self.nuisance_heads[idx].reinit(rng);
            }
        }
        Ok(())
    }

    pub fn nuisance_head(&self, i: usize) -> &NuisanceHead {
        &self.nuisance_heads[i]
    }

    /// Deep copy with fresh storage (used for evaluation snapshots).
    pub fn deep_clone(&self) -> NdftModel {
        let clone_conv = |c: &Conv2d| Conv2d {
            weight: c.weight.detached_clone(),
            bias: c.bias.detached_clone(),
            stride: c.stride,
            padding: c.padding,
        };
        let clone_lin = |l: &Linear| Linear {
            weight: l.weight.detached_clone(),
            bias: l.bias.detached_clone(),
        };
        NdftModel {
            cfg: self.cfg.clone(),
            trunk: self.trunk.iter().map(clone_conv).collect(),
            task_conv: clone_conv(&self.task_conv),
            class_head: clone_lin(&self.class_head),
            box_head: clone_lin(&self.box_head),
            nuisance_heads: self
                .nuisance_heads
                .iter()
                .map(|h| NuisanceHead { fc1: clone_lin(&h.fc1), fc2: clone_lin(&h.fc2) })
                .collect(),
        }
    }
}

fn parse_nuisance_group(name: &str, k: usize) -> Result<usize> {
    let idx = name
        .strip_prefix("f_N[")
        .and_then(|s| s.strip_suffix(']'))
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::UnknownGroup(name.to_string()))?;
    if idx == 0 || idx > k {
        return Err(Error::UnknownGroup(name.to_string()));
    }
    Ok(idx - 1)
}

/// SGD with momentum hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// One 10×-style decay at this iteration, if set.
    pub lr_decay_at: Option<u64>,
    pub lr_decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.02, momentum: 0.9, lr_decay_at: Some(3400), lr_decay_factor: 0.1 }
    }
}

/// Per-group optimizer slots: `v ← μv + g`, `p ← p − lr·v`.
pub struct SgdState {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(group: &ParamGroup, cfg: &SgdConfig) -> SgdState {
        SgdState {
            lr: cfg.lr,
            momentum: cfg.momentum,
            velocity: group.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one step to every tensor in `group` and zeroes their
    /// gradients. Tensors outside the group are untouched.
    pub fn step(&mut self, group: &ParamGroup) -> Result<()> {
        debug_assert_eq!(self.velocity.len(), group.params.len());
        for ((name, t), v) in group.params.iter().zip(self.velocity.iter_mut()) {
            let g = t.grad().ok_or_else(|| Error::MissingGrad {
                context: "sgd_step",
                name: name.clone(),
            })?;
            let mut data = t.data_mut();
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] + g[i];
                data[i] -= self.lr * v[i];
            }
            drop(data);
            t.zero_grad();
        }
        Ok(())
    }

    /// Drops accumulated momentum (used after a group restart).
    pub fn reset(&mut self) {
        for v in &mut self.velocity {
            v.fill(0.0);
        }
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn restore_velocities(&mut self, v: Vec<Vec<f64>>) -> Result<()> {
        if v.len() != self.velocity.len()
            || v.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Config("velocity layout mismatch".into()));
        }
        self.velocity = v;
        Ok(())
    }
}
