//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Forward ops are methods on [`Tape`]. Each op validates shapes, computes
//! its output, and — when the tape is recording and any input is tracked —
//! pushes an entry with the rule needed to run its vector-Jacobian product.
//! [`Tape::backward`] replays entries in reverse, accumulating gradients
//! additively into every tracked tensor, so a leaf used several times
//! receives the sum of its contributions.
//!
//! The engine is fp64 throughout and strictly single-threaded. Replaying the
//! same graph on the same inputs yields bit-identical values and gradients:
//! there is no parallelism and no reassociation anywhere in the kernels.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Records forward operations and replays them backward.
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
    recording: bool,
}

struct Entry {
    inputs: Vec<Tensor>,
    output: Tensor,
    rule: Rule,
}

enum Rule {
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Conv2d { stride: usize, padding: usize },
    BiasChannel,
    BiasRow,
    Relu,
    MaxPool { argmax: Vec<usize> },
    GlobalAvgPool,
    Reshape,
    Concat { axis: usize },
    Softmax { axis: usize },
    Log,
    XLogX,
    SmoothL1,
    GatherRows { idx: Vec<usize> },
    Sum,
    Mean,
}

fn check_finite(op: &'static str, data: &[f64]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "{op}: non-finite value in output"
    );
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Tape {
        Tape {
            entries: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A non-recording tape for pure inference; outputs are untracked.
    pub fn no_grad() -> Tape {
        Tape {
            entries: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    fn finish(&self, op: &'static str, inputs: &[&Tensor], output: Tensor, rule: Rule) -> Tensor {
        check_finite(op, &output.data());
        if self.recording && inputs.iter().any(|t| t.requires_grad()) {
            output.set_requires_grad(true);
            self.entries.borrow_mut().push(Entry {
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: output.clone(),
                rule,
            });
        }
        output
    }

    // ───── elementwise ─────

    fn zip(&self, op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64, rule: Rule) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape(), out)?;
        Ok(self.finish(op, &[a, b], out, rule))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("add", a, b, |x, y| x + y, Rule::Add)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("sub", a, b, |x, y| x - y, Rule::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("mul", a, b, |x, y| x * y, Rule::Mul)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&x| c * x).collect();
        let out = Tensor::new(a.shape(), out)?;
        Ok(self.finish("scale", &[a], out, Rule::Scale(c)))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(a.shape(), out)?;
        Ok(self.finish("relu", &[a], out, Rule::Relu))
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::new(a.shape(), out)?;
        Ok(self.finish("log", &[a], out, Rule::Log))
    }

    /// `x ln x` with the `0 ln 0 := 0` convention.
    pub fn xlogx(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a
            .data()
            .iter()
            .map(|&x| if x == 0.0 { 0.0 } else { x * x.ln() })
            .collect();
        let out = Tensor::new(a.shape(), out)?;
        Ok(self.finish("xlogx", &[a], out, Rule::XLogX))
    }

    /// Elementwise smooth-ℓ1: `0.5 x²` for `|x| < 1`, else `|x| − 0.5`.
    pub fn smooth_l1(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a
            .data()
            .iter()
            .map(|&x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 })
            .collect();
        let out = Tensor::new(a.shape(), out)?;
        Ok(self.finish("smooth_l1", &[a], out, Rule::SmoothL1))
    }

    // ───── linear algebra ─────

    /// `a (m×k) @ b (k×n) → (m×n)`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: ash, rhs: bsh });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(&a.data(), &b.data(), m, k, n, &mut out);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.finish("matmul", &[a, b], out, Rule::MatMul))
    }

    /// Adds a per-feature bias to a `(B×F)` matrix.
    pub fn bias_add_row(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let xs = x.shape().to_vec();
        if xs.len() != 2 || bias.shape() != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add_row",
                lhs: xs,
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let out: Vec<f64> = x
            .data()
            .chunks(xs[1])
            .flat_map(|row| row.iter().zip(b.iter()).map(|(&v, &bv)| v + bv).collect::<Vec<_>>())
            .collect();
        let out = Tensor::new(&xs, out)?;
        Ok(self.finish("bias_add_row", &[x, bias], out, Rule::BiasRow))
    }

    /// Adds a per-channel bias to a `(B×C×H×W)` map.
    pub fn bias_add_channel(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let xs = x.shape().to_vec();
        if xs.len() != 4 || bias.shape() != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add_channel",
                lhs: xs,
                rhs: bias.shape().to_vec(),
            });
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let bv = bias.data();
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bsz {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let add = bv[ci];
                for i in 0..plane {
                    out[base + i] = xd[base + i] + add;
                }
            }
        }
        drop(xd);
        let out = Tensor::new(&xs, out)?;
        Ok(self.finish("bias_add_channel", &[x, bias], out, Rule::BiasChannel))
    }

    /// 2-D convolution, NCHW input, `(Cout×Cin×Kh×Kw)` kernel, zero padding.
    pub fn conv2d(&self, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        if stride == 0 {
            return Err(Error::InvalidArg { op: "conv2d", msg: "stride must be positive".into() });
        }
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::InvalidArg {
                op: "conv2d",
                msg: format!("kernel {kh}×{kw} larger than padded input {h}×{wd} (pad {padding})"),
            });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; b * cout * ho * wo];
        conv2d_fwd(
            &x.data(),
            (b, cin, h, wd),
            &w.data(),
            (cout, kh, kw),
            stride,
            padding,
            &mut out,
            (ho, wo),
        );
        let out = Tensor::new(&[b, cout, ho, wo], out)?;
        Ok(self.finish("conv2d", &[x, w], out, Rule::Conv2d { stride, padding }))
    }

    /// Max pooling with square window `k` and the given stride, no padding.
    pub fn max_pool2d(&self, x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
        let xs = x.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidArg {
                op: "max_pool2d",
                msg: format!("expected 4-d input, got {:?}", xs),
            });
        }
        if k == 0 || stride == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::InvalidArg {
                op: "max_pool2d",
                msg: format!("window {k} stride {stride} invalid for {:?}", xs),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let xd = x.data();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..b * c {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (bc * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = bc * h * w + best_idx;
                }
            }
        }
        drop(xd);
        let out = Tensor::new(&[b, c, ho, wo], out)?;
        Ok(self.finish("max_pool2d", &[x], out, Rule::MaxPool { argmax }))
    }

    /// Spatial mean per channel: `(B×C×H×W) → (B×C)`.
    pub fn global_avg_pool(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidArg {
                op: "global_avg_pool",
                msg: format!("expected 4-d input, got {:?}", xs),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let xd = x.data();
        let out: Vec<f64> = (0..b * c)
            .map(|bc| xd[bc * plane..(bc + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        drop(xd);
        let out = Tensor::new(&[b, c], out)?;
        Ok(self.finish("global_avg_pool", &[x], out, Rule::GlobalAvgPool))
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape, x.data().clone())?;
        Ok(self.finish("reshape", &[x], out, Rule::Reshape))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::InvalidArg { op: "concat", msg: "no inputs".into() });
        }
        let first = xs[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArg {
                op: "concat",
                msg: format!("axis {axis} out of range for {:?}", first),
            });
        }
        let mut axis_total = 0;
        for t in xs {
            let s = t.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut dst = o * axis_total * inner;
            for t in xs {
                let len = t.shape()[axis] * inner;
                let src = o * len;
                out[dst..dst + len].copy_from_slice(&t.data()[src..src + len]);
                dst += len;
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        let inputs: Vec<&Tensor> = xs.to_vec();
        Ok(self.finish("concat", &inputs, out, Rule::Concat { axis }))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let xs = x.shape().to_vec();
        if axis >= xs.len() {
            return Err(Error::InvalidArg {
                op: "softmax",
                msg: format!("axis {axis} out of range for {:?}", xs),
            });
        }
        let n = xs[axis];
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(xd[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        drop(xd);
        let out = Tensor::new(&xs, out)?;
        Ok(self.finish("softmax", &[x], out, Rule::Softmax { axis }))
    }

    /// Picks `x[b, idx[b]]` from a `(B×C)` matrix → `(B)`.
    pub fn gather_rows(&self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let xs = x.shape().to_vec();
        if xs.len() != 2 || idx.len() != xs[0] {
            return Err(Error::InvalidArg {
                op: "gather_rows",
                msg: format!("need (B×C) input with B indices, got {:?} and {}", xs, idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= xs[1]) {
            return Err(Error::InvalidArg {
                op: "gather_rows",
                msg: format!("index {bad} out of range for {} columns", xs[1]),
            });
        }
        let xd = x.data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(b, &j)| xd[b * xs[1] + j]).collect();
        drop(xd);
        let out = Tensor::new(&[xs[0]], out)?;
        Ok(self.finish("gather_rows", &[x], out, Rule::GatherRows { idx: idx.to_vec() }))
    }

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        let out = Tensor::scalar(s);
        Ok(self.finish("sum", &[x], out, Rule::Sum))
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        let out = Tensor::scalar(s / x.numel() as f64);
        Ok(self.finish("mean", &[x], out, Rule::Mean))
    }

    // ───── backward ─────

    /// Propagates `d loss / d ·` into every tracked leaf reachable from
    /// `loss`. Leaf gradients accumulate across passes; intermediate
    /// gradients are consumed during the traversal, so each entry's
    /// contribution is counted exactly once.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        if !loss.requires_grad() {
            return Err(Error::InvalidArg {
                op: "backward",
                msg: "loss is not tracked by this tape".into(),
            });
        }
        loss.accumulate_grad(&[1.0]);
        let entries = self.entries.borrow();
        for e in entries.iter().rev() {
            let Some(gout) = e.output.take_grad() else { continue };
            backward_entry(e, &gout);
        }
        Ok(())
    }
}

fn backward_entry(e: &Entry, gout: &[f64]) {
    let wants = |i: usize| e.inputs[i].requires_grad();
    match &e.rule {
        Rule::Add => {
            if wants(0) {
                e.inputs[0].accumulate_grad(gout);
            }
            if wants(1) {
                e.inputs[1].accumulate_grad(gout);
            }
        }
        Rule::Sub => {
            if wants(0) {
                e.inputs[0].accumulate_grad(gout);
            }
            if wants(1) {
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                e.inputs[1].accumulate_grad(&neg);
            }
        }
        Rule::Mul => {
            if wants(0) {
                let contrib: Vec<f64> =
                    gout.iter().zip(e.inputs[1].data().iter()).map(|(g, y)| g * y).collect();
                e.inputs[0].accumulate_grad(&contrib);
            }
            if wants(1) {
                let contrib: Vec<f64> =
                    gout.iter().zip(e.inputs[0].data().iter()).map(|(g, x)| g * x).collect();
                e.inputs[1].accumulate_grad(&contrib);
            }
        }
        Rule::Scale(c) => {
            if wants(0) {
                let contrib: Vec<f64> = gout.iter().map(|g| c * g).collect();
                e.inputs[0].accumulate_grad(&contrib);
            }
        }
        Rule::MatMul => {
            let (m, k) = (e.inputs[0].shape()[0], e.inputs[0].shape()[1]);
            let n = e.inputs[1].shape()[1];
            if wants(0) {
                // dA = G @ Bᵀ
                let mut da = vec![0.0; m * k];
                matmul_nt(gout, &e.inputs[1].data(), m, n, k, &mut da);
                e.inputs[0].accumulate_grad(&da);
            }
            if wants(1) {
                // dB = Aᵀ @ G
                let mut db = vec![0.0; k * n];
                matmul_tn(&e.inputs[0].data(), gout, m, k, n, &mut db);
                e.inputs[1].accumulate_grad(&db);
            }
        }
        Rule::Conv2d { stride, padding } => {
            let xs = e.inputs[0].shape().to_vec();
            let ws = e.inputs[1].shape().to_vec();
            let os = e.output.shape().to_vec();
            let dims_x = (xs[0], xs[1], xs[2], xs[3]);
            let dims_w = (ws[0], ws[2], ws[3]);
            let dims_o = (os[2], os[3]);
            if wants(0) {
                let mut dx = vec![0.0; e.inputs[0].numel()];
                conv2d_bwd_input(gout, dims_x, &e.inputs[1].data(), dims_w, *stride, *padding, &mut dx, dims_o);
                e.inputs[0].accumulate_grad(&dx);
            }
            if wants(1) {
                let mut dw = vec![0.0; e.inputs[1].numel()];
                conv2d_bwd_weight(gout, &e.inputs[0].data(), dims_x, dims_w, *stride, *padding, &mut dw, dims_o);
                e.inputs[1].accumulate_grad(&dw);
            }
        }
        Rule::BiasChannel => {
            if wants(0) {
                e.inputs[0].accumulate_grad(gout);
            }
            if wants(1) {
                let xs = e.inputs[0].shape();
                let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        db[ci] += gout[base..base + plane].iter().sum::<f64>();
                    }
                }
                e.inputs[1].accumulate_grad(&db);
            }
        }
        Rule::BiasRow => {
            if wants(0) {
                e.inputs[0].accumulate_grad(gout);
            }
            if wants(1) {
                let f = e.inputs[0].shape()[1];
                let mut db = vec![0.0; f];
                for row in gout.chunks(f) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                e.inputs[1].accumulate_grad(&db);
            }
        }
        Rule::Relu => {
            if wants(0) {
                let contrib: Vec<f64> = gout
                    .iter()
                    .zip(e.inputs[0].data().iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                e.inputs[0].accumulate_grad(&contrib);
            }
        }
        Rule::MaxPool { argmax } => {
            if wants(0) {
                let mut dx = vec![0.0; e.inputs[0].numel()];
                for (g, &src) in gout.iter().zip(argmax) {
                    dx[src] += g;
                }
                e.inputs[0].accumulate_grad(&dx);
            }
        }
        Rule::GlobalAvgPool => {
            if wants(0) {
                let xs = e.inputs[0].shape();
                let plane = xs[2] * xs[3];
                let inv = 1.0 / plane as f64;
                let mut dx = vec![0.0; e.inputs[0].numel()];
                for (bc, g) in gout.iter().enumerate() {
                    let v = g * inv;
                    for d in &mut dx[bc * plane..(bc + 1) * plane] {
                        *d = v;
                    }
                }
                e.inputs[0].accumulate_grad(&dx);
            }
        }
        Rule::Reshape => {
            if wants(0) {
                e.inputs[0].accumulate_grad(gout);
            }
        }
        Rule::Concat { axis } => {
            let shape = e.output.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for t in &e.inputs {
                let len = t.shape()[*axis] * inner;
                if t.requires_grad() {
                    let mut dx = vec![0.0; t.numel()];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        dx[o * len..(o + 1) * len].copy_from_slice(&gout[src..src + len]);
                    }
                    t.accumulate_grad(&dx);
                }
                offset += t.shape()[*axis];
            }
        }
        Rule::Softmax { axis } => {
            if wants(0) {
                let shape = e.output.shape();
                let n = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let y = e.output.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                drop(y);
                e.inputs[0].accumulate_grad(&dx);
            }
        }
        Rule::Log => {
            if wants(0) {
                let contrib: Vec<f64> =
                    gout.iter().zip(e.inputs[0].data().iter()).map(|(g, x)| g / x).collect();
                e.inputs[0].accumulate_grad(&contrib);
            }
        }
        Rule::XLogX => {
            if wants(0) {
                let contrib: Vec<f64> = gout
                    .iter()
                    .zip(e.inputs[0].data().iter())
                    .map(|(g, &x)| if x == 0.0 { 0.0 } else { g * (x.ln() + 1.0) })
                    .collect();
                e.inputs[0].accumulate_grad(&contrib);
            }
        }
        Rule::SmoothL1 => {
            if wants(0) {
                let contrib: Vec<f64> = gout
                    .iter()
                    .zip(e.inputs[0].data().iter())
                    .map(|(g, &x)| g * if x.abs() < 1.0 { x } else { x.signum() })
                    .collect();
                e.inputs[0].accumulate_grad(&contrib);
            }
        }
        Rule::GatherRows { idx } => {
            if wants(0) {
                let cols = e.inputs[0].shape()[1];
                let mut dx = vec![0.0; e.inputs[0].numel()];
                for (b, (&j, g)) in idx.iter().zip(gout).enumerate() {
                    dx[b * cols + j] += g;
                }
                e.inputs[0].accumulate_grad(&dx);
            }
        }
        Rule::Sum => {
            if wants(0) {
                let contrib = vec![gout[0]; e.inputs[0].numel()];
                e.inputs[0].accumulate_grad(&contrib);
            }
        }
        Rule::Mean => {
            if wants(0) {
                let n = e.inputs[0].numel();
                let contrib = vec![gout[0] / n as f64; n];
                e.inputs[0].accumulate_grad(&contrib);
            }
        }
    }
}

// ───── kernels ─────

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out (m×k) = a (m×n) @ bᵀ` where `b` is `(k×n)` row-major.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for l in 0..n {
                acc += arow[l] * brow[l];
            }
            out[i * k + j] += acc;
        }
    }
}

/// `out (k×n) = aᵀ @ b` where `a` is `(m×k)` and `b` is `(m×n)` row-major.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..k {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Valid output-x range for one kernel column: `ox` such that
/// `0 ≤ ox·stride + kx − pad < extent`.
fn ox_range(extent: usize, out_extent: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi_excl = if extent + pad > kx {
        (((extent + pad - kx - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd(
    x: &[f64],
    (b, cin, h, w): (usize, usize, usize, usize),
    wgt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    out: &mut [f64],
    (ho, wo): (usize, usize),
) {
    for bi in 0..b {
        for co in 0..cout {
            let out_plane = &mut out[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
            for ci in 0..cin {
                let x_plane = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = ox_range(h, ho, stride, ky, pad);
                    for kx in 0..kw {
                        let wv = wgt[((co * cin + ci) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = ox_range(w, wo, stride, kx, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = &x_plane[iy * w..(iy + 1) * w];
                            let orow = &mut out_plane[oy * wo..(oy + 1) * wo];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_input(
    gout: &[f64],
    (b, cin, h, w): (usize, usize, usize, usize),
    wgt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    dx: &mut [f64],
    (ho, wo): (usize, usize),
) {
    for bi in 0..b {
        for co in 0..cout {
            let g_plane = &gout[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
            for ci in 0..cin {
                let dx_plane = &mut dx[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = ox_range(h, ho, stride, ky, pad);
                    for kx in 0..kw {
                        let wv = wgt[((co * cin + ci) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = ox_range(w, wo, stride, kx, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let drow = &mut dx_plane[iy * w..(iy + 1) * w];
                            let grow = &g_plane[oy * wo..(oy + 1) * wo];
                            for ox in ox_lo..ox_hi {
                                drow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_weight(
    gout: &[f64],
    x: &[f64],
    (b, cin, h, w): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    dw: &mut [f64],
    (ho, wo): (usize, usize),
) {
    for bi in 0..b {
        for co in 0..cout {
            let g_plane = &gout[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
            for ci in 0..cin {
                let x_plane = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = ox_range(h, ho, stride, ky, pad);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = ox_range(w, wo, stride, kx, pad);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = &x_plane[iy * w..(iy + 1) * w];
                            let grow = &g_plane[oy * wo..(oy + 1) * wo];
                            for ox in ox_lo..ox_hi {
                                acc += grow[ox] * xrow[ox * stride + kx - pad];
                            }
                        }
                        dw[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, StreamRng};

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    /// Brute-force convolution by the definition, used as the oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv_reference(
        x: &[f64],
        (b, cin, h, w): (usize, usize, usize, usize),
        wgt: &[f64],
        (cout, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * wgt[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = tape.matmul(&a, &id).unwrap();
        assert_eq!(*y.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let tape = Tape::new();
        let x = t(&[1, 3], vec![0.0, 0.0, 0.0]);
        let y = tape.softmax(&x, 1).unwrap();
        for v in y.data().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv2d_ones_matches_direct_summation() {
        let tape = Tape::new();
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = tape.conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv2d_matches_reference_on_random_cases() {
        let mut rng = StreamRng::stream(42, Stream::Init);
        for &(b, cin, cout, h, w, kh, stride, pad) in &[
            (1usize, 1usize, 1usize, 5usize, 5usize, 3usize, 1usize, 0usize),
            (2, 3, 4, 6, 5, 3, 1, 1),
            (1, 2, 3, 7, 7, 3, 2, 1),
            (2, 1, 2, 4, 4, 2, 2, 0),
            (1, 3, 2, 5, 6, 1, 1, 0),
        ] {
            let x: Vec<f64> = (0..b * cin * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let wg: Vec<f64> = (0..cout * cin * kh * kh).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let tape = Tape::new();
            let y = tape
                .conv2d(&t(&[b, cin, h, w], x.clone()), &t(&[cout, cin, kh, kh], wg.clone()), stride, pad)
                .unwrap();
            let want = conv_reference(&x, (b, cin, h, w), &wg, (cout, kh, kh), stride, pad);
            for (got, want) in y.data().iter().zip(&want) {
                assert!((got - want).abs() < 1e-12, "conv mismatch: {got} vs {want}");
            }
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, -1.0]).unwrap();
        let a = tape.add(&x, &x).unwrap(); // 2x
        let loss = tape.sum(&a).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        match tape.backward(&y) {
            Err(Error::NonScalarLoss { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn frozen_inputs_receive_no_grad() {
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        w.set_requires_grad(false);
        let y = tape.mul(&x, &w).unwrap();
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
        assert!(!w.has_grad());
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::no_grad();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        assert!(tape.is_empty());
        assert!(!y.requires_grad());
    }

    #[test]
    fn shape_mismatch_is_reported_with_op_and_shapes() {
        let tape = Tape::new();
        let a = t(&[2, 3], vec![0.0; 6]);
        let b = t(&[3, 3], vec![0.0; 9]);
        match tape.add(&a, &b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let tape = Tape::new();
        let x = Tensor::param(&[1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let y = tape.max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data()[0], 5.0);
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_round_trips_gradient() {
        let tape = Tape::new();
        let a = Tensor::param(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(&[1, 3], vec![3.0, 4.0, 5.0]).unwrap();
        let y = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(*y.data(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = t(&[1, 5], vec![1.0, 10.0, 100.0, 1000.0, 10000.0]);
        let loss = tape.sum(&tape.mul(&y, &w).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 10.0]);
        assert_eq!(b.grad().unwrap(), vec![100.0, 1000.0, 10000.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = StreamRng::stream(9, Stream::Init);
        let xs: Vec<f64> = (0..48).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ws: Vec<f64> = (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let run = || {
            let tape = Tape::new();
            let x = Tensor::param(&[1, 2, 4, 6], xs.clone()).unwrap();
            let w = Tensor::param(&[1, 2, 3, 3], ws.clone()).unwrap();
            let y = tape.conv2d(&x, &w, 1, 1).unwrap();
            let r = tape.relu(&y).unwrap();
            let p = tape.global_avg_pool(&r).unwrap();
            let s = tape.softmax(&p, 1).unwrap();
            let loss = tape.mean(&tape.xlogx(&s).unwrap()).unwrap();
            tape.backward(&loss).unwrap();
            (
                loss.scalar_value().unwrap().to_bits(),
                x.grad().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                w.grad().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad of (a·f + b·g) == a·grad f + b·grad g
        let mut rng = StreamRng::stream(21, Stream::Init);
        let xs: Vec<f64> = (0..6).map(|_| rng.uniform(0.2, 1.5)).collect();
        let (ca, cb) = (0.7, -1.3);

        let grad_with = |wf: f64, wg: f64| -> Vec<f64> {
            let tape = Tape::new();
            let x = Tensor::param(&[2, 3], xs.clone()).unwrap();
            let f = tape.sum(&tape.mul(&x, &x).unwrap()).unwrap();
            let g = tape.mean(&tape.log(&x).unwrap()).unwrap();
            let fa = tape.scale(&f, wf).unwrap();
            let gb = tape.scale(&g, wg).unwrap();
            let loss = tape.add(&fa, &gb).unwrap();
            tape.backward(&loss).unwrap();
            x.grad().unwrap()
        };

        let gf = grad_with(1.0, 0.0);
        let gg = grad_with(0.0, 1.0);
        let gmix = grad_with(ca, cb);
        for i in 0..xs.len() {
            assert!((gmix[i] - (ca * gf[i] + cb * gg[i])).abs() < 1e-10);
        }
    }
}
