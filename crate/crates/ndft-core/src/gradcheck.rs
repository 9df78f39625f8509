//! Finite-difference verification of tape gradients.
//!
//! Central differences with step `h` are compared against the tape's
//! gradients, coordinate by coordinate. The relative error uses a floor of
//! `1e-6` in the denominator so coordinates whose true gradient is zero
//! compare against the absolute scale of finite-difference noise instead of
//! dividing by zero.

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar function of several tensors, differentiable on the given tape.
pub trait ScalarFn: Fn(&Tape, &[Tensor]) -> Result<Tensor> {}
impl<F: Fn(&Tape, &[Tensor]) -> Result<Tensor>> ScalarFn for F {}

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tol: f64,
    pub worst: Option<WorstCoord>,
    pub passed: bool,
}

const REL_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Evaluates `f` once and returns its value plus the tape gradient for every
/// input coordinate (zeros where no gradient flowed).
pub fn tape_gradient<F: ScalarFn>(f: &F, points: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
    let params: Vec<Tensor> = points
        .iter()
        .map(|p| {
            let t = p.detached_clone();
            t.set_requires_grad(true);
            t
        })
        .collect();
    let tape = Tape::new();
    let out = f(&tape, &params)?;
    let value = out.scalar_value().map_err(|_| Error::InvalidArg {
        op: "gradcheck",
        msg: format!("function must return a scalar, got shape {:?}", out.shape()),
    })?;
    tape.backward(&out)?;
    let grads = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    Ok((value, grads))
}

/// Central-difference gradient of `f` at `points`.
pub fn numeric_gradient<F: ScalarFn>(f: &F, points: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>> {
    let eval = |xs: &[Tensor], which: usize, coord: usize| -> Result<f64> {
        let tape = Tape::no_grad();
        let out = f(&tape, xs).map_err(|e| Error::InvalidArg {
            op: "gradcheck",
            msg: format!("function failed while perturbing input {which} coord {coord}: {e}"),
        })?;
        out.scalar_value()
    };
    let mut grads = Vec::with_capacity(points.len());
    for which in 0..points.len() {
        let mut g = vec![0.0; points[which].numel()];
        for coord in 0..g.len() {
            let mut perturbed: Vec<Tensor> = points.iter().map(|p| p.detached_clone()).collect();
            for p in &mut perturbed {
                p.set_requires_grad(false);
            }
            let base = points[which].data()[coord];
            perturbed[which].data_mut()[coord] = base + h;
            let plus = eval(&perturbed, which, coord)?;
            perturbed[which].data_mut()[coord] = base - h;
            let minus = eval(&perturbed, which, coord)?;
            g[coord] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Compares analytic against numeric gradients; exposed separately so a
/// deliberately wrong gradient can be fed in as a negative control.
pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64) -> GradCheckReport {
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut coords = 0usize;
    let mut worst = None;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
            let r = rel_err(av, nv);
            sum_rel += r;
            coords += 1;
            if r > max_rel {
                max_rel = r;
                worst = Some(WorstCoord { input: i, coord: j, analytic: av, numeric: nv });
            }
        }
    }
    GradCheckReport {
        coords,
        max_rel_err: max_rel,
        mean_rel_err: if coords > 0 { sum_rel / coords as f64 } else { 0.0 },
        tol,
        worst,
        passed: max_rel <= tol,
    }
}

/// Full check of a scalar function at one point set.
pub fn gradcheck<F: ScalarFn>(f: &F, points: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport> {
    for (i, p) in points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::InvalidArg {
                op: "gradcheck",
                msg: format!("input {i} contains non-finite values"),
            });
        }
    }
    let (_, analytic) = tape_gradient(f, points)?;
    let numeric = numeric_gradient(f, points, h)?;
    Ok(compare(&analytic, &numeric, tol))
}

// ───── standard sweep over every op and loss ─────

/// One line of the sweep report.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks every differentiable op and every loss at `points` random inputs
/// each. Points for kinked ops (relu, max-pool windows) are sampled away
/// from their kinks, where the central difference itself is valid.
pub fn standard_sweep(seed: u64, points: usize, h: f64, tol: f64) -> Result<Vec<SweepEntry>> {
    use crate::losses;
    use crate::rng::{Stream, StreamRng};

    let mut rng = StreamRng::stream(seed, Stream::Eval);
    let mut entries: Vec<SweepEntry> = Vec::new();

    let mut tensor = |shape: &[usize], lo: f64, hi: f64, rng: &mut StreamRng| -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("sweep tensor")
    };
    // Margin from zero for relu-style kinks: |x| ∈ [margin, 1].
    let kink_free = |shape: &[usize], rng: &mut StreamRng| -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let mag = rng.uniform(0.05, 1.0);
                if rng.unit() < 0.5 {
                    -mag
                } else {
                    mag
                }
            })
            .collect();
        Tensor::new(shape, data).expect("sweep tensor")
    };

    let mut check = |name: &str, reports: Vec<GradCheckReport>| {
        let mut worst: Option<GradCheckReport> = None;
        for r in reports {
            let take = match &worst {
                Some(w) => r.max_rel_err > w.max_rel_err,
                None => true,
            };
            if take {
                worst = Some(r);
            }
        }
        entries.push(SweepEntry {
            name: name.to_string(),
            report: worst.expect("at least one point"),
        });
    };

    macro_rules! sweep {
        ($name:expr, $mk_points:expr, $f:expr) => {{
            let mut reports = Vec::with_capacity(points);
            for _ in 0..points {
                let pts: Vec<Tensor> = $mk_points(&mut rng);
                reports.push(gradcheck(&$f, &pts, h, tol)?);
            }
            check($name, reports);
        }};
    }

    // Weighted sum reduces any op output to a scalar with nonuniform
    // per-coordinate gradients.
    fn weighted(tape: &Tape, t: &Tensor, w: &Tensor) -> Result<Tensor> {
        tape.sum(&tape.mul(t, w)?)
    }

    sweep!(
        "add",
        |r: &mut StreamRng| vec![tensor(&[2, 3], -1.0, 1.0, r), tensor(&[2, 3], -1.0, 1.0, r), tensor(&[2, 3], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.add(&xs[0], &xs[1])?, &xs[2])
    );
    sweep!(
        "sub",
        |r: &mut StreamRng| vec![tensor(&[2, 3], -1.0, 1.0, r), tensor(&[2, 3], -1.0, 1.0, r), tensor(&[2, 3], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.sub(&xs[0], &xs[1])?, &xs[2])
    );
    sweep!(
        "mul",
        |r: &mut StreamRng| vec![tensor(&[2, 3], -1.0, 1.0, r), tensor(&[2, 3], -1.0, 1.0, r), tensor(&[2, 3], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.mul(&xs[0], &xs[1])?, &xs[2])
    );
    sweep!(
        "scale",
        |r: &mut StreamRng| vec![tensor(&[5], -1.0, 1.0, r), tensor(&[5], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.scale(&xs[0], -1.7)?, &xs[1])
    );
    sweep!(
        "matmul",
        |r: &mut StreamRng| vec![tensor(&[3, 4], -1.0, 1.0, r), tensor(&[4, 2], -1.0, 1.0, r), tensor(&[3, 2], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.matmul(&xs[0], &xs[1])?, &xs[2])
    );
    sweep!(
        "conv2d_s1p1",
        |r: &mut StreamRng| vec![
            tensor(&[2, 2, 5, 5], -1.0, 1.0, r),
            tensor(&[3, 2, 3, 3], -1.0, 1.0, r),
            tensor(&[2, 3, 5, 5], -1.0, 1.0, r),
        ],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.conv2d(&xs[0], &xs[1], 1, 1)?, &xs[2])
    );
    sweep!(
        "conv2d_s2p0",
        |r: &mut StreamRng| vec![
            tensor(&[1, 2, 6, 6], -1.0, 1.0, r),
            tensor(&[2, 2, 3, 3], -1.0, 1.0, r),
            tensor(&[1, 2, 2, 2], -1.0, 1.0, r),
        ],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.conv2d(&xs[0], &xs[1], 2, 0)?, &xs[2])
    );
    sweep!(
        "bias_add_channel",
        |r: &mut StreamRng| vec![
            tensor(&[2, 3, 2, 2], -1.0, 1.0, r),
            tensor(&[3], -1.0, 1.0, r),
            tensor(&[2, 3, 2, 2], -1.0, 1.0, r),
        ],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.bias_add_channel(&xs[0], &xs[1])?, &xs[2])
    );
    sweep!(
        "bias_add_row",
        |r: &mut StreamRng| vec![
            tensor(&[3, 4], -1.0, 1.0, r),
            tensor(&[4], -1.0, 1.0, r),
            tensor(&[3, 4], -1.0, 1.0, r),
        ],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.bias_add_row(&xs[0], &xs[1])?, &xs[2])
    );
    sweep!(
        "relu",
        |r: &mut StreamRng| vec![kink_free(&[3, 4], r), tensor(&[3, 4], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.relu(&xs[0])?, &xs[1])
    );
    sweep!(
        "max_pool2d",
        |r: &mut StreamRng| vec![tensor(&[1, 2, 4, 4], -1.0, 1.0, r), tensor(&[1, 2, 2, 2], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.max_pool2d(&xs[0], 2, 2)?, &xs[1])
    );
    sweep!(
        "global_avg_pool",
        |r: &mut StreamRng| vec![tensor(&[2, 3, 3, 3], -1.0, 1.0, r), tensor(&[2, 3], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.global_avg_pool(&xs[0])?, &xs[1])
    );
    sweep!(
        "reshape",
        |r: &mut StreamRng| vec![tensor(&[2, 6], -1.0, 1.0, r), tensor(&[3, 4], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.reshape(&xs[0], &[3, 4])?, &xs[1])
    );
    sweep!(
        "concat",
        |r: &mut StreamRng| vec![
            tensor(&[2, 2], -1.0, 1.0, r),
            tensor(&[2, 3], -1.0, 1.0, r),
            tensor(&[2, 5], -1.0, 1.0, r),
        ],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.concat(&[&xs[0], &xs[1]], 1)?, &xs[2])
    );
    sweep!(
        "softmax",
        |r: &mut StreamRng| vec![tensor(&[2, 4], -2.0, 2.0, r), tensor(&[2, 4], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.softmax(&xs[0], 1)?, &xs[1])
    );
    sweep!(
        "log",
        |r: &mut StreamRng| vec![tensor(&[2, 3], 0.2, 2.0, r), tensor(&[2, 3], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.log(&xs[0])?, &xs[1])
    );
    sweep!(
        "xlogx",
        |r: &mut StreamRng| vec![tensor(&[2, 3], 0.05, 1.0, r), tensor(&[2, 3], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.xlogx(&xs[0])?, &xs[1])
    );
    sweep!(
        "smooth_l1",
        |r: &mut StreamRng| vec![tensor(&[2, 4], -2.0, 2.0, r), tensor(&[2, 4], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.smooth_l1(&xs[0])?, &xs[1])
    );
    sweep!(
        "gather_rows",
        |r: &mut StreamRng| vec![tensor(&[3, 4], -1.0, 1.0, r), tensor(&[3], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| weighted(tape, &tape.gather_rows(&xs[0], &[2, 0, 3])?, &xs[1])
    );
    sweep!(
        "sum",
        |r: &mut StreamRng| vec![tensor(&[2, 3], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| tape.sum(&xs[0])
    );
    sweep!(
        "mean",
        |r: &mut StreamRng| vec![tensor(&[2, 3], -1.0, 1.0, r)],
        |tape: &Tape, xs: &[Tensor]| tape.mean(&xs[0])
    );

    // Losses.
    sweep!(
        "cross_entropy",
        |r: &mut StreamRng| vec![tensor(&[3, 4], -1.5, 1.5, r)],
        |tape: &Tape, xs: &[Tensor]| losses::cross_entropy(tape, &xs[0], &[0, 2, 3], "sweep")
    );
    sweep!(
        "negative_entropy",
        |r: &mut StreamRng| vec![tensor(&[3, 3], -1.5, 1.5, r)],
        |tape: &Tape, xs: &[Tensor]| losses::negative_entropy(tape, &xs[0])
    );
    sweep!(
        "task_loss",
        |r: &mut StreamRng| vec![tensor(&[2, 3], -1.5, 1.5, r), tensor(&[2, 4], 0.0, 0.8, r)],
        |tape: &Tape, xs: &[Tensor]| {
            let target = Tensor::new(&[2, 4], vec![0.2, 0.2, 0.7, 0.7, 0.3, 0.1, 0.9, 0.6])?;
            let (l_cls, l_box) = losses::task_loss(tape, &xs[0], &xs[1], &[1, 0], &target)?;
            tape.add(&l_cls, &l_box)
        }
    );
    sweep!(
        "composed_ndft_total",
        |r: &mut StreamRng| vec![
            tensor(&[2, 3], -1.5, 1.5, r),
            tensor(&[2, 4], 0.0, 0.8, r),
            tensor(&[2, 3], -1.5, 1.5, r),
            tensor(&[2, 2], -1.5, 1.5, r),
        ],
        |tape: &Tape, xs: &[Tensor]| {
            let target = Tensor::new(&[2, 4], vec![0.2, 0.2, 0.7, 0.7, 0.3, 0.1, 0.9, 0.6])?;
            let labels = [1usize, 0];
            let nuisance_labels = vec![vec![0usize, 2], vec![1usize, 0]];
            let logits: Vec<Tensor> = vec![xs[2].clone(), xs[3].clone()];
            let inputs = losses::ComposeInputs {
                class_logits: &xs[0],
                box_pred: &xs[1],
                labels: &labels,
                boxes: &target,
                nuisance_logits: &logits,
                nuisance_labels: Some(&nuisance_labels),
                gammas: &[0.05, 0.02],
            };
            let (total, _) = losses::compose(tape, crate::losses::LossMode::Ndft, &inputs)?;
            Ok(total)
        }
    );

    Ok(entries)
}
