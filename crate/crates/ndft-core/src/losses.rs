//! Loss terms and their per-mode composition.
//!
//! The task loss is mean softmax cross-entropy over class logits plus mean
//! elementwise smooth-ℓ1 over box residuals (in normalized coordinates, so
//! the |x| = 1 knee is meaningful). Nuisance heads have two associated
//! scalars: the standard cross-entropy `L_N` used to train them, and the
//! negative entropy `L_ne` of their softmax output used as the adversarial
//! term for the trunk — minimizing `L_ne` pushes the head's predictions
//! toward the uniform distribution.
//!
//! [`compose`] assembles the mode's total:
//! - `baseline`:      `L_O`                      (γ-weighted terms absent)
//! - `ndft`:          `L_O + Σ γ_i · L_ne_i`     (nuisance labels unused)
//! - `auxiliary`:     `L_O + Σ γ_i · L_N_i`      (sign-flipped multi-task control)
//! - `grad-reversal`: `L_O − Σ γ_i · L_N_i`      (ablation-only alternative)
//!
//! Terms with `γ_i = 0` are skipped entirely, so a zero-γ run composes a
//! graph bit-identical to the baseline's. Natural logarithms throughout; all
//! reductions are batch means so γ does not depend on batch size.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the total training loss is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    Baseline,
    Ndft,
    Auxiliary,
    GradReversal,
}

/// Scalar components of one composed loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_task_cls: f64,
    pub l_task_box: f64,
    /// Negative entropy of each nuisance head's prediction.
    pub l_ne: Vec<f64>,
    /// Cross-entropy of each nuisance head against its labels.
    pub l_n: Vec<f64>,
    pub gammas: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_task_cls.is_finite()
            && self.l_task_box.is_finite()
            && self.total.is_finite()
            && self.l_ne.iter().all(|v| v.is_finite())
            && self.l_n.iter().all(|v| v.is_finite())
    }
}

fn check_labels(what: &'static str, labels: &[usize], count: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= count) {
        return Err(Error::LabelOutOfRange { what, label: bad, count });
    }
    Ok(())
}

/// Mean softmax cross-entropy of `(B×C)` logits against `B` labels.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, labels: &[usize], what: &'static str) -> Result<Tensor> {
    let classes = *logits.shape().last().unwrap_or(&0);
    check_labels(what, labels, classes)?;
    let probs = tape.softmax(logits, 1)?;
    let logp = tape.log(&probs)?;
    let picked = tape.gather_rows(&logp, labels)?;
    let mean = tape.mean(&picked)?;
    tape.scale(&mean, -1.0)
}

/// Task loss pair: `(mean class cross-entropy, mean elementwise smooth-ℓ1)`.
///
/// `boxes` is the `(B×4)` target in normalized `[0,1]` coordinates.
pub fn task_loss(
    tape: &Tape,
    class_logits: &Tensor,
    box_pred: &Tensor,
    labels: &[usize],
    boxes: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if box_pred.shape() != boxes.shape() {
        return Err(Error::ShapeMismatch {
            op: "task_loss",
            lhs: box_pred.shape().to_vec(),
            rhs: boxes.shape().to_vec(),
        });
    }
    let l_cls = cross_entropy(tape, class_logits, labels, "task class")?;
    let residual = tape.sub(box_pred, boxes)?;
    let l_box = tape.mean(&tape.smooth_l1(&residual)?)?;
    Ok((l_cls, l_box))
}

/// Mean softmax cross-entropy for nuisance head `i`.
pub fn nuisance_ce(tape: &Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    cross_entropy(tape, logits, labels, "nuisance")
}

/// Mean over the batch of `Σ_c p_c ln p_c` with `p = softmax(logits)`.
///
/// Bounded in `[−ln C, 0]`: the minimum at the uniform distribution, zero at
/// a one-hot prediction.
pub fn negative_entropy(tape: &Tape, logits: &Tensor) -> Result<Tensor> {
    let batch = logits.shape()[0];
    let probs = tape.softmax(logits, 1)?;
    let plogp = tape.xlogx(&probs)?;
    let total = tape.sum(&plogp)?;
    tape.scale(&total, 1.0 / batch as f64)
}

/// Inputs to [`compose`]; nuisance logits/labels are indexed per head.
pub struct ComposeInputs<'a> {
    pub class_logits: &'a Tensor,
    pub box_pred: &'a Tensor,
    pub labels: &'a [usize],
    pub boxes: &'a Tensor,
    pub nuisance_logits: &'a [Tensor],
    /// Required for `auxiliary` and `grad-reversal`; ignored (by contract)
    /// for `ndft` and `baseline` totals, though `L_N` is still reported in
    /// the breakdown when present.
    pub nuisance_labels: Option<&'a [Vec<usize>]>,
    pub gammas: &'a [f64],
}

/// Assembles the mode's total loss and a numeric breakdown. Pure: composes
/// graph nodes only, mutating no parameters.
pub fn compose(tape: &Tape, mode: LossMode, inp: &ComposeInputs) -> Result<(Tensor, LossBreakdown)> {
    let k = inp.nuisance_logits.len();
    if inp.gammas.len() != k {
        return Err(Error::Config(format!(
            "{} gammas supplied for {} nuisance heads",
            inp.gammas.len(),
            k
        )));
    }
    if matches!(mode, LossMode::Auxiliary | LossMode::GradReversal) && inp.nuisance_labels.is_none() && k > 0 {
        return Err(Error::Config("this mode needs nuisance labels".into()));
    }

    let (l_cls, l_box) = task_loss(tape, inp.class_logits, inp.box_pred, inp.labels, inp.boxes)?;
    let mut total = tape.add(&l_cls, &l_box)?;

    let mut ne_vals = Vec::with_capacity(k);
    let mut n_vals = Vec::with_capacity(k);
    for i in 0..k {
        let logits = &inp.nuisance_logits[i];
        let l_ne = negative_entropy(tape, logits)?;
        ne_vals.push(l_ne.scalar_value()?);
        let l_n = match inp.nuisance_labels {
            Some(all) => Some(nuisance_ce(tape, logits, &all[i])?),
            None => None,
        };
        n_vals.push(l_n.as_ref().map(|t| t.scalar_value()).transpose()?.unwrap_or(f64::NAN));

        let gamma = inp.gammas[i];
        if gamma == 0.0 {
            continue;
        }
        // Zero-γ terms never enter the graph, so total reduces to baseline
        // bit-exactly.
        let term = match mode {
            LossMode::Baseline => continue,
            LossMode::Ndft => tape.scale(&l_ne, gamma)?,
            LossMode::Auxiliary => tape.scale(
                l_n.as_ref().ok_or_else(|| Error::Config("auxiliary mode needs nuisance labels".into()))?,
                gamma,
            )?,
            LossMode::GradReversal => tape.scale(
                l_n.as_ref().ok_or_else(|| Error::Config("grad-reversal mode needs nuisance labels".into()))?,
                -gamma,
            )?,
        };
        total = tape.add(&total, &term)?;
    }

    let breakdown = LossBreakdown {
        l_task_cls: l_cls.scalar_value()?,
        l_task_box: l_box.scalar_value()?,
        l_ne: ne_vals,
        l_n: n_vals,
        gammas: inp.gammas.to_vec(),
        total: total.scalar_value()?,
    };
    Ok((total, breakdown))
}

/// Fraction of rows whose argmax matches the label (plain, tape-free).
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let cols = *logits.shape().last().unwrap_or(&1);
    let data = logits.data();
    let mut correct = 0usize;
    for (b, &label) in labels.iter().enumerate() {
        let row = &data[b * cols..(b + 1) * cols];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::{Stream, StreamRng};

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn uniform_two_class_ce_is_ln2() {
        let tape = Tape::new();
        let l = cross_entropy(&tape, &t(&[1, 2], vec![0.0, 0.0]), &[0], "test").unwrap();
        assert!((l.scalar_value().unwrap() - std::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn uniform_three_level_ce_is_ln3() {
        let tape = Tape::new();
        let l = nuisance_ce(&tape, &t(&[2, 3], vec![0.0; 6]), &[1, 2]).unwrap();
        assert!((l.scalar_value().unwrap() - 3.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn ce_closed_form_example() {
        // logits [1,0], label 1 → ln(1+e)
        let tape = Tape::new();
        let l = nuisance_ce(&tape, &t(&[1, 2], vec![1.0, 0.0]), &[1]).unwrap();
        assert!((l.scalar_value().unwrap() - (1.0 + 1f64.exp()).ln()).abs() < 1e-10);
    }

    #[test]
    fn confident_correct_ce_approaches_zero() {
        let tape = Tape::new();
        let l = nuisance_ce(&tape, &t(&[1, 3], vec![30.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(l.scalar_value().unwrap() < 1e-10);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let tape = Tape::new();
        let err = nuisance_ce(&tape, &t(&[1, 3], vec![0.0; 3]), &[3]);
        assert!(matches!(err, Err(Error::LabelOutOfRange { label: 3, count: 3, .. })));
    }

    #[test]
    fn ce_gradient_at_uniform_is_symmetric() {
        // logits [0,0], label 0 → grad [−0.5, 0.5]
        let tape = Tape::new();
        let logits = Tensor::param(&[1, 2], vec![0.0, 0.0]).unwrap();
        let l = cross_entropy(&tape, &logits, &[0], "test").unwrap();
        tape.backward(&l).unwrap();
        let g = logits.grad().unwrap();
        assert!((g[0] - (-0.5)).abs() < 1e-12);
        assert!((g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn negative_entropy_bounds_and_values() {
        let tape = Tape::new();
        // Uniform over 3 levels → −ln 3.
        let l = negative_entropy(&tape, &t(&[1, 3], vec![0.0; 3])).unwrap();
        assert!((l.scalar_value().unwrap() + 3.0f64.ln()).abs() < 1e-10);
        // Near one-hot → ~0.
        let l = negative_entropy(&tape, &t(&[1, 3], vec![80.0, 0.0, 0.0])).unwrap();
        assert!(l.scalar_value().unwrap().abs() < 1e-10);
        // p = [0.5, 0.25, 0.25]: logits = ln p works since softmax(ln p) = p.
        let logits: Vec<f64> = [0.5f64, 0.25, 0.25].iter().map(|p| p.ln()).collect();
        let l = negative_entropy(&tape, &t(&[1, 3], logits)).unwrap();
        let want = 0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln();
        assert!((l.scalar_value().unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn negative_entropy_gradient_vanishes_at_uniform() {
        let tape = Tape::new();
        let logits = Tensor::param(&[2, 4], vec![0.0; 8]).unwrap();
        let l = negative_entropy(&tape, &logits).unwrap();
        tape.backward(&l).unwrap();
        for g in logits.grad().unwrap() {
            assert!(g.abs() < 1e-10);
        }
    }

    #[test]
    fn smooth_l1_tabulated_values() {
        let tape = Tape::new();
        let x = t(&[3], vec![0.0, 0.5, 2.0]);
        let y = tape.smooth_l1(&x).unwrap();
        let v = y.data();
        assert!((v[0] - 0.0).abs() < 1e-15);
        assert!((v[1] - 0.125).abs() < 1e-15);
        assert!((v[2] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_drives_task_loss_to_zero() {
        let tape = Tape::new();
        let logits = t(&[1, 3], vec![60.0, 0.0, 0.0]);
        let boxes = t(&[1, 4], vec![0.2, 0.2, 0.8, 0.8]);
        let (l_cls, l_box) = task_loss(&tape, &logits, &boxes, &[0], &boxes).unwrap();
        assert!(l_cls.scalar_value().unwrap() < 1e-12);
        assert!(l_box.scalar_value().unwrap() < 1e-15);
    }

    fn compose_fixture(tape: &Tape, gammas: &[f64], mode: LossMode) -> (Tensor, LossBreakdown) {
        let mut rng = StreamRng::stream(5, Stream::Init);
        let mk = |shape: &[usize], r: &mut StreamRng| {
            let n: usize = shape.iter().product();
            t(shape, (0..n).map(|_| r.uniform(-1.0, 1.0)).collect())
        };
        let class_logits = mk(&[4, 3], &mut rng);
        let box_pred = mk(&[4, 4], &mut rng);
        let boxes = mk(&[4, 4], &mut rng);
        let n1 = mk(&[4, 3], &mut rng);
        let n2 = mk(&[4, 2], &mut rng);
        let labels = vec![0, 1, 2, 0];
        let nuisance_labels = vec![vec![0, 1, 2, 1], vec![0, 1, 0, 1]];
        let inputs = ComposeInputs {
            class_logits: &class_logits,
            box_pred: &box_pred,
            labels: &labels,
            boxes: &boxes,
            nuisance_logits: &[n1, n2],
            nuisance_labels: Some(&nuisance_labels),
            gammas,
        };
        compose(tape, mode, &inputs).unwrap()
    }

    #[test]
    fn zero_gamma_ndft_equals_baseline_bit_exactly() {
        let tape = Tape::new();
        let (_, ndft) = compose_fixture(&tape, &[0.0, 0.0], LossMode::Ndft);
        let tape2 = Tape::new();
        let (_, base) = compose_fixture(&tape2, &[0.0, 0.0], LossMode::Baseline);
        assert_eq!(ndft.total.to_bits(), base.total.to_bits());
    }

    #[test]
    fn breakdown_total_matches_component_sum() {
        let tape = Tape::new();
        let (_, b) = compose_fixture(&tape, &[0.02, 0.01], LossMode::Ndft);
        let want = b.l_task_cls + b.l_task_box + 0.02 * b.l_ne[0] + 0.01 * b.l_ne[1];
        assert!((b.total - want).abs() < 1e-12);
        assert!(b.is_finite());
    }

    #[test]
    fn auxiliary_and_ndft_differ_by_the_head_terms() {
        // Same tensors: totals differ by Σ γ_i (L_N_i − L_ne_i).
        let tape = Tape::new();
        let (_, aux) = compose_fixture(&tape, &[0.02, 0.01], LossMode::Auxiliary);
        let tape2 = Tape::new();
        let (_, ndft) = compose_fixture(&tape2, &[0.02, 0.01], LossMode::Ndft);
        let gap = 0.02 * (aux.l_n[0] - aux.l_ne[0]) + 0.01 * (aux.l_n[1] - aux.l_ne[1]);
        assert!((aux.total - ndft.total - gap).abs() < 1e-12);
    }

    #[test]
    fn ndft_nuisance_term_lower_bound_at_uniform() {
        // With uniform predictions the total hits L_O + Σ γ_i (−ln levels_i).
        let tape = Tape::new();
        let class_logits = t(&[2, 3], vec![0.3, 0.1, -0.2, 0.0, 0.4, 0.2]);
        let box_pred = t(&[2, 4], vec![0.1; 8]);
        let boxes = t(&[2, 4], vec![0.2; 8]);
        let uniform1 = t(&[2, 3], vec![0.0; 6]);
        let uniform2 = t(&[2, 2], vec![0.0; 4]);
        let labels = vec![0, 1];
        let inputs = ComposeInputs {
            class_logits: &class_logits,
            box_pred: &box_pred,
            labels: &labels,
            boxes: &boxes,
            nuisance_logits: &[uniform1, uniform2],
            nuisance_labels: None,
            gammas: &[0.5, 0.25],
        };
        let (_, b) = compose(&tape, LossMode::Ndft, &inputs).unwrap();
        let bound = 0.5 * -(3.0f64.ln()) + 0.25 * -(2.0f64.ln());
        let task = b.l_task_cls + b.l_task_box;
        assert!((b.total - (task + bound)).abs() < 1e-12);
        for (i, &lv) in [3usize, 2].iter().enumerate() {
            assert!(b.l_ne[i] >= -(lv as f64).ln() - 1e-12);
            assert!(b.l_ne[i] <= 1e-12);
        }
    }

    #[test]
    fn loss_gradients_pass_gradcheck() {
        let mut rng = StreamRng::stream(31, Stream::Init);
        let logits = t(&[3, 4], (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let labels = vec![0usize, 2, 3];
        let f = move |tape: &Tape, xs: &[Tensor]| cross_entropy(tape, &xs[0], &labels, "test");
        let rep = gradcheck::gradcheck(&f, &[logits], 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");

        let logits = t(&[3, 3], (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let f = |tape: &Tape, xs: &[Tensor]| negative_entropy(tape, &xs[0]);
        let rep = gradcheck::gradcheck(&f, &[logits], 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");

        // Box residuals away from the |x| = 1 knee.
        let resid = t(&[2, 4], (0..8).map(|_| rng.uniform(-0.8, 0.8)).collect());
        let f = |tape: &Tape, xs: &[Tensor]| tape.mean(&tape.smooth_l1(&xs[0])?);
        let rep = gradcheck::gradcheck(&f, &[resid], 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let logits = t(&[3, 2], vec![2.0, 1.0, 0.0, 1.0, 3.0, -1.0]);
        assert!((accuracy(&logits, &[0, 1, 0]) - 1.0).abs() < 1e-12);
        assert!((accuracy(&logits, &[1, 1, 0]) - 2.0 / 3.0).abs() < 1e-12);
    }
}
