//! Property tests over the loss bounds and engine behavior.

use ndft_core::losses;
use ndft_core::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// −ln(C) ≤ negative entropy ≤ 0 for any logits.
    #[test]
    fn negative_entropy_stays_in_bounds(
        rows in 1usize..4,
        cols in 2usize..6,
        raw in proptest::collection::vec(-30.0f64..30.0, 24),
    ) {
        let data: Vec<f64> = raw.iter().cycle().take(rows * cols).copied().collect();
        let logits = Tensor::new(&[rows, cols], data).unwrap();
        let tape = Tape::new();
        let v = losses::negative_entropy(&tape, &logits).unwrap().scalar_value().unwrap();
        prop_assert!(v <= 1e-12, "negative entropy {v} above zero");
        prop_assert!(v >= -(cols as f64).ln() - 1e-12, "negative entropy {v} below −ln {cols}");
    }

    /// Cross-entropy is non-negative and hits ln(C) at uniform logits.
    #[test]
    fn cross_entropy_non_negative(
        cols in 2usize..6,
        label in 0usize..6,
        raw in proptest::collection::vec(-10.0f64..10.0, 6),
    ) {
        let label = label % cols;
        let logits = Tensor::new(&[1, cols], raw[..cols].to_vec()).unwrap();
        let tape = Tape::new();
        let v = losses::nuisance_ce(&tape, &logits, &[label]).unwrap().scalar_value().unwrap();
        prop_assert!(v >= -1e-12);
    }

    /// Composition is pure: composing never mutates its inputs.
    #[test]
    fn compose_mutates_nothing(
        raw in proptest::collection::vec(-3.0f64..3.0, 12),
        gamma in 0.0f64..0.2,
    ) {
        let class_logits = Tensor::new(&[2, 3], raw[..6].to_vec()).unwrap();
        let box_pred = Tensor::new(&[2, 4], raw[..8].iter().map(|v| v * 0.1).collect()).unwrap();
        let boxes = Tensor::new(&[2, 4], raw[4..12].iter().map(|v| v.abs() * 0.1).collect()).unwrap();
        let nuis = Tensor::new(&[2, 3], raw[6..12].to_vec()).unwrap();
        let before: Vec<u64> = [&class_logits, &box_pred, &boxes, &nuis]
            .iter()
            .map(|t| t.bit_fingerprint())
            .collect();
        let tape = Tape::new();
        let labels = [0usize, 2];
        let nuisance_labels = vec![vec![1usize, 0]];
        let logits = vec![nuis.clone()];
        let inputs = losses::ComposeInputs {
            class_logits: &class_logits,
            box_pred: &box_pred,
            labels: &labels,
            boxes: &boxes,
            nuisance_logits: &logits,
            nuisance_labels: Some(&nuisance_labels),
            gammas: &[gamma],
        };
        let _ = losses::compose(&tape, losses::LossMode::Ndft, &inputs).unwrap();
        let after: Vec<u64> = [&class_logits, &box_pred, &boxes, &nuis]
            .iter()
            .map(|t| t.bit_fingerprint())
            .collect();
        prop_assert_eq!(before, after);
    }

    /// Gradients accumulate additively: two backward passes double the grad.
    #[test]
    fn backward_accumulates_across_passes(
        raw in proptest::collection::vec(0.1f64..2.0, 4),
    ) {
        let x = Tensor::param(&[4], raw).unwrap();
        let tape = Tape::new();
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        let g1 = x.grad().unwrap();
        tape.backward(&loss).unwrap();
        let g2 = x.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    /// IoU is symmetric and bounded.
    #[test]
    fn iou_symmetric_bounded(
        ax in 0.0f64..0.5, ay in 0.0f64..0.5, aw in 0.05f64..0.5, ah in 0.05f64..0.5,
        bx in 0.0f64..0.5, by in 0.0f64..0.5, bw in 0.05f64..0.5, bh in 0.05f64..0.5,
    ) {
        let a = [ax, ay, ax + aw, ay + ah];
        let b = [bx, by, bx + bw, by + bh];
        let ab = ndft_core::eval::iou(a, b);
        let ba = ndft_core::eval::iou(b, a);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
    }
}
