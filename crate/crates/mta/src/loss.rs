//! Per-sample task losses shared by victim training and attack objectives.
//!
//! Every core returns a `[B]` vector of nonnegative per-sample losses, so
//! callers can either average them directly (victim training) or wrap them
//! in the log-based fooling objectives, which need the per-sample values.

use crate::data::{onehot, onehot_dense, TaskKind};
use crate::error::{MtaError, Result};
use crate::tensor::{cross_entropy_per_sample, Tensor};

/// Encode raw targets into the shape the loss cores expect: one-hot for
/// classification kinds, untouched for regression-style targets.
pub fn encode_target(kind: TaskKind, classes: usize, raw: &Tensor) -> Result<Tensor> {
    match kind {
        TaskKind::Classification => onehot(raw, classes),
        TaskKind::DenseClassification => onehot_dense(raw, classes),
        TaskKind::DenseRegression | TaskKind::DenseUnitVector => Ok(raw.clone()),
    }
}

/// `|x|` built from verified pieces; gradient is `sign(x)` with 0 at 0.
pub fn abs(x: &Tensor) -> Result<Tensor> {
    x.relu().add(&x.scale(-1.0).relu())
}

/// Mean over every non-batch axis: `[B, ...] -> [B]`.
fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    let rest = x.numel() / b;
    x.reshape(&[b, rest])?.mean_axis(1, false)
}

/// Pixel-wise cross-entropy, averaged over pixels:
/// `[B,C,H,W] probs x [B,C,H,W] one-hot -> [B]`.
pub fn pixel_ce_per_sample(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    if probs.rank() != 4 || probs.shape() != target.shape() {
        return Err(MtaError::shape(
            "pixel_ce",
            format!("want matching [B,C,H,W], got {:?} vs {:?}", probs.shape(), target.shape()),
        ));
    }
    let nll = probs
        .clamp_min(crate::tensor::CE_DELTA)
        .log()?
        .mul(target)?
        .sum_axis(1, false)?
        .scale(-1.0);
    per_sample_mean(&nll)
}

/// Mean absolute error over all predicted values: `[B, ...] -> [B]`.
pub fn l1_per_sample(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(MtaError::shape(
            "l1",
            format!("shape mismatch {:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    per_sample_mean(&abs(&pred.sub(target)?)?)
}

/// Direction loss for unit-vector fields `[B,3,H,W]`: one minus the mean
/// per-pixel dot product. Zero when predictions match the targets exactly,
/// 2 when they point the opposite way everywhere.
pub fn dot_loss_per_sample(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.rank() != 4 || pred.shape() != target.shape() {
        return Err(MtaError::shape(
            "dot_loss",
            format!("want matching [B,C,H,W], got {:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let cos = pred.mul(target)?.sum_axis(1, false)?;
    let mean_cos = per_sample_mean(&cos)?;
    Tensor::full(mean_cos.shape(), 1.0).sub(&mean_cos)
}

/// Per-sample loss for a task, given predictions from
/// [`crate::victim::Predictor::predict`] and an encoded target.
pub fn task_loss_per_sample(kind: TaskKind, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    match kind {
        TaskKind::Classification => cross_entropy_per_sample(pred, target, crate::tensor::CE_DELTA),
        TaskKind::DenseClassification => pixel_ce_per_sample(pred, target),
        TaskKind::DenseRegression => l1_per_sample(pred, target),
        TaskKind::DenseUnitVector => dot_loss_per_sample(pred, target),
    }
}

/// Scalar training loss: mean of the per-sample values.
pub fn task_loss(kind: TaskKind, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(task_loss_per_sample(kind, pred, target)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use crate::tensor::{backward, finite_diff_gradient, max_rel_err};

    #[test]
    fn abs_matches_definition() {
        let x = Tensor::from_vec(vec![-2.0, 0.0, 3.5], &[3]).unwrap();
        assert_eq!(abs(&x).unwrap().data(), &[2.0, 0.0, 3.5]);
    }

    #[test]
    fn pixel_ce_on_uniform_probs_is_log_c() {
        // 4 classes, uniform prediction: every pixel contributes ln 4.
        let probs = Tensor::full(&[2, 4, 3, 3], 0.25);
        let labels = Tensor::from_vec(vec![1.0; 2 * 9], &[2, 3, 3]).unwrap();
        let target = onehot_dense(&labels, 4).unwrap();
        let ce = pixel_ce_per_sample(&probs, &target).unwrap();
        for &v in ce.data() {
            assert!((v - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_is_mean_absolute_error() {
        let pred = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let target = Tensor::from_vec(vec![2.0, 2.0, 1.0, 0.0], &[1, 1, 2, 2]).unwrap();
        let l = l1_per_sample(&pred, &target).unwrap();
        assert!((l.data()[0] - (1.0 + 0.0 + 2.0 + 4.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn dot_loss_zero_on_match_two_on_flip() {
        let mut v = vec![0.0; 3 * 4];
        for p in 0..4 {
            v[2 * 4 + p] = 1.0; // all normals point along +z
        }
        let n = Tensor::from_vec(v.clone(), &[1, 3, 2, 2]).unwrap();
        let l = dot_loss_per_sample(&n, &n).unwrap();
        assert!(l.data()[0].abs() < 1e-12);
        let flipped = n.scale(-1.0);
        let l2 = dot_loss_per_sample(&flipped, &n).unwrap();
        assert!((l2.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dense_loss_gradients_match_finite_differences() {
        let mut rng = DetRng::from_seed(11);
        for kind in [TaskKind::DenseRegression, TaskKind::DenseUnitVector] {
            let shape = [2usize, 3, 2, 2];
            let x0 = Tensor::from_vec(
                (0..24).map(|_| rng.range(-0.9, 0.9)).collect(),
                &shape,
            )
            .unwrap();
            let target = Tensor::from_vec((0..24).map(|_| rng.range(-1.0, 1.0)).collect(), &shape).unwrap();
            let f = |x: &Tensor| task_loss(kind, x, &target).map(|t| t.item());
            let x = x0.detached().to_param();
            let loss = task_loss(kind, &x, &target).unwrap();
            backward(&loss).unwrap();
            let got = x.grad().unwrap();
            let want = finite_diff_gradient(&f, &x0, 1e-5).unwrap();
            assert!(max_rel_err(&got, want.data()) < 1e-6, "{kind:?}");
        }
    }
}
