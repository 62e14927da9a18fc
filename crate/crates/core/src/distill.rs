//! Cosine-distance distillation between per-level readouts and a frozen
//! teacher embedding.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, l2_norm, Matrix, Scalar};

/// Consecutive loss increases after which fitting stops and reports
/// divergence.
pub const DIVERGENCE_STREAK: usize = 5;

/// Readouts of every level (coarse readout included) and the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch<T> {
    pub readouts: Vec<Vec<T>>,
    pub teacher: Vec<T>,
}

/// `sum over levels of (1 - cos(readout, teacher))`.
pub fn distill_loss<T: Scalar>(batch: &DistillBatch<T>) -> Result<T> {
    if batch.readouts.is_empty() {
        return Err(Error::Config("no readouts to distill".into()));
    }
    batch.readouts.iter().try_fold(T::zero(), |acc, v| {
        Ok(acc + T::one() - cosine(v, &batch.teacher)?)
    })
}

/// Gradient of `1 - cos(v, t)` with respect to `v`:
/// `-(t / (|v||t|) - <v,t> v / (|v|^3 |t|))`.
pub fn distill_loss_grad<T: Scalar>(v: &[T], t: &[T]) -> Result<Vec<T>> {
    if v.len() != t.len() {
        return Err(Error::Dimension(format!("{} vs {}", v.len(), t.len())));
    }
    let (nv, nt) = (l2_norm(v), l2_norm(t));
    if nv == T::zero() || nt == T::zero() {
        return Err(Error::Numeric("gradient of a zero-norm vector".into()));
    }
    let a = T::one() / (nv * nt);
    let b = dot(v, t) / (nv * nv * nv * nt);
    Ok(v.iter().zip(t).map(|(&vi, &ti)| -(ti * a - vi * b)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    /// Row-major `d x d_out`.
    pub projection: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Loss before each update, plus the final loss.
    pub history: Vec<f64>,
    pub diverged: bool,
}

fn projection_loss<T: Scalar>(hidden: &Matrix<T>, targets: &Matrix<T>, w: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    let out = hidden.matmul(w)?;
    let mut loss = T::zero();
    let mut grad_out = Matrix::zeros(out.rows(), out.cols());
    for i in 0..out.rows() {
        loss = loss + T::one() - cosine(out.row(i), targets.row(i))?;
        grad_out
            .row_mut(i)
            .copy_from_slice(&distill_loss_grad(out.row(i), targets.row(i))?);
    }
    // dL/dW = H^T . dL/dOut
    let grad_w = hidden.transpose().matmul(&grad_out)?;
    Ok((loss, grad_w))
}

/// Plain gradient descent on a linear projection `W` (`d x d_out`) so that
/// `hidden · W` points along `targets`, row by row.
///
/// Fitting stops early, with `diverged` set, after
/// [`DIVERGENCE_STREAK`] consecutive loss increases.
pub fn fit_projection<T: Scalar>(
    hidden: &Matrix<T>,
    targets: &Matrix<T>,
    init: &Matrix<T>,
    steps: usize,
    learning_rate: f64,
) -> Result<FitResult> {
    if hidden.rows() == 0 || hidden.rows() != targets.rows() {
        return Err(Error::Dimension(format!(
            "{} hidden rows for {} targets",
            hidden.rows(),
            targets.rows()
        )));
    }
    if init.shape() != (hidden.cols(), targets.cols()) {
        return Err(Error::Dimension(format!(
            "projection {:?}, expected {:?}",
            init.shape(),
            (hidden.cols(), targets.cols())
        )));
    }
    let lr = T::of(learning_rate);
    let mut w = init.clone();
    let mut history = Vec::with_capacity(steps + 1);
    let mut streak = 0;
    let mut diverged = false;
    for _ in 0..steps {
        let (loss, grad) = projection_loss(hidden, targets, &w)?;
        if let Some(&prev) = history.last() {
            streak = if loss.as_f64() > prev { streak + 1 } else { 0 };
        }
        history.push(loss.as_f64());
        if streak >= DIVERGENCE_STREAK {
            diverged = true;
            break;
        }
        for (wi, gi) in w.data_mut().iter_mut().zip(grad.data()) {
            *wi = *wi - lr * *gi;
        }
    }
    if !diverged {
        history.push(projection_loss(hidden, targets, &w)?.0.as_f64());
    }
    Ok(FitResult {
        projection: w.data().iter().map(|x| x.as_f64()).collect(),
        rows: w.rows(),
        cols: w.cols(),
        history,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_cases() {
        let t = vec![0.3f64, -1.2, 2.0];
        let b = DistillBatch {
            readouts: vec![t.clone(), t.clone(), t.iter().map(|x| 4.0 * x).collect()],
            teacher: t.clone(),
        };
        assert!(distill_loss(&b).unwrap().abs() < 1e-15);
        let b = DistillBatch {
            readouts: vec![t.iter().map(|x| -x).collect()],
            teacher: t.clone(),
        };
        assert!((distill_loss(&b).unwrap() - 2.0).abs() < 1e-15);
        let b = DistillBatch {
            readouts: vec![vec![0.0; 3]],
            teacher: t,
        };
        assert!(matches!(distill_loss(&b), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradient_vanishes_when_aligned() {
        let t = [1.0f64, 2.0, -0.5];
        let v = [2.0f64, 4.0, -1.0];
        assert!(distill_loss_grad(&v, &t).unwrap().iter().all(|g| g.abs() < 1e-15));
        assert!(distill_loss_grad(&[0.0f64; 3], &t).is_err());
    }

    #[test]
    fn fit_already_optimal() {
        let h = Matrix::from_vec(2, 2, vec![1.0f64, 0.5, -0.2, 0.7]).unwrap();
        let w0 = Matrix::from_vec(2, 2, vec![0.9f64, 0.1, -0.3, 1.1]).unwrap();
        let t = h.matmul(&w0).unwrap();
        let r = fit_projection(&h, &t, &w0, 3, 0.1).unwrap();
        assert!(r.history[0].abs() < 1e-15);
    }

    #[test]
    fn fit_rejects_bad_shapes() {
        let h = Matrix::<f64>::zeros(2, 3);
        let t = Matrix::<f64>::zeros(2, 2);
        assert!(fit_projection(&h, &t, &Matrix::zeros(2, 2), 1, 0.1).is_err());
        assert!(fit_projection(&Matrix::<f64>::zeros(0, 3), &Matrix::zeros(0, 2), &Matrix::zeros(3, 2), 1, 0.1).is_err());
    }
}
