use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Row-wise log-softmax, stabilized by subtracting the row max.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| v - max);
        let lse = row.mapv(f64::exp).sum().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv_into(f64::exp)
}

/// Mean negative log-likelihood of `labels` and its gradient
/// `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::shape(format!("{b} labels"), format!("{} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} outside {c} classes")));
    }
    let logp = log_softmax(logits);
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &l)| logp[[i, l]])
        .sum::<f64>()
        / b as f64;
    let mut grad = logp.mapv_into(f64::exp);
    for (i, &l) in labels.iter().enumerate() {
        grad[[i, l]] -= 1.0;
    }
    grad /= b as f64;
    Ok((loss, grad))
}

/// Per-row `KL(softmax(teacher / T) || softmax(student / T))`.
pub fn kl_rows(student: ArrayView2<f64>, teacher: ArrayView2<f64>, temperature: f64) -> Array1<f64> {
    let lq = log_softmax((&student / temperature).view());
    let lp = log_softmax((&teacher / temperature).view());
    (lp.mapv(f64::exp) * (&lp - &lq)).sum_axis(Axis(1))
}

/// Temperature-scaled distillation loss
/// `T^2 * mean_b KL(softmax(teacher / T) || softmax(student / T))` and its
/// gradient with respect to the student logits,
/// `T * (softmax(student / T) - softmax(teacher / T)) / batch`.
pub fn kl_distill_loss(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    if student.dim() != teacher.dim() {
        return Err(Error::shape(
            format!("{:?}", teacher.dim()),
            format!("{:?}", student.dim()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature {temperature} must be positive")));
    }
    let b = student.nrows() as f64;
    let lq = log_softmax((&student / temperature).view());
    let lp = log_softmax((&teacher / temperature).view());
    let p = lp.mapv(f64::exp);
    let kl = (&p * &(&lp - &lq)).sum() / b;
    let grad = (lq.mapv(f64::exp) - p) * (temperature / b);
    Ok((temperature * temperature * kl, grad))
}
