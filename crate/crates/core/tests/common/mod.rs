#![allow(dead_code)]

use ndarray::{Array, Dimension};

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad<D: Dimension>(x: &Array<f64, D>, eps: f64, f: impl Fn(&Array<f64, D>) -> f64) -> Array<f64, D> {
    let mut probe = x.as_standard_layout().into_owned();
    let mut g = Array::zeros(x.raw_dim());
    for (k, slot) in g.iter_mut().enumerate() {
        let orig = probe.as_slice().unwrap()[k];
        probe.as_slice_mut().unwrap()[k] = orig + eps;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[k] = orig - eps;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[k] = orig;
        *slot = (up - down) / (2.0 * eps);
    }
    g
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; absolute when both vanish.
pub fn rel_err<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.into_iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale }
}
