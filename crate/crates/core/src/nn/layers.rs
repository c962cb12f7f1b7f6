//! Layers with explicit forward and backward passes.
//!
//! Sequence activations are channel-last `(batch, seq, channels)`; batch norm
//! and linear layers see `(rows, features)`.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

pub(crate) fn uniform<R: Rng>(shape: (usize, usize), bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization.
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: uniform((inputs, outputs), bound, rng),
            bias: Array1::from_shape_simple_fn(outputs, || rng.random_range(-bound..=bound)),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.inputs() {
            return Err(Error::shape(
                format!("{} features", self.inputs()),
                format!("{} features", x.ncols()),
            ));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    /// Returns the input gradient and parameter gradients.
    pub fn backward(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> (Array2<f64>, LinearGrad) {
        let grad = LinearGrad {
            weight: x.t().dot(&grad_out),
            bias: grad_out.sum_axis(Axis(0)),
        };
        (grad_out.dot(&self.weight.t()), grad)
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its pre-activation input.
pub fn relu_backward(pre: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> Array2<f64> {
    let mut g = grad_out.to_owned();
    Zip::from(&mut g).and(pre).for_each(|g, &x| {
        if x <= 0.0 {
            *g = 0.0
        }
    });
    g
}

/// 1-D convolution over the sequence axis with "same" zero padding
/// (`kernel` odd, padding `kernel / 2`), so the output length equals the input
/// length.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `(kernel, in_channels, out_channels)`; tap `k` reads position `s + k - pad`.
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dGrad {
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
}

impl Conv1d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Parameter(format!("kernel size {kernel} must be odd")));
        }
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        Ok(Self {
            weight: Array3::from_shape_simple_fn((kernel, in_channels, out_channels), || {
                rng.random_range(-bound..=bound)
            }),
            bias: Array1::from_shape_simple_fn(out_channels, || rng.random_range(-bound..=bound)),
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (k, i, o) = self.weight.dim();
        self.weight.view().into_shape_with_order((k * i, o)).expect("contiguous weights")
    }

    /// `(batch * seq, kernel * in)` patch matrix.
    fn im2col(&self, x: ArrayView3<f64>) -> Array2<f64> {
        let (b, seq, c) = x.dim();
        let k = self.kernel();
        let pad = k / 2;
        let mut cols = Array2::zeros((b * seq, k * c));
        for bi in 0..b {
            for si in 0..seq {
                let mut row = cols.row_mut(bi * seq + si);
                for tap in 0..k {
                    let src = si + tap;
                    if src < pad || src - pad >= seq {
                        continue;
                    }
                    row.slice_mut(s![tap * c..(tap + 1) * c])
                        .assign(&x.slice(s![bi, src - pad, ..]));
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Result<Array3<f64>> {
        let (b, seq, c) = x.dim();
        if c != self.in_channels() {
            return Err(Error::shape(
                format!("{} channels", self.in_channels()),
                format!("{c} channels"),
            ));
        }
        let out = self.im2col(x).dot(&self.weight_matrix()) + &self.bias;
        Ok(out
            .into_shape_with_order((b, seq, self.out_channels()))
            .expect("row-major product"))
    }

    pub fn backward(&self, x: ArrayView3<f64>, grad_out: ArrayView3<f64>) -> (Array3<f64>, Conv1dGrad) {
        let (b, seq, c) = x.dim();
        let k = self.kernel();
        let pad = k / 2;
        let g = grad_out
            .to_owned()
            .into_shape_with_order((b * seq, self.out_channels()))
            .expect("contiguous gradient");
        let cols = self.im2col(x);
        let weight = cols
            .t()
            .dot(&g)
            .into_shape_with_order(self.weight.dim())
            .expect("weight layout");
        let grad = Conv1dGrad {
            weight,
            bias: g.sum_axis(Axis(0)),
        };
        let dcols = g.dot(&self.weight_matrix().t());
        let mut dx = Array3::zeros((b, seq, c));
        for bi in 0..b {
            for si in 0..seq {
                let row = dcols.row(bi * seq + si);
                for tap in 0..k {
                    let src = si + tap;
                    if src < pad || src - pad >= seq {
                        continue;
                    }
                    let mut dst = dx.slice_mut(s![bi, src - pad, ..]);
                    dst += &row.slice(s![tap * c..(tap + 1) * c]);
                }
            }
        }
        (dx, grad)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-feature batch normalization over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    training: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with batch statistics and updates the running estimates
    /// (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn forward_train(&mut self, x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let x_hat = centered * &inv_std;
        let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM;
        let y = &x_hat * &self.gamma + &self.beta;
        (
            y,
            BatchNormCache {
                x_hat,
                inv_std,
                training: true,
            },
        )
    }

    pub fn forward_eval(&self, x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache) {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let x_hat = (&x - &self.running_mean) * &inv_std;
        let y = &x_hat * &self.gamma + &self.beta;
        (
            y,
            BatchNormCache {
                x_hat,
                inv_std,
                training: false,
            },
        )
    }

    pub fn backward(&self, cache: &BatchNormCache, grad_out: ArrayView2<f64>) -> (Array2<f64>, BatchNormGrad) {
        let grad = BatchNormGrad {
            gamma: (&grad_out * &cache.x_hat).sum_axis(Axis(0)),
            beta: grad_out.sum_axis(Axis(0)),
        };
        let dx_hat = &grad_out * &self.gamma;
        let dx = if cache.training {
            let n = grad_out.nrows() as f64;
            let sum = dx_hat.sum_axis(Axis(0));
            let dot = (&dx_hat * &cache.x_hat).sum_axis(Axis(0));
            (dx_hat * n - &sum - &cache.x_hat * &dot) * &(&cache.inv_std / n)
        } else {
            dx_hat * &cache.inv_std
        };
        (dx, grad)
    }
}

/// Max over the sequence axis; `argmax` keeps the first maximal position.
pub fn global_max_pool(x: ArrayView3<f64>) -> (Array2<f64>, Array2<usize>) {
    let (b, seq, c) = x.dim();
    let mut out = Array2::from_elem((b, c), f64::NEG_INFINITY);
    let mut arg = Array2::zeros((b, c));
    for bi in 0..b {
        for si in 0..seq {
            for ci in 0..c {
                let v = x[[bi, si, ci]];
                if v > out[[bi, ci]] {
                    out[[bi, ci]] = v;
                    arg[[bi, ci]] = si;
                }
            }
        }
    }
    (out, arg)
}

pub fn global_max_pool_backward(argmax: &Array2<usize>, seq: usize, grad_out: ArrayView2<f64>) -> Array3<f64> {
    let (b, c) = grad_out.dim();
    let mut dx = Array3::zeros((b, seq, c));
    for ((bi, ci), &g) in grad_out.indexed_iter() {
        dx[[bi, argmax[[bi, ci]], ci]] += g;
    }
    dx
}
