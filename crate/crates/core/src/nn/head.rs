use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{relu, relu_backward, Linear};
use super::loss::{cross_entropy, softmax};
use super::optim::{Optimizer, TrainConfig};
use crate::error::{Error, Result};

pub const HEAD_HIDDEN: usize = 512;

/// `logits = ReLU(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub output: Linear,
}

struct HeadCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl ClassifierHead {
    pub fn new<R: rand::Rng>(inputs: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(inputs, hidden, rng),
            output: Linear::new(hidden, classes, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn n_classes(&self) -> usize {
        self.output.outputs()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.hidden.outputs() != self.output.inputs() {
            return Err(Error::shape(
                format!("{} hidden inputs", self.hidden.outputs()),
                format!("{}", self.output.inputs()),
            ));
        }
        let finite = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
        if !finite(&self.hidden.weight) || !finite(&self.output.weight) {
            return Err(Error::Data("non-finite head parameters".into()));
        }
        Ok(())
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, HeadCache)> {
        let pre = self.hidden.forward(x)?;
        let act = relu(&pre);
        let logits = self.output.forward(act.view())?;
        Ok((logits, HeadCache { pre, act }))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(softmax(self.forward(x)?.view()))
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }

    fn step(&mut self, opt: &mut Optimizer, x: ArrayView2<f64>, y: &[usize]) -> Result<f64> {
        let (logits, cache) = self.forward_cached(x)?;
        let (loss, g) = cross_entropy(logits.view(), y)?;
        let (d_act, g2) = self.output.backward(cache.act.view(), g.view());
        let d_pre = relu_backward(cache.pre.view(), d_act.view());
        let (_, g1) = self.hidden.backward(x, d_pre.view());
        opt.begin_step();
        update(opt, 0, &mut self.hidden.weight, &g1.weight);
        update(opt, 1, &mut self.hidden.bias, &g1.bias);
        update(opt, 2, &mut self.output.weight, &g2.weight);
        update(opt, 3, &mut self.output.bias, &g2.bias);
        Ok(loss)
    }
}

pub(crate) fn update<D: ndarray::Dimension>(
    opt: &mut Optimizer,
    slot: usize,
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
) {
    let p = param.as_slice_mut().expect("standard layout parameter");
    let g = grad.as_standard_layout();
    opt.update(slot, p, g.as_slice().expect("standard layout gradient"));
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn check_labels(x: ArrayView2<f64>, y: &[usize], classes: usize) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Data(format!("{} feature rows but {} labels", x.nrows(), y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn gather(x: ArrayView2<f64>, y: &[usize], idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
    (x.select(Axis(0), idx), idx.iter().map(|&i| y[i]).collect())
}

/// Mini-batch training of a fresh head. When `validation` is given the
/// parameters from the epoch with the lowest validation loss are returned.
pub fn train_head(
    x: ArrayView2<f64>,
    y: &[usize],
    n_classes: usize,
    validation: Option<(ArrayView2<f64>, &[usize])>,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<ClassifierHead> {
    cfg.validate()?;
    check_labels(x, y, n_classes)?;
    let mut present: Vec<usize> = y.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 || n_classes < 2 {
        return Err(Error::Config("classifier training needs at least two classes".into()));
    }
    if let Some((vx, vy)) = validation {
        check_labels(vx, vy, n_classes)?;
        if vx.ncols() != x.ncols() {
            return Err(Error::shape(format!("{} features", x.ncols()), format!("{}", vx.ncols())));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ClassifierHead::new(x.ncols(), hidden, n_classes, &mut rng);
    let mut opt = Optimizer::new(cfg);
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut best: Option<(f64, ClassifierHead)> = None;
    let mut stale = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (bx, by) = gather(x, y, chunk);
            head.step(&mut opt, bx.view(), &by)?;
        }
        if let Some((vx, vy)) = validation {
            if vy.is_empty() {
                continue;
            }
            let (loss, _) = cross_entropy(head.forward(vx)?.view(), vy)?;
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, head.clone()));
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(best.map(|(_, h)| h).unwrap_or(head))
}
