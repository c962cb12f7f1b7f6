//! K-means codebook and exact nearest-centroid tokenization.
//!
//! Assignment uses the expanded form `|x|^2 - 2 x.c + |c|^2` over blocks of
//! rows so the cross term is a matrix product. Centroids whose expanded score
//! lands within rounding distance of the best are re-scored with the direct
//! `sum (x - c)^2` form, so the chosen token always matches an exhaustive
//! search (ties go to the lowest index).

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids are stored as `u16`.
pub const MAX_VOCAB: usize = 1 << 16;

pub const DEFAULT_MAX_ITERS: usize = 25;
pub const CONVERGENCE_RTOL: f64 = 1e-6;

const BLOCK_ROWS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `V x k`
    pub centroids: Array2<f64>,
    pub seed: u64,
    pub iterations_run: usize,
    pub final_objective: f64,
    /// Objective after the initial assignment and after every Lloyd step.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub clip_id: String,
    pub tokens: Vec<u16>,
    pub frames_per_second: f64,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Codebook {
    /// Wraps fixed centroids (no fitting history).
    pub fn from_centroids(centroids: Array2<f64>) -> Result<Self> {
        let book = Self {
            centroids,
            seed: 0,
            iterations_run: 0,
            final_objective: f64::NAN,
            objective_history: Vec::new(),
        };
        book.check_invariants()?;
        Ok(book)
    }

    pub fn vocab_size(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let v = self.vocab_size();
        if v == 0 || v > MAX_VOCAB {
            return Err(Error::Data(format!(
                "vocabulary size {v} outside 1..={MAX_VOCAB}"
            )));
        }
        if self.centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Data("non-finite centroid".into()));
        }
        Ok(())
    }

    /// Nearest centroid and exact squared distance for every row.
    pub fn nearest(&self, frames: ArrayView2<f64>) -> Result<(Vec<u16>, Vec<f64>)> {
        if frames.ncols() != self.dim() {
            return Err(Error::shape(
                format!("{} columns", self.dim()),
                format!("{} columns", frames.ncols()),
            ));
        }
        let norms: Array1<f64> = self.centroids.rows().into_iter().map(|c| c.dot(&c)).collect();
        let max_norm = norms.iter().copied().fold(0.0, f64::max);
        let n = frames.nrows();
        let blocks: Vec<(Vec<u16>, Vec<f64>)> = (0..n.div_ceil(BLOCK_ROWS))
            .into_par_iter()
            .map(|b| {
                let end = ((b + 1) * BLOCK_ROWS).min(n);
                let block = frames.slice(s![b * BLOCK_ROWS..end, ..]);
                self.nearest_block(block, &norms, max_norm)
            })
            .collect();
        let mut ids = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        for (i, d) in blocks {
            ids.extend(i);
            dists.extend(d);
        }
        Ok((ids, dists))
    }

    fn nearest_block(
        &self,
        block: ArrayView2<f64>,
        norms: &Array1<f64>,
        max_norm: f64,
    ) -> (Vec<u16>, Vec<f64>) {
        let cross = block.dot(&self.centroids.t());
        let mut ids = Vec::with_capacity(block.nrows());
        let mut dists = Vec::with_capacity(block.nrows());
        let mut candidates = Vec::new();
        for (x, row) in block.rows().into_iter().zip(cross.rows()) {
            let xn = x.dot(&x);
            let mut best = f64::INFINITY;
            for (c, &dot) in row.iter().enumerate() {
                best = best.min(norms[c] - 2.0 * dot);
            }
            let tol = 1e-10 * (xn + max_norm + 2.0 * (xn * max_norm).sqrt()) + 1e-300;
            candidates.clear();
            candidates.extend(
                row.iter()
                    .enumerate()
                    .filter(|&(c, &dot)| norms[c] - 2.0 * dot <= best + tol)
                    .map(|(c, _)| c),
            );
            let (mut arg, mut dist) = (candidates[0], f64::INFINITY);
            for &c in &candidates {
                let d = squared_distance(x, self.centroids.row(c));
                if d < dist {
                    arg = c;
                    dist = d;
                }
            }
            ids.push(arg as u16);
            dists.push(dist);
        }
        (ids, dists)
    }

    /// Token id of the nearest centroid for every row.
    pub fn assign(&self, frames: ArrayView2<f64>) -> Result<Vec<u16>> {
        Ok(self.nearest(frames)?.0)
    }

    pub fn tokenize(
        &self,
        clip_id: impl Into<String>,
        frames: ArrayView2<f64>,
        frames_per_second: f64,
    ) -> Result<TokenSequence> {
        Ok(TokenSequence {
            clip_id: clip_id.into(),
            tokens: self.assign(frames)?,
            frames_per_second,
        })
    }
}

/// Direct `sum (x - c)^2` in coordinate order.
pub fn squared_distance(x: ArrayView1<f64>, c: ArrayView1<f64>) -> f64 {
    x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Mean squared distance of each row to its nearest centroid.
pub fn kmeans_objective(book: &Codebook, data: ArrayView2<f64>) -> Result<f64> {
    let (_, dists) = book.nearest(data)?;
    Ok(mean(&dists))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn kmeans_plus_plus(data: ArrayView2<f64>, v: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((v, data.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|x| squared_distance(x, data.row(first)))
        .collect();

    for c in 1..v {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        let chosen = data.row(pick);
        d2.par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(squared_distance(data.row(i), chosen)));
    }
    centroids
}

/// Moves centroids to the mean of their members. Empty clusters take the
/// farthest member of the cluster with the largest squared error.
fn update_centroids(data: ArrayView2<f64>, labels: &[u16], centroids: &mut Array2<f64>) {
    let (v, k) = centroids.dim();
    let mut sums = Array2::<f64>::zeros((v, k));
    let mut counts = vec![0usize; v];
    for (x, &l) in data.rows().into_iter().zip(labels) {
        let l = l as usize;
        sums.row_mut(l).scaled_add(1.0, &x);
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = 1.0 / n as f64;
            centroids.row_mut(c).assign(&sums.row(c).mapv(|s| s * inv));
        }
    }
    let empties: Vec<usize> = (0..v).filter(|&c| counts[c] == 0).collect();
    if empties.is_empty() {
        return;
    }

    let mut dist: Vec<f64> = data
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(x, &l)| squared_distance(x, centroids.row(l as usize)))
        .collect();
    let mut sse = vec![0.0f64; v];
    for (&d, &l) in dist.iter().zip(labels) {
        sse[l as usize] += d;
    }
    for empty in empties {
        let Some(donor) = (0..v)
            .filter(|&c| counts[c] >= 2)
            .max_by(|&a, &b| sse[a].total_cmp(&sse[b]).then(b.cmp(&a)))
        else {
            break;
        };
        let far = (0..data.nrows())
            .filter(|&i| labels[i] as usize == donor)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
            .expect("donor has members");
        centroids.row_mut(empty).assign(&data.row(far));
        sse[donor] -= dist[far];
        counts[donor] -= 1;
        dist[far] = 0.0;
    }
}

/// Seeded k-means++ initialization followed by Lloyd iterations until
/// `max_iters` or a relative objective improvement below
/// [`CONVERGENCE_RTOL`].
pub fn fit_kmeans(data: ArrayView2<f64>, v: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    let n = data.nrows();
    if v == 0 || v > MAX_VOCAB {
        return Err(Error::Parameter(format!(
            "vocabulary size {v} outside 1..={MAX_VOCAB}"
        )));
    }
    if n < v {
        return Err(Error::Data(format!("{n} points cannot fill {v} clusters")));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite value in k-means input".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut book = Codebook {
        centroids: kmeans_plus_plus(data, v, &mut rng),
        seed,
        iterations_run: 0,
        final_objective: 0.0,
        objective_history: Vec::new(),
    };
    let (mut labels, dists) = book.nearest(data)?;
    let mut objective = mean(&dists);
    book.objective_history.push(objective);

    for it in 1..=max_iters {
        update_centroids(data, &labels, &mut book.centroids);
        let (next_labels, dists) = book.nearest(data)?;
        let next = mean(&dists);
        book.objective_history.push(next);
        book.iterations_run = it;
        labels = next_labels;
        let improvement = objective - next;
        objective = next;
        if improvement <= CONVERGENCE_RTOL * objective.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    book.final_objective = objective;
    Ok(book)
}
