//! PCA over normalized Mel frames.
//!
//! The model is fit by accumulating the sample covariance (`d x d`, single pass
//! over row shards) and taking its symmetric eigendecomposition. Projections are
//! not whitened.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rows per covariance shard. Fixed so the reduction order never depends on
/// the number of worker threads.
const SHARD_ROWS: usize = 2048;

/// Eigenvalues at or below this fraction of the largest are treated as zero.
const DEGENERATE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `k x input_dim`, rows are orthonormal principal directions.
    pub components: Array2<f64>,
    pub explained_variance: Array1<f64>,
    pub explained_variance_ratio: Array1<f64>,
    /// Components spanning (numerically) zero variance; their ratio is 0.
    pub degenerate: Vec<bool>,
    pub seed: u64,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn cumulative_ratio(&self) -> f64 {
        self.explained_variance_ratio.sum()
    }

    /// `(frames - mean) . components^T`
    pub fn transform(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} columns", self.input_dim()),
                format!("{} columns", frames.ncols()),
            ));
        }
        let centered = &frames - &self.mean;
        Ok(centered.dot(&self.components.t()))
    }

    /// Maps reduced coordinates back into the input space.
    pub fn reconstruct(&self, reduced: ArrayView2<f64>) -> Result<Array2<f64>> {
        if reduced.ncols() != self.k() {
            return Err(Error::shape(
                format!("{} columns", self.k()),
                format!("{} columns", reduced.ncols()),
            ));
        }
        Ok(reduced.dot(&self.components) + &self.mean)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let k = self.k();
        if self.components.ncols() != self.input_dim()
            || self.explained_variance_ratio.len() != k
            || self.explained_variance.len() != k
            || self.degenerate.len() != k
        {
            return Err(Error::Data("inconsistent PCA model shapes".into()));
        }
        if self.components.iter().chain(self.mean.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite PCA parameters".into()));
        }
        let gram = self.components.dot(&self.components.t());
        for ((i, j), &g) in gram.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            if (g - target).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "components not orthonormal: gram[{i},{j}] = {g}"
                )));
            }
        }
        let r = &self.explained_variance_ratio;
        if r.iter().any(|&v| !(0.0..=1.0).contains(&v))
            || r.windows(2).into_iter().any(|w| w[1] > w[0] + 1e-12)
            || r.sum() > 1.0 + 1e-9
        {
            return Err(Error::Data("explained variance ratios out of order".into()));
        }
        Ok(())
    }
}

/// Uniformly samples `n` rows without replacement (all rows when `n` covers
/// the input). Row order is preserved.
pub fn subsample_rows(frames: ArrayView2<f64>, n: usize, seed: u64) -> Array2<f64> {
    if n >= frames.nrows() {
        return frames.to_owned();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, frames.nrows(), n).into_vec();
    idx.sort_unstable();
    frames.select(Axis(0), &idx)
}

fn covariance(frames: ArrayView2<f64>, mean: &Array1<f64>) -> Array2<f64> {
    let d = frames.ncols();
    let n = frames.nrows();
    let shards: Vec<Array2<f64>> = (0..n.div_ceil(SHARD_ROWS))
        .into_par_iter()
        .map(|i| {
            let end = ((i + 1) * SHARD_ROWS).min(n);
            let centered = &frames.slice(s![i * SHARD_ROWS..end, ..]) - mean;
            centered.t().dot(&centered)
        })
        .collect();
    let mut cov = Array2::zeros((d, d));
    for part in &shards {
        cov += part;
    }
    cov / (n.max(2) - 1) as f64
}

/// Fits a `k`-component PCA. Components follow a deterministic sign
/// convention: the entry of largest magnitude in each is positive.
pub fn fit_pca(frames: ArrayView2<f64>, k: usize, seed: u64) -> Result<PcaModel> {
    let (n, d) = frames.dim();
    if n == 0 || d == 0 {
        return Err(Error::Data("cannot fit PCA on empty input".into()));
    }
    if k == 0 || k > d || k > n {
        return Err(Error::Parameter(format!(
            "need 1 <= k <= min(samples, dim); got k={k}, samples={n}, dim={d}"
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in PCA input".into()));
    }

    let mean = frames.mean_axis(Axis(0)).expect("non-empty");
    let cov = covariance(frames, &mean);
    let total: f64 = cov.diag().sum();

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.as_slice().unwrap()));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);

    let mut components = Array2::zeros((k, d));
    let mut variance = Array1::zeros(k);
    let mut ratio = Array1::zeros(k);
    let mut degenerate = vec![false; k];
    for (row, &src) in order.iter().take(k).enumerate() {
        let vec = eig.eigenvectors.column(src);
        let pivot = vec
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in vec.iter().enumerate() {
            components[[row, j]] = sign * v;
        }
        let lambda = eig.eigenvalues[src];
        if total <= 0.0 || lambda <= DEGENERATE_RTOL * top {
            degenerate[row] = true;
        } else {
            variance[row] = lambda;
            ratio[row] = (lambda / total).min(1.0);
        }
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance: variance,
        explained_variance_ratio: ratio,
        degenerate,
        seed,
    })
}

/// Free-function form of [`PcaModel::transform`].
pub fn pca_transform(model: &PcaModel, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
    model.transform(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    /// `rank` orthonormal directions in `dim` dims via Gram-Schmidt.
    fn basis(rank: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut b = gaussian(rank, dim, seed);
        for i in 0..rank {
            for j in 0..i {
                let proj = b.row(i).dot(&b.row(j));
                let bj = b.row(j).to_owned();
                b.row_mut(i).scaled_add(-proj, &bj);
            }
            let norm = b.row(i).dot(&b.row(i)).sqrt();
            b.row_mut(i).mapv_inplace(|v| v / norm);
        }
        b
    }

    fn low_rank(n: usize, rank: usize, dim: usize, noise: f64, seed: u64) -> Array2<f64> {
        let scales = Array1::from_iter((0..rank).map(|i| 5.0 - 0.7 * i as f64));
        let coeffs = gaussian(n, rank, seed) * &scales;
        let mut x = coeffs.dot(&basis(rank, dim, seed + 1));
        x += 3.0;
        if noise > 0.0 {
            x += &(gaussian(n, dim, seed + 2) * noise);
        }
        x
    }

    #[test]
    fn rank_five_subspace_is_recovered() {
        let x = low_rank(400, 5, 32, 1e-4, 7);
        let model = fit_pca(x.view(), 5, 0).unwrap();
        model.check_invariants().unwrap();
        assert!(model.cumulative_ratio() >= 0.999);

        // oracle: full eigendecomposition of the covariance computed naively
        let mean = x.mean_axis(Axis(0)).unwrap();
        let c = &x - &mean;
        let cov = c.t().dot(&c) / (x.nrows() - 1) as f64;
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(32, 32, cov.as_slice().unwrap()));
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = vals.iter().sum();
        let top5: f64 = vals[..5].iter().sum::<f64>() / total;
        assert!((top5 - model.cumulative_ratio()).abs() < 1e-9);
    }

    #[test]
    fn full_basis_explains_everything() {
        let x = gaussian(50, 12, 3);
        let model = fit_pca(x.view(), 12, 0).unwrap();
        assert!((model.cumulative_ratio() - 1.0).abs() < 1e-9);
        assert!(model.degenerate.iter().all(|d| !d));
    }

    #[test]
    fn k_beyond_rank_flags_degenerate_components() {
        let x = low_rank(60, 3, 10, 0.0, 5);
        let model = fit_pca(x.view(), 6, 0).unwrap();
        model.check_invariants().unwrap();
        assert_eq!(model.degenerate, vec![false, false, false, true, true, true]);
        assert_eq!(model.explained_variance_ratio[4], 0.0);
        assert!((model.cumulative_ratio() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mean_maps_to_origin_and_round_trip_is_exact_on_rank_k_data() {
        let x = low_rank(200, 4, 16, 0.0, 11);
        let model = fit_pca(x.view(), 4, 0).unwrap();
        let z = model.transform(model.mean.view().insert_axis(Axis(0))).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-12));

        let back = model.reconstruct(model.transform(x.view()).unwrap().view()).unwrap();
        let rms = ((&back - &x).mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!(rms < 1e-6, "rms {rms}");
    }

    #[test]
    fn projection_is_an_isometry_on_the_retained_span() {
        let x = low_rank(200, 4, 16, 0.0, 13);
        let model = fit_pca(x.view(), 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = Array1::from(a).dot(&model.components);
            let v = Array1::from(b).dot(&model.components);
            let pts = ndarray::stack(Axis(0), &[(&u + &model.mean).view(), (&v + &model.mean).view()])
                .unwrap();
            let z = model.transform(pts.view()).unwrap();
            assert!((z.row(0).dot(&z.row(1)) - u.dot(&v)).abs() < 1e-6);
        }
    }

    #[test]
    fn ratios_match_transformed_variance() {
        let x = gaussian(300, 8, 21) * Array1::from_iter((0..8).map(|i| 1.0 + i as f64));
        let model = fit_pca(x.view(), 5, 0).unwrap();
        let z = model.transform(x.view()).unwrap();
        let total: f64 = x.var_axis(Axis(0), 1.0).sum();
        for (j, col) in z.columns().into_iter().enumerate() {
            let v = col.var(1.0);
            assert!((v / total - model.explained_variance_ratio[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn shard_count_does_not_change_the_fit() {
        let x = gaussian(3 * SHARD_ROWS + 17, 6, 2);
        let a = fit_pca(x.view(), 3, 0).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| fit_pca(x.view(), 3, 0).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let model = fit_pca(gaussian(100, 9, 4).view(), 9, 0).unwrap();
        for row in model.components.rows() {
            let pivot = row.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn input_errors() {
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(matches!(fit_pca(empty.view(), 1, 0), Err(Error::Data(_))));
        let x = gaussian(10, 4, 0);
        assert!(fit_pca(x.view(), 5, 0).is_err());
        assert!(fit_pca(x.view(), 0, 0).is_err());
        let model = fit_pca(x.view(), 2, 0).unwrap();
        assert!(matches!(
            model.transform(gaussian(3, 5, 0).view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn subsample_is_seeded() {
        let x = gaussian(100, 3, 0);
        let a = subsample_rows(x.view(), 10, 4);
        assert_eq!(a, subsample_rows(x.view(), 10, 4));
        assert_eq!(a.nrows(), 10);
        assert_eq!(subsample_rows(x.view(), 1000, 4), x);
    }
}
