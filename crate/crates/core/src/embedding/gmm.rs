//! Gaussian mixture background model trained by EM.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// EM stops once the per-frame log-likelihood improves by less than this.
pub const EM_TOLERANCE: f64 = 1e-6;
/// Variance floor as a fraction of the pooled per-dimension variance.
pub const VARIANCE_FLOOR_RATIO: f64 = 1e-4;
const MIN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceType {
    Diagonal,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariances {
    /// `K x d`, one row of variances per component.
    Diagonal(DMatrix<f64>),
    /// `K` symmetric positive definite `d x d` matrices.
    Full(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    weights: DVector<f64>,
    means: DMatrix<f64>,
    covariances: Covariances,
    variance_floor: DVector<f64>,
}

impl Gmm {
    pub fn new(
        weights: DVector<f64>,
        means: DMatrix<f64>,
        covariances: Covariances,
        variance_floor: DVector<f64>,
    ) -> Result<Self> {
        let (k, d) = means.shape();
        if k == 0 || d == 0 {
            return Err(Error::Validation("GMM needs at least one component and dimension".into()));
        }
        if weights.len() != k || variance_floor.len() != d {
            return Err(Error::Validation("GMM weight/floor lengths do not match means".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::Validation("GMM weights must be nonnegative and sum to 1".into()));
        }
        match &covariances {
            Covariances::Diagonal(v) => {
                if v.shape() != (k, d) {
                    return Err(Error::Validation("diagonal covariance shape mismatch".into()));
                }
                for r in 0..k {
                    for c in 0..d {
                        if !(v[(r, c)] >= variance_floor[c]) || !(v[(r, c)] > 0.0) {
                            return Err(Error::Validation(format!(
                                "component {r} variance {} below floor in dim {c}",
                                v[(r, c)]
                            )));
                        }
                    }
                }
            }
            Covariances::Full(covs) => {
                if covs.len() != k || covs.iter().any(|c| c.shape() != (d, d)) {
                    return Err(Error::Validation("full covariance shape mismatch".into()));
                }
                for (i, c) in covs.iter().enumerate() {
                    if (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0)
                        || Cholesky::new(c.clone()).is_none()
                    {
                        return Err(Error::Validation(format!(
                            "component {i} covariance is not symmetric positive definite"
                        )));
                    }
                }
            }
        }
        Ok(Gmm {
            weights,
            means,
            covariances,
            variance_floor,
        })
    }

    pub fn n_components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn covariances(&self) -> &Covariances {
        &self.covariances
    }

    pub fn variance_floor(&self) -> &DVector<f64> {
        &self.variance_floor
    }

    pub fn covariance_type(&self) -> CovarianceType {
        match self.covariances {
            Covariances::Diagonal(_) => CovarianceType::Diagonal,
            Covariances::Full(_) => CovarianceType::Full,
        }
    }

    /// Component posteriors (`N x K`) and per-frame log-likelihoods.
    pub fn posteriors(&self, frames: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if frames.ncols() != self.dim() {
            return Err(Error::Argument(format!(
                "frames have width {}, GMM expects {}",
                frames.ncols(),
                self.dim()
            )));
        }
        let scorer = Scorer::new(self);
        let (n, k) = (frames.nrows(), self.n_components());
        let mut resp = DMatrix::zeros(n, k);
        let mut loglik = DVector::zeros(n);
        let mut row = vec![0.0; k];
        for t in 0..n {
            let x = frames.row(t).transpose();
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = scorer.log_weighted_density(j, &x);
            }
            let lse = log_sum_exp(&row);
            loglik[t] = lse;
            for j in 0..k {
                resp[(t, j)] = (row[j] - lse).exp();
            }
        }
        Ok((resp, loglik))
    }

    /// Mean per-frame log-likelihood.
    pub fn mean_log_likelihood(&self, frames: &DMatrix<f64>) -> Result<f64> {
        let (_, ll) = self.posteriors(frames)?;
        Ok(ll.mean())
    }
}

/// Per-component constants reused across frames.
struct Scorer<'a> {
    gmm: &'a Gmm,
    log_norm: Vec<f64>,
    chol: Vec<Cholesky<f64, Dyn>>,
}

impl<'a> Scorer<'a> {
    fn new(gmm: &'a Gmm) -> Self {
        let d = gmm.dim() as f64;
        let base = -0.5 * d * (2.0 * PI).ln();
        let mut log_norm = Vec::with_capacity(gmm.n_components());
        let mut chol = Vec::new();
        match &gmm.covariances {
            Covariances::Diagonal(v) => {
                for k in 0..gmm.n_components() {
                    let logdet: f64 = v.row(k).iter().map(|s| s.ln()).sum();
                    log_norm.push(gmm.weights[k].ln() + base - 0.5 * logdet);
                }
            }
            Covariances::Full(covs) => {
                for (k, c) in covs.iter().enumerate() {
                    let l = Cholesky::new(c.clone()).expect("validated SPD covariance");
                    let logdet: f64 = 2.0 * l.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
                    log_norm.push(gmm.weights[k].ln() + base - 0.5 * logdet);
                    chol.push(l);
                }
            }
        }
        Scorer { gmm, log_norm, chol }
    }

    /// `log w_k + log N(x | mu_k, Sigma_k)`.
    fn log_weighted_density(&self, k: usize, x: &DVector<f64>) -> f64 {
        let mean = self.gmm.means.row(k);
        let maha = match &self.gmm.covariances {
            Covariances::Diagonal(v) => (0..x.len())
                .map(|j| {
                    let diff = x[j] - mean[j];
                    diff * diff / v[(k, j)]
                })
                .sum::<f64>(),
            Covariances::Full(_) => {
                let diff = x - mean.transpose();
                let z = self.chol[k]
                    .l_dirty()
                    .solve_lower_triangular(&diff)
                    .expect("nonsingular Cholesky factor");
                z.norm_squared()
            }
        };
        self.log_norm[k] - 0.5 * maha
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// A trained background model together with its EM trace.
#[derive(Debug, Clone)]
pub struct UbmFit {
    pub gmm: Gmm,
    /// Mean per-frame log-likelihood of the initial model, then of the model
    /// after each EM iteration. The last entry belongs to `gmm`.
    pub log_likelihood: Vec<f64>,
}

/// Trains a GMM on pooled frames. See [`train_ubm_traced`].
pub fn train_ubm(
    frames: &DMatrix<f64>,
    k_components: usize,
    cov_type: CovarianceType,
    n_iters: usize,
    seed: u64,
) -> Result<Gmm> {
    Ok(train_ubm_traced(frames, k_components, cov_type, n_iters, seed)?.gmm)
}

/// EM training of a `k_components` GMM, initialized with seeded k-means++
/// centres, global covariance and uniform weights.
///
/// Runs at most `n_iters` iterations and stops early once the mean per-frame
/// log-likelihood improves by less than [`EM_TOLERANCE`]. Variances are floored
/// at [`VARIANCE_FLOOR_RATIO`] times the pooled per-dimension variance.
pub fn train_ubm_traced(
    frames: &DMatrix<f64>,
    k_components: usize,
    cov_type: CovarianceType,
    n_iters: usize,
    seed: u64,
) -> Result<UbmFit> {
    let (n, d) = frames.shape();
    if k_components == 0 {
        return Err(Error::Argument("k_components must be positive".into()));
    }
    if n_iters == 0 {
        return Err(Error::Argument("n_iters must be positive".into()));
    }
    if d == 0 {
        return Err(Error::Argument("frames have zero width".into()));
    }
    if n < k_components {
        return Err(Error::Argument(format!(
            "{n} frames cannot support {k_components} mixture components"
        )));
    }

    let global_mean = frames.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |r, c| frames[(r, c)] - global_mean[c]);
    let global_cov = centred.transpose() * &centred / n as f64;
    let floor = DVector::from_fn(d, |j, _| (VARIANCE_FLOOR_RATIO * global_cov[(j, j)]).max(MIN_FLOOR));

    let means = kmeans_plus_plus(frames, k_components, seed);
    let covariances = match cov_type {
        CovarianceType::Diagonal => Covariances::Diagonal(DMatrix::from_fn(k_components, d, |_, j| {
            global_cov[(j, j)].max(floor[j])
        })),
        CovarianceType::Full => {
            let c = floor_full_covariance(&global_cov, &floor);
            Covariances::Full(vec![c; k_components])
        }
    };
    let weights = DVector::from_element(k_components, 1.0 / k_components as f64);
    let mut gmm = Gmm::new(weights, means, covariances, floor)?;

    let (mut resp, ll) = gmm.posteriors(frames)?;
    let mut trace = vec![ll.mean()];
    for _ in 0..n_iters {
        gmm = m_step(&gmm, frames, &resp)?;
        let (next_resp, ll) = gmm.posteriors(frames)?;
        resp = next_resp;
        let ll = ll.mean();
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if ll - prev < EM_TOLERANCE {
            break;
        }
    }
    Ok(UbmFit {
        gmm,
        log_likelihood: trace,
    })
}

fn m_step(prev: &Gmm, frames: &DMatrix<f64>, resp: &DMatrix<f64>) -> Result<Gmm> {
    let (n, d) = frames.shape();
    let k = prev.n_components();
    let floor = prev.variance_floor.clone();
    let counts: Vec<f64> = (0..k).map(|j| resp.column(j).sum()).collect();
    let total: f64 = counts.iter().sum();
    let weights = DVector::from_iterator(k, counts.iter().map(|c| c / total));

    let mut means = prev.means.clone();
    for j in 0..k {
        if counts[j] <= 0.0 {
            continue;
        }
        let mut acc = DVector::zeros(d);
        for t in 0..n {
            acc.axpy(resp[(t, j)], &frames.row(t).transpose(), 1.0);
        }
        means.set_row(j, &(acc / counts[j]).transpose());
    }

    let covariances = match &prev.covariances {
        Covariances::Diagonal(old) => {
            let mut v = old.clone();
            for j in 0..k {
                if counts[j] <= 0.0 {
                    continue;
                }
                for c in 0..d {
                    let mut acc = 0.0;
                    for t in 0..n {
                        let diff = frames[(t, c)] - means[(j, c)];
                        acc += resp[(t, j)] * diff * diff;
                    }
                    v[(j, c)] = (acc / counts[j]).max(floor[c]);
                }
            }
            Covariances::Diagonal(v)
        }
        Covariances::Full(old) => {
            let mut covs = old.clone();
            for j in 0..k {
                if counts[j] <= 0.0 {
                    continue;
                }
                let mut acc = DMatrix::zeros(d, d);
                for t in 0..n {
                    let diff = frames.row(t).transpose() - means.row(j).transpose();
                    acc.ger(resp[(t, j)], &diff, &diff, 1.0);
                }
                covs[j] = floor_full_covariance(&(acc / counts[j]), &floor);
            }
            Covariances::Full(covs)
        }
    };
    Gmm::new(weights, means, covariances, floor)
}

/// Closest covariance (in the ML sense) satisfying `Sigma >= diag(floor)`:
/// whiten by the floor, clip eigenvalues at 1, and map back.
fn floor_full_covariance(cov: &DMatrix<f64>, floor: &DVector<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    let s = floor.map(f64::sqrt);
    let whitened = DMatrix::from_fn(d, d, |r, c| cov[(r, c)] / (s[r] * s[c]));
    let whitened = (&whitened + whitened.transpose()) * 0.5;
    let eig = SymmetricEigen::new(whitened);
    let clipped = eig.eigenvalues.map(|l| l.max(1.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let out = DMatrix::from_fn(d, d, |r, c| rebuilt[(r, c)] * s[r] * s[c]);
    (&out + out.transpose()) * 0.5
}

/// Seeded k-means++ centre selection: the first centre is uniform, later ones
/// are sampled proportionally to squared distance from the nearest centre.
fn kmeans_plus_plus(frames: &DMatrix<f64>, k: usize, seed: u64) -> DMatrix<f64> {
    let (n, d) = frames.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = DMatrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centres.set_row(0, &frames.row(first));
    let mut nearest: Vec<f64> = (0..n)
        .map(|t| (frames.row(t) - frames.row(first)).norm_squared())
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (t, w) in nearest.iter().enumerate() {
                if u < *w {
                    chosen = t;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centres.set_row(c, &frames.row(pick));
        for (t, slot) in nearest.iter_mut().enumerate() {
            let dist = (frames.row(t) - frames.row(pick)).norm_squared();
            if dist < *slot {
                *slot = dist;
            }
        }
    }
    centres
}
