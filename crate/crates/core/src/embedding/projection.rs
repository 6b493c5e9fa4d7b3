use nalgebra::{DMatrix, DVector, SVD};

use crate::{Error, Result};

/// Linear map from centred supervectors to a low-dimensional embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    mean: DVector<f64>,
    /// `D x S`, orthonormal rows.
    basis: DMatrix<f64>,
}

impl Projection {
    pub fn new(mean: DVector<f64>, basis: DMatrix<f64>) -> Result<Self> {
        if basis.ncols() != mean.len() || basis.nrows() == 0 {
            return Err(Error::Validation(format!(
                "projection basis {}x{} does not match mean length {}",
                basis.nrows(),
                basis.ncols(),
                mean.len()
            )));
        }
        let gram = &basis * basis.transpose();
        let err = (gram - DMatrix::identity(basis.nrows(), basis.nrows())).amax();
        if err > 1e-8 {
            return Err(Error::Validation(format!(
                "projection basis rows are not orthonormal (max error {err:e})"
            )));
        }
        Ok(Projection { mean, basis })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// `basis * (v - mean)`.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.mean.len() {
            return Err(Error::Argument(format!(
                "supervector length {} does not match projection input {}",
                v.len(),
                self.mean.len()
            )));
        }
        Ok(&self.basis * (v - &self.mean))
    }
}

/// PCA on the rows of `supervectors` (`N x S`), keeping the `target_dim`
/// leading principal directions.
///
/// Each basis row is signed so that its largest-magnitude coordinate (first
/// one on ties) is positive.
pub fn fit_projection(supervectors: &DMatrix<f64>, target_dim: usize) -> Result<Projection> {
    let (n, s) = supervectors.shape();
    if n < 2 {
        return Err(Error::Argument(format!(
            "projection needs at least 2 supervectors, got {n}"
        )));
    }
    if target_dim == 0 || target_dim > (n - 1).min(s) {
        return Err(Error::Argument(format!(
            "target_dim {target_dim} must be in [1, {}] for {n} supervectors of length {s}",
            (n - 1).min(s)
        )));
    }
    let mean = supervectors.row_mean().transpose();
    let centred = DMatrix::from_fn(n, s, |r, c| supervectors[(r, c)] - mean[c]);
    let svd = SVD::new(centred, false, true);
    let v_t = svd.v_t.expect("requested V^T");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut basis = DMatrix::zeros(target_dim, s);
    for (row, &src) in order.iter().take(target_dim).enumerate() {
        let mut v = v_t.row(src).clone_owned();
        let mut pivot = 0;
        for j in 1..s {
            if v[j].abs() > v[pivot].abs() {
                pivot = j;
            }
        }
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        basis.set_row(row, &v);
    }
    Projection::new(mean, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    #[test]
    fn rank_one_line() {
        let dir = DVector::from_vec(vec![1.0, 3.0, -2.0]) / 14f64.sqrt();
        let offset = DVector::from_vec(vec![0.5, 0.5, 0.5]);
        let ts = [-2.0, -0.5, 1.0, 3.0, 4.5];
        let x = DMatrix::from_fn(ts.len(), 3, |r, c| offset[c] + ts[r] * dir[c]);
        let p = fit_projection(&x, 1).unwrap();
        let row = p.basis().row(0).transpose();
        assert!((row.dot(&dir).abs() - 1.0).abs() < 1e-12);
        // Largest-magnitude coordinate (slot 1) is positive.
        assert!(row[1] > 0.0);
        let total: f64 = (0..ts.len())
            .map(|r| (x.row(r).transpose() - p.mean()).norm_squared())
            .sum();
        let projected: f64 = (0..ts.len())
            .map(|r| p.apply(&x.row(r).transpose()).unwrap().norm_squared())
            .sum();
        assert!((total - projected).abs() < 1e-10);
    }

    #[test]
    fn target_dim_bounds() {
        let x = DMatrix::from_fn(3, 5, |r, c| (r * c) as f64);
        assert!(matches!(fit_projection(&x, 3), Err(Error::Argument(_))));
        assert!(matches!(fit_projection(&x, 0), Err(Error::Argument(_))));
        assert!(fit_projection(&x.rows(0, 1).into_owned(), 1).is_err());
    }

    #[test]
    fn reconstruction_error_is_discarded_eigen_mass() {
        // Fixed pseudo-random 6x4 matrix.
        let vals = [
            0.31, -1.20, 0.77, 2.05, -0.44, 0.98, 1.63, -0.27, 0.05, 1.11, -1.76, 0.62, 2.40,
            -0.93, 0.18, -0.51, -1.07, 0.36, 0.84, 1.49, 0.72, -0.15, -2.21, 0.09,
        ];
        let x = DMatrix::from_row_slice(6, 4, &vals);
        let p = fit_projection(&x, 2).unwrap();

        // Oracle: eigen-decomposition of the centred scatter matrix.
        let mean = x.row_mean();
        let c = DMatrix::from_fn(6, 4, |r, k| x[(r, k)] - mean[k]);
        let scatter = c.transpose() * &c;
        let mut eig: Vec<f64> = SymmetricEigen::new(scatter).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let discarded: f64 = eig[2..].iter().sum();

        let recon_err: f64 = (0..6)
            .map(|r| {
                let v = x.row(r).transpose();
                let z = p.apply(&v).unwrap();
                let back = p.basis().transpose() * z + p.mean();
                (v - back).norm_squared()
            })
            .sum();
        assert!((recon_err - discarded).abs() < 1e-10, "{recon_err} vs {discarded}");
    }

    #[test]
    fn rows_orthonormal() {
        let x = DMatrix::from_fn(12, 9, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0 + (r as f64).sin());
        let p = fit_projection(&x, 5).unwrap();
        let g = p.basis() * p.basis().transpose();
        assert!((g - DMatrix::identity(5, 5)).amax() < 1e-8);
    }
}
