//! FastICA: symmetric fixed-point iteration with the log-cosh contrast.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GaussianBelief;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcaOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IcaOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-8,
            seed: 0,
        }
    }
}

/// `s = unmixing * (x - mean)`, `x = mixing * s + mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaTransform {
    pub mean: Vec<f64>,
    pub unmixing: DMatrix<f64>,
    pub mixing: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `(W W^T)^{-1/2} W`
fn decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose() * w
}

/// Fit on the rows of `x` (n samples, m columns).
pub fn ica_fit(x: &DMatrix<f64>, opts: &IcaOptions) -> Result<IcaTransform> {
    let (n, m) = x.shape();
    if n <= m {
        return Err(Error::InvalidData(format!(
            "ICA needs more samples than columns, got {n} x {m}"
        )));
    }
    let mean: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let mut xc = x.transpose();
    for (j, mu) in mean.iter().enumerate() {
        xc.row_mut(j).add_scalar_mut(-mu);
    }
    let cov = &xc * xc.transpose() / n as f64;
    let eig = SymmetricEigen::new(cov);
    let largest = eig.eigenvalues.max();
    let smallest = eig.eigenvalues.min();
    if !(largest > 0.0) || smallest < 1e-10 * largest {
        return Err(Error::RankDeficient {
            eigenvalue: smallest,
            largest,
        });
    }
    let whitening = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * eig.eigenvectors.transpose();
    let z = &whitening * &xc;

    let mut r = rng::stream(opts.seed, &[rng::tag::ICA]);
    let init = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(&mut r));
    let mut w = decorrelate(&init);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iters {
        iterations = it + 1;
        let wz = &w * &z;
        let g = wz.map(f64::tanh);
        let gp_mean = DVector::from_iterator(
            m,
            g.row_iter()
                .map(|row| row.iter().map(|t| 1.0 - t * t).sum::<f64>() / n as f64),
        );
        let mut next = &g * z.transpose() / n as f64;
        for i in 0..m {
            let scaled = w.row(i) * gp_mean[i];
            let mut row = next.row_mut(i);
            row -= scaled;
        }
        let next = decorrelate(&next);
        let change = (&next * w.transpose())
            .diagonal()
            .iter()
            .map(|v| (v.abs() - 1.0).abs())
            .fold(0.0f64, f64::max);
        w = next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("ICA stopped after {iterations} iterations without converging");
    }
    let unmixing = &w * whitening;
    let mixing = unmixing.clone().try_inverse().ok_or(Error::RankDeficient {
        eigenvalue: 0.0,
        largest,
    })?;
    Ok(IcaTransform {
        mean,
        unmixing,
        mixing,
        iterations,
        converged,
    })
}

impl IcaTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let c = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        Ok((&self.unmixing * c).iter().copied().collect())
    }

    /// Rows of `x` mapped to source coordinates.
    pub fn transform_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        let mut c = x.clone();
        for (j, mu) in self.mean.iter().enumerate() {
            c.column_mut(j).add_scalar_mut(-mu);
        }
        Ok(c * self.unmixing.transpose())
    }

    /// Means map linearly; variances take the diagonal of
    /// `A diag(var) A^T`, dropping the induced correlations.
    pub fn transform_beliefs(&self, beliefs: &[GaussianBelief]) -> Result<Vec<GaussianBelief>> {
        let means: Vec<f64> = beliefs.iter().map(|b| b.mean).collect();
        let mu = self.transform_point(&means)?;
        Ok(self
            .unmixing
            .row_iter()
            .zip(mu)
            .map(|(row, mean)| GaussianBelief {
                mean,
                variance: row
                    .iter()
                    .zip(beliefs)
                    .map(|(a, b)| a * a * b.variance)
                    .sum(),
            })
            .collect())
    }
}
