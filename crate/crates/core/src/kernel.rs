//! Covariance functions and Gram-matrix assembly.
//!
//! The squared-exponential kernel is parametrized by per-dimension rates
//! `theta_j` rather than lengthscales:
//!
//! `k(a, b) = phi * exp(-sum_j theta_j (a_j - b_j)^2)`
//!
//! The polynomial kernel is the plain `(a . b)^d` with no offset term.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squared-exponential kernel with automatic relevance determination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    variance: f64,
    rates: Vec<f64>,
}

impl RbfKernel {
    pub fn new(variance: f64, rates: Vec<f64>) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidKernel(format!(
                "rbf variance must be positive, got {variance}"
            )));
        }
        if rates.is_empty() {
            return Err(Error::InvalidKernel("rbf needs at least one rate".into()));
        }
        if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidKernel(format!(
                "rbf rates must be positive, got {r}"
            )));
        }
        Ok(Self { variance, rates })
    }

    pub fn isotropic(variance: f64, rate: f64, dim: usize) -> Result<Self> {
        Self::new(variance, vec![rate; dim])
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((x, y), t) in a.iter().zip(b).zip(&self.rates) {
            let d = x - y;
            s += t * d * d;
        }
        self.variance * (-s).exp()
    }
}

/// Polynomial kernel `(a . b)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolynomialKernel {
    degree: u32,
}

impl PolynomialKernel {
    pub fn new(degree: u32) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidKernel(
                "polynomial degree must be >= 1".into(),
            ));
        }
        Ok(Self { degree })
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot.powi(self.degree as i32)
    }
}

/// One summand of a [`SumKernel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KernelPart {
    Rbf(RbfKernel),
    Poly(PolynomialKernel),
}

impl KernelPart {
    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelPart::Rbf(k) => k.eval_unchecked(a, b),
            KernelPart::Poly(k) => k.eval_unchecked(a, b),
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            KernelPart::Rbf(k) => Some(k.dim()),
            KernelPart::Poly(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumKernel {
    parts: Vec<KernelPart>,
}

impl SumKernel {
    pub fn new(parts: Vec<KernelPart>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidKernel(
                "sum kernel needs at least one part".into(),
            ));
        }
        let dims: Vec<usize> = parts.iter().filter_map(KernelPart::dim).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidKernel(
                "sum kernel parts disagree on input dimension".into(),
            ));
        }
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[KernelPart] {
        &self.parts
    }
}

/// A covariance function usable by a GP node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Rbf(RbfKernel),
    Poly(PolynomialKernel),
    Sum(SumKernel),
}

impl From<KernelPart> for Kernel {
    fn from(p: KernelPart) -> Self {
        match p {
            KernelPart::Rbf(k) => Kernel::Rbf(k),
            KernelPart::Poly(k) => Kernel::Poly(k),
        }
    }
}

impl Kernel {
    pub fn rbf(variance: f64, rates: Vec<f64>) -> Result<Self> {
        Ok(Kernel::Rbf(RbfKernel::new(variance, rates)?))
    }

    pub fn poly(degree: u32) -> Result<Self> {
        Ok(Kernel::Poly(PolynomialKernel::new(degree)?))
    }

    pub fn sum(parts: Vec<KernelPart>) -> Result<Self> {
        Ok(Kernel::Sum(SumKernel::new(parts)?))
    }

    /// Short name used in model and config files.
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Rbf(_) => "rbf",
            Kernel::Poly(_) => "poly",
            Kernel::Sum(_) => "sum",
        }
    }

    /// The kernel as a list of summands (a single entry unless this is a sum).
    pub fn parts(&self) -> Vec<KernelPart> {
        match self {
            Kernel::Rbf(k) => vec![KernelPart::Rbf(k.clone())],
            Kernel::Poly(k) => vec![KernelPart::Poly(*k)],
            Kernel::Sum(s) => s.parts.clone(),
        }
    }

    /// Input dimension fixed by the hyperparameters; `None` for kernels that
    /// accept any dimension.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Kernel::Rbf(k) => Some(k.dim()),
            Kernel::Poly(_) => None,
            Kernel::Sum(s) => s.parts.iter().find_map(KernelPart::dim),
        }
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match self.input_dim() {
            Some(expected) if expected != dim => {
                Err(Error::DimensionMismatch { expected, got: dim })
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        self.check_dim(a.len())?;
        Ok(self.eval_unchecked(a, b))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Kernel::Rbf(k) => k.eval_unchecked(a, b),
            Kernel::Poly(k) => k.eval_unchecked(a, b),
            Kernel::Sum(s) => s.parts.iter().map(|p| p.eval_unchecked(a, b)).sum(),
        }
    }

    /// Gram matrix over the rows of `x` (one point per row).
    pub fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.ncols())?;
        Ok(self.gram_of_points(&x.transpose()))
    }

    /// Gram matrix over the columns of `points` (one point per column).
    pub(crate) fn gram_of_points(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let n = points.ncols();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            let a = points.column(i);
            let a = a.as_slice();
            for j in 0..=i {
                let v = self.eval_unchecked(a, points.column(j).as_slice());
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Number of free hyperparameters (RBF variances and rates).
    pub fn n_params(&self) -> usize {
        self.parts()
            .iter()
            .map(|p| match p {
                KernelPart::Rbf(k) => 1 + k.dim(),
                KernelPart::Poly(_) => 0,
            })
            .sum()
    }

    /// Free hyperparameters in log space: `[ln phi, ln theta_1, ..]` per RBF part.
    pub fn log_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for p in self.parts() {
            if let KernelPart::Rbf(k) = p {
                out.push(k.variance.ln());
                out.extend(k.rates.iter().map(|r| r.ln()));
            }
        }
        out
    }

    /// Rebuild the kernel from log-space hyperparameters laid out as in
    /// [`Kernel::log_params`].
    pub fn with_log_params(&self, params: &[f64]) -> Result<Kernel> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: params.len(),
            });
        }
        let mut cursor = 0;
        let mut rebuilt = Vec::new();
        for p in self.parts() {
            match p {
                KernelPart::Rbf(k) => {
                    let variance = params[cursor].exp();
                    let rates = params[cursor + 1..cursor + 1 + k.dim()]
                        .iter()
                        .map(|v| v.exp())
                        .collect();
                    cursor += 1 + k.dim();
                    rebuilt.push(KernelPart::Rbf(RbfKernel::new(variance, rates)?));
                }
                poly => rebuilt.push(poly),
            }
        }
        Ok(match self {
            Kernel::Sum(_) => Kernel::Sum(SumKernel::new(rebuilt)?),
            _ => rebuilt.pop().expect("one part").into(),
        })
    }

    /// Gram matrix and its derivatives with respect to each log hyperparameter.
    pub(crate) fn gram_with_gradients(
        &self,
        points: &DMatrix<f64>,
    ) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let n = points.ncols();
        let mut total = DMatrix::zeros(n, n);
        let mut grads = Vec::with_capacity(self.n_params());
        for part in self.parts() {
            match &part {
                KernelPart::Rbf(k) => {
                    let part_gram = Kernel::Rbf(k.clone()).gram_of_points(points);
                    grads.push(part_gram.clone());
                    for (j, rate) in k.rates.iter().enumerate() {
                        let mut g = DMatrix::zeros(n, n);
                        for a in 0..n {
                            for b in 0..a {
                                let d = points[(j, a)] - points[(j, b)];
                                let v = -rate * d * d * part_gram[(a, b)];
                                g[(a, b)] = v;
                                g[(b, a)] = v;
                            }
                        }
                        grads.push(g);
                    }
                    total += part_gram;
                }
                KernelPart::Poly(_) => total += Kernel::from(part.clone()).gram_of_points(points),
            }
        }
        (total, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_self_similarity_is_variance() {
        let k = Kernel::rbf(1.0, vec![1.0]).unwrap();
        assert_eq!(k.eval(&[0.0], &[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn poly_direct_expansion() {
        let k = Kernel::poly(2).unwrap();
        assert_eq!(k.eval(&[1.0, 2.0], &[3.0, 1.0]).unwrap(), 25.0);
    }

    #[test]
    fn ard_rbf_hand_value() {
        let k = Kernel::rbf(2.0, vec![0.5, 0.5]).unwrap();
        // 0.5 * 1 + 0.5 * 1 = 1 in the exponent
        let expected = 2.0 * (-1.0f64).exp();
        let got = k.eval(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let k = Kernel::rbf(1.0, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            k.eval(&[0.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(Kernel::poly(1).unwrap().eval(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn gram_single_row() {
        let k = Kernel::rbf(3.0, vec![0.2]).unwrap();
        let g = k.gram(&DMatrix::from_row_slice(1, 1, &[0.4])).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], 3.0);
    }

    #[test]
    fn gram_duplicated_rows() {
        let k = Kernel::rbf(1.5, vec![0.7, 2.0]).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.1, 0.2, -1.0, 0.5]);
        let g = k.gram(&x).unwrap();
        for i in 0..3 {
            assert_eq!(g[(i, i)], 1.5);
        }
        assert_eq!(g.row(0), g.row(1));
        assert_eq!(g.column(0), g.column(1));
    }

    #[test]
    fn linear_gram_of_identity() {
        let k = Kernel::poly(1).unwrap();
        let g = k.gram(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(g, DMatrix::identity(2, 2));
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(Kernel::rbf(0.0, vec![1.0]).is_err());
        assert!(Kernel::rbf(1.0, vec![-1.0]).is_err());
        assert!(Kernel::poly(0).is_err());
        assert!(Kernel::sum(vec![]).is_err());
    }

    #[test]
    fn log_param_round_trip() {
        let k = Kernel::sum(vec![
            KernelPart::Rbf(RbfKernel::new(1.3, vec![0.2, 4.0]).unwrap()),
            KernelPart::Poly(PolynomialKernel::new(2).unwrap()),
        ])
        .unwrap();
        let p = k.log_params();
        assert_eq!(p.len(), 3);
        let back = k.with_log_params(&p).unwrap();
        for (a, b) in back.log_params().iter().zip(&p) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let k = Kernel::rbf(0.8, vec![0.5, 1.7]).unwrap();
        let pts = DMatrix::from_column_slice(2, 3, &[0.0, 0.1, 0.7, -0.3, 1.2, 0.4]);
        let (_, grads) = k.gram_with_gradients(&pts);
        let p0 = k.log_params();
        let h = 1e-6;
        for (idx, g) in grads.iter().enumerate() {
            let mut hi = p0.clone();
            hi[idx] += h;
            let mut lo = p0.clone();
            lo[idx] -= h;
            let fd = (k.with_log_params(&hi).unwrap().gram_of_points(&pts)
                - k.with_log_params(&lo).unwrap().gram_of_points(&pts))
                / (2.0 * h);
            assert!((fd - g).amax() < 1e-8, "param {idx}");
        }
    }
}
