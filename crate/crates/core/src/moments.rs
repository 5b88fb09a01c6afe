//! Predictive moments of a GP node whose inputs are independent Gaussian
//! beliefs rather than points.
//!
//! With `k = k(z, p_i)` the random kernel vector at an uncertain input `z`:
//!
//! ```text
//! v      = E[k]                    (n-vector)
//! Sigma  = E[k k^T] - v v^T        (n x n)
//! D2g    = E[k(z, z)]
//! mean   = v^T alpha
//! var    = noise + D2g - sum(Cinv .* (Sigma + v v^T)) + alpha^T Sigma alpha
//! ```
//!
//! Every kernel pair contributes a block of `Sigma`. Each block is written so
//! that it vanishes identically (not just up to round-off) when all input
//! variances are zero; certain inputs then give back the standard predictive
//! equations to the last bit.
//!
//! For the squared-exponential kernel the block is `u P - w^2 T`, evaluated as
//! `w^2 T * expm1(ln(u P) - ln(w^2 T))` with the log ratio simplified per
//! dimension.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp::{GPNode, GaussianBelief};
use crate::kernel::{Kernel, KernelPart, PolynomialKernel, RbfKernel};

/// Highest non-central moment order supported.
pub const MAX_MOMENT_ORDER: u32 = 20;
/// Largest multinomial enumeration (and pair count for second moments).
pub const MAX_TERMS: u128 = 1_000_000;

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * f64::from(n - i) / f64::from(i + 1);
    }
    c.round()
}

fn check_order(p: u32) -> Result<()> {
    if p > MAX_MOMENT_ORDER {
        return Err(Error::MomentOrderTooLarge {
            order: p,
            cap: MAX_MOMENT_ORDER,
        });
    }
    Ok(())
}

/// Terms `u >= first_u` of `E[Z^p]`, `Z ~ N(mu, var)`:
/// `sum_u C(p, 2u) (2u-1)!! var^u mu^(p-2u)`.
fn moment_terms(mu: f64, var: f64, p: u32, first_u: u32) -> f64 {
    let mut total = 0.0;
    let mut dfact = 1.0; // (2u - 1)!!
    for u in 0..=p / 2 {
        if u > 0 {
            dfact *= f64::from(2 * u - 1);
        }
        if u < first_u {
            continue;
        }
        total += binomial(p, 2 * u) * dfact * var.powi(u as i32) * mu.powi((p - 2 * u) as i32);
    }
    total
}

/// `E[Z^p]` for `Z ~ N(mu, var)`.
pub fn noncentral_moment(mu: f64, var: f64, p: u32) -> Result<f64> {
    check_order(p)?;
    if !(var >= 0.0) {
        return Err(Error::InvalidData(format!(
            "variance must be >= 0, got {var}"
        )));
    }
    Ok(moment_terms(mu, var, p, 0))
}

/// Cached non-central moments of one Gaussian, split as
/// `a_p = mu^p + r_p` where `r_p` collects the variance-dependent terms
/// (exactly zero for a point mass).
#[derive(Debug, Clone)]
pub struct NonCentralMomentTable {
    pow: Vec<f64>,
    rem: Vec<f64>,
}

impl NonCentralMomentTable {
    pub fn new(mu: f64, var: f64, max_order: u32) -> Result<Self> {
        check_order(max_order)?;
        if !(var >= 0.0) {
            return Err(Error::InvalidData(format!(
                "variance must be >= 0, got {var}"
            )));
        }
        let pow = (0..=max_order).map(|p| mu.powi(p as i32)).collect();
        let rem = (0..=max_order)
            .map(|p| moment_terms(mu, var, p, 1))
            .collect();
        Ok(Self { pow, rem })
    }

    pub fn max_order(&self) -> u32 {
        (self.pow.len() - 1) as u32
    }

    /// `a_p = E[Z^p]`.
    pub fn get(&self, p: u32) -> f64 {
        self.pow[p as usize] + self.rem[p as usize]
    }

    fn mu_pow(&self, p: u32) -> f64 {
        self.pow[p as usize]
    }

    fn rem(&self, p: u32) -> f64 {
        self.rem[p as usize]
    }

    /// `Cov(Z^p, Z^q) = a_{p+q} - a_p a_q`, with the `mu^{p+q}` parts
    /// cancelled symbolically.
    fn cov(&self, p: u32, q: u32) -> f64 {
        self.rem(p + q)
            - self.mu_pow(p) * self.rem(q)
            - self.mu_pow(q) * self.rem(p)
            - self.rem(p) * self.rem(q)
    }
}

/// One term of a multinomial expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialTerm {
    pub exponents: Vec<u32>,
    pub coefficient: f64,
}

fn multinomial_count(d: u32, m: usize) -> u128 {
    // C(d + m - 1, m - 1), saturating
    let (n, k) = (u128::from(d) + m as u128 - 1, m as u128 - 1);
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = match c.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    c
}

/// All exponent tuples of length `m` summing to `d`, in descending
/// lexicographic order, with multinomial coefficients `d! / prod p_t!`.
pub fn multinomial_indices(d: u32, m: usize) -> Result<Vec<MultinomialTerm>> {
    if m == 0 {
        return Err(Error::InvalidData(
            "multinomial expansion needs m >= 1".into(),
        ));
    }
    let count = multinomial_count(d, m);
    if count > MAX_TERMS {
        return Err(Error::TooManyTerms {
            count,
            cap: MAX_TERMS,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = vec![0u32; m];
    fn recurse(pos: usize, left: u32, current: &mut Vec<u32>, out: &mut Vec<MultinomialTerm>) {
        let m = current.len();
        if pos == m - 1 {
            current[pos] = left;
            let mut coef = 1.0;
            let mut partial = 0;
            for &p in current.iter() {
                partial += p;
                coef *= binomial(partial, p);
            }
            out.push(MultinomialTerm {
                exponents: current.clone(),
                coefficient: coef,
            });
            return;
        }
        for p in (0..=left).rev() {
            current[pos] = p;
            recurse(pos + 1, left - p, current, out);
        }
    }
    recurse(0, d, &mut current, &mut out);
    Ok(out)
}

/// Components of the assembled variance, in the node's scaled target space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentDiagnostics {
    /// `E[k(z, z)]`.
    pub delta2g: f64,
    /// `alpha^T Sigma alpha`.
    pub zeta: f64,
    /// `sum(Cinv .* H)` with `H = E[k k^T]`.
    pub hadamard: f64,
    /// Variance before clamping at zero.
    pub pre_clamp_variance: f64,
    /// Squared-exponential scale factors `w` and `u` (single-part RBF only).
    pub w: Option<f64>,
    pub u: Option<f64>,
    pub clamped: bool,
    /// The negative excursion exceeded `1e-6 * (noise + delta2g)`.
    pub warned: bool,
}

/// Predictive moments at an uncertain input, in raw target units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentResult {
    pub mean: f64,
    pub variance: f64,
    pub diagnostics: MomentDiagnostics,
}

impl MomentResult {
    pub fn belief(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean,
            variance: self.variance,
        }
    }
}

/// Input beliefs split into means and variances, in scaled node space.
struct Input {
    mu: Vec<f64>,
    var: Vec<f64>,
}

fn prepare(node: &GPNode, inputs: &[GaussianBelief]) -> Result<Input> {
    if let Some(b) = inputs
        .iter()
        .find(|b| !b.mean.is_finite() || !(b.variance >= 0.0) || !b.variance.is_finite())
    {
        return Err(Error::InvalidData(format!(
            "input belief needs finite mean and variance >= 0, got ({}, {})",
            b.mean, b.variance
        )));
    }
    let scaled = node.scale_inputs(inputs)?;
    Ok(Input {
        mu: scaled.iter().map(|b| b.mean).collect(),
        var: scaled.iter().map(|b| b.variance).collect(),
    })
}

/// `E[k_rbf(z, p_i)]` for every training point.
fn rbf_mean_vector(k: &RbfKernel, points: &DMatrix<f64>, x: &Input) -> DVector<f64> {
    let scale = k.variance() * rbf_w(k, x);
    DVector::from_iterator(
        points.ncols(),
        points
            .column_iter()
            .map(|p| scale * (-rbf_exponent(k, p.as_slice(), x)).exp()),
    )
}

fn rbf_exponent(k: &RbfKernel, p: &[f64], x: &Input) -> f64 {
    let mut s = 0.0;
    for (((m, pi), t), v) in x.mu.iter().zip(p).zip(k.rates()).zip(&x.var) {
        let d = m - pi;
        s += t * d * d / (1.0 + 2.0 * t * v);
    }
    s
}

/// `ln E[k_rbf(z, p_i)]`, finite where the mean vector underflows.
fn rbf_log_mean_vector(k: &RbfKernel, points: &DMatrix<f64>, x: &Input) -> Vec<f64> {
    let log_scale = k.variance().ln()
        + k.rates()
            .iter()
            .zip(&x.var)
            .map(|(t, v)| -0.5 * (2.0 * t * v).ln_1p())
            .sum::<f64>();
    points
        .column_iter()
        .map(|p| log_scale - rbf_exponent(k, p.as_slice(), x))
        .collect()
}

fn rbf_w(k: &RbfKernel, x: &Input) -> f64 {
    let log_w: f64 = k
        .rates()
        .iter()
        .zip(&x.var)
        .map(|(t, v)| -0.5 * (2.0 * t * v).ln_1p())
        .sum();
    log_w.exp()
}

fn rbf_u(k: &RbfKernel, x: &Input) -> f64 {
    let log_u: f64 = k
        .rates()
        .iter()
        .zip(&x.var)
        .map(|(t, v)| -0.5 * (4.0 * t * v).ln_1p())
        .sum();
    log_u.exp()
}

/// Coefficient vector `F_p[i] = prod_t p_it^{p_t}` of the expansion of
/// `(z . p_i)^d` over multinomial terms.
fn monomial_matrix(terms: &[MultinomialTerm], points: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(terms.len(), points.ncols(), |r, i| {
        terms[r]
            .exponents
            .iter()
            .enumerate()
            .map(|(t, &e)| points[(t, i)].powi(e as i32))
            .product()
    })
}

fn tables(x: &Input, max_order: u32) -> Result<Vec<NonCentralMomentTable>> {
    x.mu.iter()
        .zip(&x.var)
        .map(|(m, v)| NonCentralMomentTable::new(*m, *v, max_order))
        .collect()
}

/// `E[(z . p_i)^d]` via the Gaussian projection `z . p_i ~ N(mu . p_i,
/// sum_t var_t p_it^2)`; identical to the multinomial expansion.
fn poly_mean_vector(k: PolynomialKernel, points: &DMatrix<f64>, x: &Input) -> Result<DVector<f64>> {
    check_order(k.degree())?;
    Ok(DVector::from_iterator(
        points.ncols(),
        points
            .column_iter()
            .map(|p| projected_moment(&x.mu, &x.var, p.as_slice(), k.degree())),
    ))
}

fn projected_moment(mu: &[f64], var: &[f64], p: &[f64], degree: u32) -> f64 {
    let m: f64 = mu.iter().zip(p).map(|(a, b)| a * b).sum();
    let s: f64 = var.iter().zip(p).map(|(v, b)| v * b * b).sum();
    moment_terms(m, s, degree, 0)
}

/// `E[(z . z)^d]`, written as `(mu . mu)^d` plus variance-dependent terms.
fn poly_delta2g(k: PolynomialKernel, x: &Input) -> Result<f64> {
    let d = k.degree();
    check_order(2 * d)?;
    let terms = multinomial_indices(d, x.mu.len())?;
    let tabs = tables(x, 2 * d)?;
    let base: f64 = x.mu.iter().map(|m| m * m).sum::<f64>().powi(d as i32);
    let mut extra = 0.0;
    for term in &terms {
        // prod_t a_{2p_t} - prod_t mu_t^{2p_t}, telescoped
        let mut diff = 0.0;
        for t in 0..tabs.len() {
            let e = 2 * term.exponents[t];
            let mut prod = tabs[t].rem(e);
            if prod == 0.0 {
                continue;
            }
            for (r, tab) in tabs.iter().enumerate() {
                let er = 2 * term.exponents[r];
                if r < t {
                    prod *= tab.get(er);
                } else if r > t {
                    prod *= tab.mu_pow(er);
                }
            }
            diff += prod;
        }
        extra += term.coefficient * diff;
    }
    Ok(base + extra)
}

/// `Cov(k_A(z, p_a), k_B(z, p_b))` for two squared-exponential parts.
fn rbf_rbf_block(
    a: &RbfKernel,
    b: &RbfKernel,
    points: &DMatrix<f64>,
    x: &Input,
    va: &DVector<f64>,
    vb: &DVector<f64>,
) -> DMatrix<f64> {
    let n = points.ncols();
    let m = x.mu.len();
    let uncertain: Vec<usize> = (0..m).filter(|&j| x.var[j] > 0.0).collect();
    if uncertain.is_empty() {
        return DMatrix::zeros(n, n);
    }
    let (ta, tb) = (a.rates(), b.rates());
    let separable = |rates: &[f64]| -> Vec<f64> {
        points
            .column_iter()
            .map(|p| {
                uncertain
                    .iter()
                    .map(|&j| {
                        let (t, s, d) = (rates[j], x.var[j], p[j] - x.mu[j]);
                        2.0 * t * t * s * d * d / (1.0 + 2.0 * t * s)
                    })
                    .sum()
            })
            .collect()
    };
    let ea = separable(ta);
    let eb = separable(tb);
    let log_va = rbf_log_mean_vector(a, points, x);
    let log_vb = rbf_log_mean_vector(b, points, x);
    let constant: f64 = uncertain
        .iter()
        .map(|&j| {
            let s = x.var[j];
            0.5 * ((2.0 * ta[j] * s).ln_1p() + (2.0 * tb[j] * s).ln_1p()
                - (2.0 * (ta[j] + tb[j]) * s).ln_1p())
        })
        .sum();
    DMatrix::from_fn(n, n, |i, k| {
        let mut d = constant - ea[i] - eb[k];
        for &j in &uncertain {
            let (s, big) = (x.var[j], ta[j] + tb[j]);
            let c = (ta[j] * points[(j, i)] + tb[j] * points[(j, k)]) / big;
            let r = c - x.mu[j];
            d += 2.0 * big * big * s * r * r / (1.0 + 2.0 * big * s);
        }
        let scale = va[i] * vb[k];
        let cov = scale * d.exp_m1();
        if cov.is_finite() && scale > 0.0 {
            cov
        } else {
            // the mean factors underflowed while the exponent is large
            (log_va[i] + log_vb[k] + d).exp() - scale
        }
    })
}

/// `Cov(k_rbf(z, p_a), (z . p_b)^d)`: the RBF factor tilts the input
/// Gaussian, after which the polynomial expectation uses shifted moments.
fn rbf_poly_block(
    a: &RbfKernel,
    b: PolynomialKernel,
    points: &DMatrix<f64>,
    x: &Input,
    va: &DVector<f64>,
) -> DMatrix<f64> {
    let n = points.ncols();
    let m = x.mu.len();
    let d = b.degree();
    let plain: Vec<f64> = points
        .column_iter()
        .map(|p| projected_moment(&x.mu, &x.var, p.as_slice(), d))
        .collect();
    let mut out = DMatrix::zeros(n, n);
    let mut mu_t = vec![0.0; m];
    let mut var_t = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let (t, s) = (a.rates()[j], x.var[j]);
            let denom = 1.0 + 2.0 * t * s;
            mu_t[j] = (x.mu[j] + 2.0 * t * s * points[(j, i)]) / denom;
            var_t[j] = s / denom;
        }
        for k in 0..n {
            let tilted = projected_moment(&mu_t, &var_t, points.column(k).as_slice(), d);
            out[(i, k)] = va[i] * (tilted - plain[k]);
        }
    }
    out
}

/// `Cov((z . p_a)^d1, (z . p_b)^d2)` by double multinomial expansion.
fn poly_poly_block(
    a: PolynomialKernel,
    b: PolynomialKernel,
    points: &DMatrix<f64>,
    x: &Input,
) -> Result<DMatrix<f64>> {
    let n = points.ncols();
    if x.var.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    let m = x.mu.len();
    let (d1, d2) = (a.degree(), b.degree());
    check_order(d1 + d2)?;
    let ta = multinomial_indices(d1, m)?;
    let tb = multinomial_indices(d2, m)?;
    let pairs = ta.len() as u128 * tb.len() as u128;
    if pairs > MAX_TERMS {
        return Err(Error::TooManyTerms {
            count: pairs,
            cap: MAX_TERMS,
        });
    }
    let tabs = tables(x, d1 + d2)?;
    // B_pq = c_p c_q (prod_t a_{p_t+q_t} - prod_t a_{p_t} a_{q_t})
    let mut bmat = DMatrix::zeros(ta.len(), tb.len());
    for (r, p) in ta.iter().enumerate() {
        for (c, q) in tb.iter().enumerate() {
            let mut diff = 0.0;
            for t in 0..m {
                let mut prod = tabs[t].cov(p.exponents[t], q.exponents[t]);
                if prod == 0.0 {
                    continue;
                }
                for (s, tab) in tabs.iter().enumerate() {
                    let (ep, eq) = (p.exponents[s], q.exponents[s]);
                    if s < t {
                        prod *= tab.get(ep + eq);
                    } else if s > t {
                        prod *= tab.get(ep) * tab.get(eq);
                    }
                }
                diff += prod;
            }
            bmat[(r, c)] = p.coefficient * q.coefficient * diff;
        }
    }
    let fa = monomial_matrix(&ta, points);
    let fb = monomial_matrix(&tb, points);
    Ok(fa.transpose() * bmat * fb)
}

fn part_mean_vector(part: &KernelPart, points: &DMatrix<f64>, x: &Input) -> Result<DVector<f64>> {
    match part {
        KernelPart::Rbf(k) => Ok(rbf_mean_vector(k, points, x)),
        KernelPart::Poly(k) => poly_mean_vector(*k, points, x),
    }
}

fn part_delta2g(part: &KernelPart, x: &Input) -> Result<f64> {
    match part {
        KernelPart::Rbf(k) => Ok(k.variance()),
        KernelPart::Poly(k) => poly_delta2g(*k, x),
    }
}

fn pair_block(
    a: &KernelPart,
    b: &KernelPart,
    points: &DMatrix<f64>,
    x: &Input,
    va: &DVector<f64>,
    vb: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    Ok(match (a, b) {
        (KernelPart::Rbf(ka), KernelPart::Rbf(kb)) => rbf_rbf_block(ka, kb, points, x, va, vb),
        (KernelPart::Rbf(ka), KernelPart::Poly(kb)) => rbf_poly_block(ka, *kb, points, x, va),
        (KernelPart::Poly(ka), KernelPart::Rbf(kb)) => {
            rbf_poly_block(kb, *ka, points, x, vb).transpose()
        }
        (KernelPart::Poly(ka), KernelPart::Poly(kb)) => poly_poly_block(*ka, *kb, points, x)?,
    })
}

/// First and second moments of the random kernel vector `k(z, p_i)`, in the
/// node's scaled input space.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMoments {
    /// `E[k]`
    pub v: DVector<f64>,
    /// `E[k k^T] - v v^T`
    pub sigma: DMatrix<f64>,
    /// `E[k(z, z)]`
    pub delta2g: f64,
}

pub fn kernel_moments(node: &GPNode, inputs: &[GaussianBelief]) -> Result<KernelMoments> {
    let x = prepare(node, inputs)?;
    let parts = node.kernel().parts();
    let points = node.points();

    let part_v = parts
        .iter()
        .map(|p| part_mean_vector(p, points, &x))
        .collect::<Result<Vec<_>>>()?;
    let mut v = DVector::zeros(points.ncols());
    for pv in &part_v {
        v += pv;
    }
    let delta2g = parts
        .iter()
        .map(|p| part_delta2g(p, &x))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum::<f64>();

    let n = points.ncols();
    let mut sigma = DMatrix::zeros(n, n);
    if x.var.iter().any(|v| *v > 0.0) {
        for (i, a) in parts.iter().enumerate() {
            for (j, b) in parts.iter().enumerate().skip(i) {
                let block = pair_block(a, b, points, &x, &part_v[i], &part_v[j])?;
                if i == j {
                    sigma += block;
                } else {
                    sigma += &block;
                    sigma += block.transpose();
                }
            }
        }
    }
    Ok(KernelMoments { v, sigma, delta2g })
}

/// Moments for any supported kernel.
pub fn uncertain_moments(node: &GPNode, inputs: &[GaussianBelief]) -> Result<MomentResult> {
    let KernelMoments { v, sigma, delta2g } = kernel_moments(node, inputs)?;
    let x = prepare(node, inputs)?;

    let alpha = node.alpha();
    let mean = v.dot(alpha);
    let explained = node.quad_form_inv(&v);
    let trace_term = node.cinv().component_mul(&sigma).sum();
    let zeta = alpha.dot(&(&sigma * alpha));
    let noise = node.noise();
    let pre = noise + delta2g - explained - trace_term + zeta;
    if !mean.is_finite() || !pre.is_finite() {
        return Err(Error::NonFiniteMoments {
            mean,
            variance: pre,
        });
    }

    let mut clamped = false;
    let mut warned = false;
    if pre < 0.0 {
        clamped = true;
        node.diagnostics().record_clamp();
        if pre < -1e-6 * (noise + delta2g) {
            warned = true;
            log::warn!(
                "predictive variance {pre:e} clamped to zero (noise {noise:e}, prior {delta2g:e})"
            );
        }
    }
    let (w, u) = match node.kernel() {
        Kernel::Rbf(k) => (Some(rbf_w(k, &x)), Some(rbf_u(k, &x))),
        _ => (None, None),
    };
    let out = node.unscale_output(GaussianBelief {
        mean,
        variance: pre.max(0.0),
    });
    Ok(MomentResult {
        mean: out.mean,
        variance: out.variance,
        diagnostics: MomentDiagnostics {
            delta2g,
            zeta,
            hadamard: explained + trace_term,
            pre_clamp_variance: pre,
            w,
            u,
            clamped,
            warned,
        },
    })
}

fn require(node: &GPNode, want: &str) -> Result<()> {
    if node.kernel().name() != want {
        return Err(Error::InvalidKernel(format!(
            "expected a {want} kernel, node has {}",
            node.kernel().name()
        )));
    }
    Ok(())
}

pub fn rbf_uncertain_mean(node: &GPNode, inputs: &[GaussianBelief]) -> Result<f64> {
    require(node, "rbf")?;
    let Kernel::Rbf(k) = node.kernel() else {
        unreachable!()
    };
    let x = prepare(node, inputs)?;
    let mean = rbf_mean_vector(k, node.points(), &x).dot(node.alpha());
    Ok(node.unscale_output(GaussianBelief::certain(mean)).mean)
}

pub fn rbf_uncertain_variance(node: &GPNode, inputs: &[GaussianBelief]) -> Result<MomentResult> {
    require(node, "rbf")?;
    uncertain_moments(node, inputs)
}

/// Polynomial-kernel mean through the explicit multinomial expansion
/// `v = F^T g`, `g_p = c_p prod_t a_{p_t}`.
pub fn poly_uncertain_mean(node: &GPNode, inputs: &[GaussianBelief]) -> Result<f64> {
    require(node, "poly")?;
    let Kernel::Poly(k) = node.kernel() else {
        unreachable!()
    };
    let x = prepare(node, inputs)?;
    let terms = multinomial_indices(k.degree(), x.mu.len())?;
    let tabs = tables(&x, k.degree())?;
    let g = DVector::from_iterator(
        terms.len(),
        terms.iter().map(|t| {
            t.coefficient
                * t.exponents
                    .iter()
                    .zip(&tabs)
                    .map(|(e, tab)| tab.get(*e))
                    .product::<f64>()
        }),
    );
    let f = monomial_matrix(&terms, node.points());
    let v = f.transpose() * g;
    let mean = v.dot(node.alpha());
    Ok(node.unscale_output(GaussianBelief::certain(mean)).mean)
}

pub fn poly_uncertain_variance(node: &GPNode, inputs: &[GaussianBelief]) -> Result<MomentResult> {
    require(node, "poly")?;
    uncertain_moments(node, inputs)
}

pub fn sum_kernel_uncertain_moments(
    node: &GPNode,
    inputs: &[GaussianBelief],
) -> Result<MomentResult> {
    require(node, "sum")?;
    uncertain_moments(node, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::TrainingSet;
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn node(kernel: Kernel, rows: &[Vec<f64>], ys: &[f64], noise: f64) -> GPNode {
        let data = TrainingSet::from_rows(rows, ys).unwrap();
        GPNode::with_hyperparameters(kernel, noise, &data, false, false).unwrap()
    }

    fn fixture_1d() -> GPNode {
        node(
            Kernel::rbf(1.2, vec![0.9]).unwrap(),
            &[vec![-0.5], vec![0.4], vec![1.3]],
            &[0.2, 0.9, -0.3],
            0.01,
        )
    }

    /// Law of total variance over sampled inputs, with standard errors.
    fn mc_oracle(node: &GPNode, inputs: &[GaussianBelief], n: usize, seed: u64) -> [f64; 4] {
        let mut r = rng::stream(seed, &[]);
        let normals: Vec<Normal<f64>> = inputs
            .iter()
            .map(|b| Normal::new(b.mean, b.std()).unwrap())
            .collect();
        let (mut means, mut vars) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut z = vec![0.0; inputs.len()];
        for _ in 0..n {
            for (zi, d) in z.iter_mut().zip(&normals) {
                *zi = d.sample(&mut r);
            }
            let p = node.predict(&z).unwrap();
            means.push(p.mean);
            vars.push(p.variance);
        }
        let nf = n as f64;
        let mm = means.iter().sum::<f64>() / nf;
        let mv = vars.iter().sum::<f64>() / nf;
        // total variance = E[var] + Var[mean]; per-sample contribution
        let contrib: Vec<f64> = means
            .iter()
            .zip(&vars)
            .map(|(m, v)| v + (m - mm) * (m - mm) * nf / (nf - 1.0))
            .collect();
        let total = contrib.iter().sum::<f64>() / nf;
        let sd_mean = (means.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        let sd_total =
            (contrib.iter().map(|c| (c - total).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        let _ = mv;
        [mm, sd_mean / nf.sqrt(), total, sd_total / nf.sqrt()]
    }

    #[test]
    fn known_moments() {
        assert_eq!(noncentral_moment(0.0, 1.0, 4).unwrap(), 3.0);
        assert_eq!(noncentral_moment(1.7, 0.0, 5).unwrap(), 1.7f64.powi(5));
        assert!(matches!(
            noncentral_moment(0.0, 1.0, 21),
            Err(Error::MomentOrderTooLarge { .. })
        ));
    }

    #[test]
    fn moment_mc_oracle() {
        let mut r = rng::stream(1, &[]);
        let d = Normal::new(0.7, 0.3f64.sqrt()).unwrap();
        let n = 10_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = d.sample(&mut r).powi(6);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = noncentral_moment(0.7, 0.3, 6).unwrap();
        assert!(
            (mean - exact).abs() < 3.0 * se,
            "{mean} vs {exact} (se {se})"
        );
    }

    #[test]
    fn multinomial_small_cases() {
        let t = multinomial_indices(2, 2).unwrap();
        let got: Vec<(Vec<u32>, f64)> = t
            .into_iter()
            .map(|t| (t.exponents, t.coefficient))
            .collect();
        assert_eq!(
            got,
            vec![(vec![2, 0], 1.0), (vec![1, 1], 2.0), (vec![0, 2], 1.0)]
        );
        let t = multinomial_indices(0, 4).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].exponents, vec![0; 4]);
        assert!(matches!(
            multinomial_indices(30, 12),
            Err(Error::TooManyTerms { .. })
        ));
    }

    #[test]
    fn multinomial_matches_brute_force() {
        // count d-fold ordered index sequences by their exponent histogram
        let (d, m) = (3u32, 3usize);
        let mut hist = std::collections::BTreeMap::new();
        for seq in 0..m.pow(d) {
            let mut e = vec![0u32; m];
            let mut s = seq;
            for _ in 0..d {
                e[s % m] += 1;
                s /= m;
            }
            *hist.entry(e).or_insert(0.0) += 1.0;
        }
        let terms = multinomial_indices(d, m).unwrap();
        assert_eq!(terms.len(), 10);
        assert_eq!(terms.iter().map(|t| t.coefficient).sum::<f64>(), 27.0);
        for t in &terms {
            assert_eq!(hist[&t.exponents], t.coefficient);
        }
    }

    #[test]
    fn rbf_zero_variance_is_bit_identical() {
        let node = fixture_1d();
        for mu in [-1.0, 0.0, 0.37, 2.0] {
            let p = node.predict(&[mu]).unwrap();
            let m = uncertain_moments(&node, &[GaussianBelief::certain(mu)]).unwrap();
            assert_eq!(p.mean, m.mean);
            assert_eq!(p.variance, m.variance);
            assert_eq!(m.diagnostics.zeta, 0.0);
        }
    }

    #[test]
    fn rbf_matches_mc_oracle() {
        let node = fixture_1d();
        let input = [GaussianBelief::new(0.5, 0.2).unwrap()];
        let got = uncertain_moments(&node, &input).unwrap();
        let [m, sem, v, sev] = mc_oracle(&node, &input, 1_000_000, 9);
        assert!(
            (got.mean - m).abs() < 3.0 * sem,
            "mean {} vs {m} ± {sem}",
            got.mean
        );
        assert!(
            (got.variance - v).abs() < 3.0 * sev,
            "var {} vs {v} ± {sev}",
            got.variance
        );
        assert!((rbf_uncertain_mean(&node, &input).unwrap() - got.mean).abs() < 1e-15);
        let certain = node.predict(&[0.5]).unwrap();
        assert!(got.variance >= certain.variance);
    }

    #[test]
    fn sharp_rbf_stays_finite() {
        // mean factors underflow for far points while the pair exponent is large
        let node = node(
            Kernel::rbf(1.0, vec![70_000.0, 1.5]).unwrap(),
            &[
                vec![0.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0],
            ],
            &[0.4, -0.3, 1.1, 0.2],
            1e-4,
        );
        let input = [
            GaussianBelief::new(0.5, 2e-3).unwrap(),
            GaussianBelief::new(0.1, 1e-3).unwrap(),
        ];
        let got = uncertain_moments(&node, &input).unwrap();
        assert!(got.variance.is_finite() && !got.diagnostics.clamped);
        let [m, sem, v, sev] = mc_oracle(&node, &input, 200_000, 3);
        assert!(
            (got.mean - m).abs() < 4.0 * sem.max(1e-12),
            "mean {} vs {m} ± {sem}",
            got.mean
        );
        assert!(
            (got.variance - v).abs() < 4.0 * sev.max(1e-12),
            "var {} vs {v} ± {sev}",
            got.variance
        );
    }

    #[test]
    fn rbf_mean_vanishes_for_huge_uncertainty() {
        let node = fixture_1d();
        let m = rbf_uncertain_mean(&node, &[GaussianBelief::new(0.3, 1e12).unwrap()]).unwrap();
        assert!(m.abs() < 1e-5);
    }

    #[test]
    fn poly_symbolic_two_by_two() {
        // one training point (1, 1): v = E[(z1 + z2)^2]
        let node = node(Kernel::poly(2).unwrap(), &[vec![1.0, 1.0]], &[1.0], 0.5);
        let (m1, s1, m2, s2) = (0.3, 0.2, -0.7, 0.5);
        let input = [
            GaussianBelief::new(m1, s1).unwrap(),
            GaussianBelief::new(m2, s2).unwrap(),
        ];
        let v = (m1 * m1 + s1) + 2.0 * m1 * m2 + (m2 * m2 + s2);
        let c = 4.0 + 0.5 + 4e-10; // k(p, p) + noise + jitter
        let expected = v / c;
        assert!((poly_uncertain_mean(&node, &input).unwrap() - expected).abs() < 1e-9);
        assert!((uncertain_moments(&node, &input).unwrap().mean - expected).abs() < 1e-9);
    }

    #[test]
    fn linear_kernel_variance_closed_form() {
        // d = 1, one training point p: k(z, p) = z p, Sigma = p^2 s, D2g = mu^2 + s
        let (p, y, noise) = (1.5, 0.8, 0.3);
        let node = node(Kernel::poly(1).unwrap(), &[vec![p]], &[y], noise);
        let (mu, s) = (0.4, 0.25);
        let c = p * p + noise + node.jitter();
        let alpha = y / c;
        let expected = noise + (mu * mu + s) - (mu * p).powi(2) / c - p * p * s / c
            + alpha * alpha * p * p * s;
        let got = uncertain_moments(&node, &[GaussianBelief::new(mu, s).unwrap()]).unwrap();
        assert!((got.variance - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn poly_matches_mc_oracle() {
        let mut r = rng::stream(4, &[]);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        let ys: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        for d in [2, 3] {
            let node = node(Kernel::poly(d).unwrap(), &rows, &ys, 0.05);
            let input = [
                GaussianBelief::new(0.4, 0.1).unwrap(),
                GaussianBelief::new(-0.2, 0.3).unwrap(),
            ];
            let got = uncertain_moments(&node, &input).unwrap();
            let [m, sem, v, sev] = mc_oracle(&node, &input, 1_000_000, 10 + d as u64);
            assert!(
                (got.mean - m).abs() < 3.0 * sem,
                "d={d} mean {} vs {m} ± {sem}",
                got.mean
            );
            assert!(
                (got.variance - v).abs() < 3.0 * sev,
                "d={d} var {} vs {v} ± {sev}",
                got.variance
            );
            let expansion = poly_uncertain_mean(&node, &input).unwrap();
            assert!((expansion - got.mean).abs() < 1e-10 * got.mean.abs().max(1e-3));
        }
    }

    #[test]
    fn sum_rbf_poly_matches_mc_oracle() {
        let kernel = Kernel::sum(vec![
            KernelPart::Rbf(RbfKernel::new(0.8, vec![1.1]).unwrap()),
            KernelPart::Poly(PolynomialKernel::new(1).unwrap()),
        ])
        .unwrap();
        let node = node(
            kernel,
            &[vec![-1.0], vec![-0.2], vec![0.5], vec![1.4]],
            &[-0.9, 0.1, 0.4, 1.8],
            0.02,
        );
        let input = [GaussianBelief::new(0.3, 0.25).unwrap()];
        let got = sum_kernel_uncertain_moments(&node, &input).unwrap();
        let [m, sem, v, sev] = mc_oracle(&node, &input, 1_000_000, 12);
        assert!(
            (got.mean - m).abs() < 3.0 * sem,
            "mean {} vs {m} ± {sem}",
            got.mean
        );
        assert!(
            (got.variance - v).abs() < 3.0 * sev,
            "var {} vs {v} ± {sev}",
            got.variance
        );
    }

    #[test]
    fn sum_with_vanishing_part_equals_single_part() {
        let rows = [vec![-1.0, 0.2], vec![0.1, 0.5], vec![0.9, -0.4]];
        let ys = [0.3, -0.1, 0.7];
        let rbf = RbfKernel::new(1.0, vec![0.7, 1.3]).unwrap();
        let single = node(Kernel::Rbf(rbf.clone()), &rows, &ys, 0.05);
        let sum = node(
            Kernel::sum(vec![
                KernelPart::Rbf(rbf),
                KernelPart::Rbf(RbfKernel::new(1e-300, vec![2.0, 0.5]).unwrap()),
            ])
            .unwrap(),
            &rows,
            &ys,
            0.05,
        );
        let input = [
            GaussianBelief::new(0.2, 0.3).unwrap(),
            GaussianBelief::new(-0.1, 0.1).unwrap(),
        ];
        let a = uncertain_moments(&single, &input).unwrap();
        let b = uncertain_moments(&sum, &input).unwrap();
        assert!((a.mean - b.mean).abs() <= 1e-9 * a.mean.abs());
        assert!((a.variance - b.variance).abs() <= 1e-9 * a.variance);
    }

    #[test]
    fn wrong_kernel_family_is_rejected() {
        let node = fixture_1d();
        assert!(matches!(
            poly_uncertain_mean(&node, &[GaussianBelief::certain(0.0)]),
            Err(Error::InvalidKernel(_))
        ));
        assert!(matches!(
            uncertain_moments(&node, &[GaussianBelief::certain(0.0); 2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn recurrence(mu in -3.0f64..3.0, var in 0.0f64..4.0, p in 1u32..12) {
                let a = |k| noncentral_moment(mu, var, k).unwrap();
                let lhs = a(p + 1);
                let rhs = mu * a(p) + f64::from(p) * var * a(p - 1);
                let scale = lhs.abs().max(rhs.abs()).max(
                    (mu.abs() + var.sqrt()).powi(p as i32 + 1));
                prop_assert!((lhs - rhs).abs() <= 1e-10 * scale);
            }

            #[test]
            fn table_matches_direct(mu in -2.0f64..2.0, var in 0.0f64..2.0) {
                let t = NonCentralMomentTable::new(mu, var, 10).unwrap();
                for p in 0..=10 {
                    let direct = noncentral_moment(mu, var, p).unwrap();
                    prop_assert!((t.get(p) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
                }
            }

            #[test]
            fn variance_is_nonnegative(mu in -2.0f64..2.0, var in 0.0f64..3.0) {
                let node = fixture_1d();
                let m = uncertain_moments(&node, &[GaussianBelief { mean: mu, variance: var }]).unwrap();
                prop_assert!(m.variance >= 0.0);
                prop_assert!(m.diagnostics.pre_clamp_variance > -1e-8);
            }
        }
    }
}
