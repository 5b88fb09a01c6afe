//! A single Gaussian-process node: hyperparameter fitting by maximum marginal
//! likelihood and standard prediction at certain inputs.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::optim::Lbfgs;
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Independent Gaussian summary of one scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianBelief {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() || !variance.is_finite() || variance < 0.0 {
            return Err(Error::InvalidData(format!(
                "belief needs finite mean and non-negative variance, got ({mean}, {variance})"
            )));
        }
        Ok(Self { mean, variance })
    }

    /// A point observation (zero variance).
    pub fn certain(mean: f64) -> Self {
        Self {
            mean,
            variance: 0.0,
        }
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn is_certain(&self) -> bool {
        self.variance == 0.0
    }
}

/// Affine standardization `scaled = (raw - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        shift: 0.0,
        scale: 1.0,
    };

    /// Zero mean, unit (population) standard deviation; constant data keeps
    /// scale 1.
    pub fn standardizing(values: impl Iterator<Item = f64> + Clone) -> Affine {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Affine { shift: mean, scale }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.shift
    }

    pub fn apply_belief(&self, b: GaussianBelief) -> GaussianBelief {
        GaussianBelief {
            mean: self.apply(b.mean),
            variance: b.variance / (self.scale * self.scale),
        }
    }

    pub fn invert_belief(&self, b: GaussianBelief) -> GaussianBelief {
        GaussianBelief {
            mean: self.invert(b.mean),
            variance: b.variance * self.scale * self.scale,
        }
    }
}

/// Inputs (one point per row) and scalar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub input_names: Vec<String>,
    pub target_name: String,
}

impl TrainingSet {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let input_names = (0..x.ncols()).map(|j| format!("x{}", j + 1)).collect();
        Self::with_names(x, y, input_names, "y".into())
    }

    pub fn with_names(
        x: DMatrix<f64>,
        y: DVector<f64>,
        input_names: Vec<String>,
        target_name: String,
    ) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::InvalidData(format!(
                "{} input rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidData("empty training set".into()));
        }
        if input_names.len() != x.ncols() {
            return Err(Error::InvalidData(
                "input name count differs from columns".into(),
            ));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(
                "non-finite value in training set".into(),
            ));
        }
        Ok(Self {
            x,
            y,
            input_names,
            target_name,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidData("ragged input rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(
            DMatrix::from_row_slice(rows.len(), m, &flat),
            DVector::from_column_slice(targets),
        )
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        Self::with_names(x, y, self.input_names.clone(), self.target_name.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Optimizer starts: the first from the supplied hyperparameters, the
    /// rest from log-uniform random draws.
    pub restarts: usize,
    pub max_iters: usize,
    /// Gradient infinity-norm at which a start counts as converged.
    pub tol: f64,
    pub seed: u64,
    /// Initial noise variance (in the scaled target space).
    pub noise: f64,
    pub standardize_target: bool,
    pub standardize_inputs: bool,
    /// Keep the noise fixed at `noise` instead of optimizing it.
    pub fix_noise: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            noise: 0.1,
            standardize_target: false,
            standardize_inputs: false,
            fix_noise: false,
        }
    }
}

/// Outcome of a hyperparameter fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
    pub iterations: usize,
    pub starts: usize,
    pub converged: bool,
}

/// Standard prediction together with the variance before clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub belief: GaussianBelief,
    pub pre_clamp_variance: f64,
}

struct Factor {
    l: DMatrix<f64>,
    cinv: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    log_det: f64,
}

/// Factorize `K + (noise + jitter) I`, escalating the jitter from
/// `1e-10 * tr(K)/n` by factors of ten up to `1e-4 * tr(K)/n`.
fn factorize(k: &DMatrix<f64>, noise: f64, y: &DVector<f64>) -> Result<Factor> {
    let n = k.nrows();
    let mut base = k.trace() / n as f64;
    if !(base > 0.0) {
        base = 1.0;
    }
    let mut jitter = 1e-10 * base;
    loop {
        let mut c = k.clone();
        for i in 0..n {
            c[(i, i)] += noise + jitter;
        }
        if let Some(chol) = c.cholesky() {
            let alpha = chol.solve(y);
            let cinv = chol.inverse();
            let l = chol.unpack();
            let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if alpha.iter().all(|v| v.is_finite()) && log_det.is_finite() {
                return Ok(Factor {
                    l,
                    cinv,
                    alpha,
                    jitter,
                    log_det,
                });
            }
        }
        if jitter >= 1e-4 * base * (1.0 - 1e-9) {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        jitter *= 10.0;
    }
}

fn lml_from_factor(f: &Factor, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    -0.5 * y.dot(&f.alpha) - 0.5 * f.log_det - 0.5 * n * LN_2PI
}

/// Log marginal likelihood of targets `y` at inputs `x` (one point per row).
pub fn log_marginal_likelihood(
    kernel: &Kernel,
    noise: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let k = kernel.gram(x)?;
    let f = factorize(&k, noise, y)?;
    Ok(lml_from_factor(&f, y))
}

/// Log marginal likelihood and its gradient with respect to
/// `[kernel.log_params().., ln noise]`.
pub fn log_marginal_likelihood_with_gradient(
    kernel: &Kernel,
    noise: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    kernel.check_dim(x.ncols())?;
    lml_grad_points(kernel, noise, &x.transpose(), y)
}

fn lml_grad_points(
    kernel: &Kernel,
    noise: f64,
    points: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let (k, dks) = kernel.gram_with_gradients(points);
    let f = factorize(&k, noise, y)?;
    let lml = lml_from_factor(&f, y);
    // W = alpha alpha^T - C^{-1}; d lml = 1/2 tr(W dC)
    let n = y.len();
    let mut w = &f.alpha * f.alpha.transpose();
    w -= &f.cinv;
    let mut grad: Vec<f64> = dks
        .iter()
        .map(|dk| 0.5 * w.component_mul(dk).sum())
        .collect();
    grad.push(0.5 * noise * (0..n).map(|i| w[(i, i)]).sum::<f64>());
    Ok((lml, grad))
}

/// Box on log-hyperparameters, scaled to the spread of the data.
struct LogBounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl LogBounds {
    fn new(kernel: &Kernel, points: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let n = y.len() as f64;
        let mean = y.sum() / n;
        let mut v = y.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        if !(v > 0.0) {
            v = y.iter().map(|t| t * t).sum::<f64>() / n;
        }
        if !(v > 0.0) {
            v = 1.0;
        }
        let spread: Vec<f64> = points
            .row_iter()
            .map(|r| {
                let r = r.max() - r.min();
                if r > 0.0 {
                    r
                } else {
                    1.0
                }
            })
            .collect();
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for part in kernel.parts() {
            if let crate::kernel::KernelPart::Rbf(k) = part {
                lo.push((1e-4 * v).ln());
                hi.push((1e4 * v).ln());
                for s in spread.iter().take(k.dim()) {
                    // lengthscale between 1e-3 and 1e3 times the input spread
                    lo.push((5e-7 / (s * s)).ln());
                    hi.push((5e5 / (s * s)).ln());
                }
            }
        }
        lo.push((1e-8 * v).ln());
        hi.push((10.0 * v).ln());
        Self { lo, hi }
    }

    fn clamp(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    /// Random start: rates log-uniform over lengthscales of 0.05..2 spreads,
    /// variance and noise log-uniform around the target variance.
    fn sample(&self, kernel: &Kernel, r: &mut impl Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.lo.len());
        let mut idx = 0;
        let mid = |i: usize| 0.5 * (self.lo[i] + self.hi[i]);
        for part in kernel.parts() {
            if let crate::kernel::KernelPart::Rbf(k) = part {
                let c = mid(idx);
                out.push(r.gen_range(c - 2.3..c + 2.3));
                idx += 1;
                for _ in 0..k.dim() {
                    let c = mid(idx);
                    // rate 1/(2 l^2) with l in [0.05, 2] spreads
                    out.push(r.gen_range(c - 13.8 - 1.4..c - 13.8 + 6.0));
                    idx += 1;
                }
            }
        }
        let v_ln = self.hi[idx] - 10f64.ln();
        out.push(r.gen_range(v_ln - 9.2..v_ln - 0.7));
        out
    }
}

/// Diagnostics accumulated while a node is used.
#[derive(Debug, Default)]
pub struct NodeDiagnostics {
    clamp_events: AtomicUsize,
}

impl NodeDiagnostics {
    pub fn clamp_events(&self) -> usize {
        self.clamp_events.load(Ordering::Relaxed)
    }

    pub(crate) fn record_clamp(&self) {
        self.clamp_events.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for NodeDiagnostics {
    fn clone(&self) -> Self {
        Self {
            clamp_events: AtomicUsize::new(self.clamp_events()),
        }
    }
}

/// Serializable description of a node; the factorization is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParts {
    pub kernel: Kernel,
    pub noise: f64,
    /// Scaled training inputs, one point per row.
    pub inputs: Vec<Vec<f64>>,
    /// Scaled training targets.
    pub targets: Vec<f64>,
    pub input_scaling: Option<Vec<Affine>>,
    pub target_scaling: Option<Affine>,
    pub report: Option<TrainReport>,
}

/// A trained (or fixed-hyperparameter) Gaussian-process node.
#[derive(Debug, Clone)]
pub struct GPNode {
    kernel: Kernel,
    noise: f64,
    /// Scaled training inputs, one point per column.
    points: DMatrix<f64>,
    targets: DVector<f64>,
    input_scaling: Option<Vec<Affine>>,
    target_scaling: Option<Affine>,
    l: DMatrix<f64>,
    cinv: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    log_likelihood: f64,
    report: Option<TrainReport>,
    diagnostics: NodeDiagnostics,
}

fn scalings(data: &TrainingSet, opts: &TrainOptions) -> (Option<Vec<Affine>>, Option<Affine>) {
    let inputs = opts.standardize_inputs.then(|| {
        data.x
            .column_iter()
            .map(|c| Affine::standardizing(c.iter().copied()))
            .collect()
    });
    let target = opts
        .standardize_target
        .then(|| Affine::standardizing(data.y.iter().copied()));
    (inputs, target)
}

fn scaled_points(data: &TrainingSet, inputs: &Option<Vec<Affine>>) -> DMatrix<f64> {
    let mut pts = data.x.transpose();
    if let Some(sc) = inputs {
        for (j, a) in sc.iter().enumerate() {
            for v in pts.row_mut(j).iter_mut() {
                *v = a.apply(*v);
            }
        }
    }
    pts
}

impl GPNode {
    /// Node with fixed hyperparameters (no optimization). Accepts a single
    /// training point.
    pub fn with_hyperparameters(
        kernel: Kernel,
        noise: f64,
        data: &TrainingSet,
        standardize_inputs: bool,
        standardize_target: bool,
    ) -> Result<Self> {
        kernel.check_dim(data.dim())?;
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::InvalidData(format!(
                "noise variance must be >= 0, got {noise}"
            )));
        }
        let opts = TrainOptions {
            standardize_inputs,
            standardize_target,
            ..TrainOptions::default()
        };
        let (input_scaling, target_scaling) = scalings(data, &opts);
        let points = scaled_points(data, &input_scaling);
        let targets = match &target_scaling {
            Some(a) => data.y.map(|v| a.apply(v)),
            None => data.y.clone(),
        };
        Self::assemble(
            kernel,
            noise,
            points,
            targets,
            input_scaling,
            target_scaling,
            None,
        )
    }

    fn assemble(
        kernel: Kernel,
        noise: f64,
        points: DMatrix<f64>,
        targets: DVector<f64>,
        input_scaling: Option<Vec<Affine>>,
        target_scaling: Option<Affine>,
        report: Option<TrainReport>,
    ) -> Result<Self> {
        let k = kernel.gram_of_points(&points);
        let f = factorize(&k, noise, &targets)?;
        let log_likelihood = lml_from_factor(&f, &targets);
        Ok(Self {
            kernel,
            noise,
            points,
            targets,
            input_scaling,
            target_scaling,
            l: f.l,
            cinv: f.cinv,
            alpha: f.alpha,
            jitter: f.jitter,
            log_likelihood,
            report,
            diagnostics: NodeDiagnostics::default(),
        })
    }

    pub fn from_parts(parts: NodeParts) -> Result<Self> {
        let n = parts.inputs.len();
        let m = parts.inputs.first().map_or(0, Vec::len);
        if n == 0 || parts.targets.len() != n || parts.inputs.iter().any(|r| r.len() != m) {
            return Err(Error::Serialization(
                "inconsistent node training data".into(),
            ));
        }
        parts.kernel.check_dim(m)?;
        let points = DMatrix::from_fn(m, n, |j, i| parts.inputs[i][j]);
        Self::assemble(
            parts.kernel,
            parts.noise,
            points,
            DVector::from_vec(parts.targets),
            parts.input_scaling,
            parts.target_scaling,
            parts.report,
        )
    }

    pub fn to_parts(&self) -> NodeParts {
        NodeParts {
            kernel: self.kernel.clone(),
            noise: self.noise,
            inputs: self
                .points
                .column_iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
            targets: self.targets.iter().copied().collect(),
            input_scaling: self.input_scaling.clone(),
            target_scaling: self.target_scaling,
            report: self.report.clone(),
        }
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn n_train(&self) -> usize {
        self.points.ncols()
    }

    /// Training inputs in the node's scaled space, one point per column.
    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    /// Training targets in the node's scaled space.
    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    /// `C^{-1}` for `C = K + (noise + jitter) I`.
    pub fn cinv(&self) -> &DMatrix<f64> {
        &self.cinv
    }

    /// `C^{-1} y` in the scaled target space.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn input_scaling(&self) -> Option<&[Affine]> {
        self.input_scaling.as_deref()
    }

    pub fn target_scaling(&self) -> Option<Affine> {
        self.target_scaling
    }

    /// Log marginal likelihood of the (scaled) training targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn report(&self) -> Option<&TrainReport> {
        self.report.as_ref()
    }

    pub fn diagnostics(&self) -> &NodeDiagnostics {
        &self.diagnostics
    }

    /// Map raw input beliefs into the node's scaled input space.
    pub fn scale_inputs(&self, beliefs: &[GaussianBelief]) -> Result<Vec<GaussianBelief>> {
        if beliefs.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: beliefs.len(),
            });
        }
        Ok(match &self.input_scaling {
            Some(sc) => beliefs
                .iter()
                .zip(sc)
                .map(|(b, a)| a.apply_belief(*b))
                .collect(),
            None => beliefs.to_vec(),
        })
    }

    /// Map a belief from the scaled target space back to raw units.
    pub fn unscale_output(&self, b: GaussianBelief) -> GaussianBelief {
        match &self.target_scaling {
            Some(a) => a.invert_belief(b),
            None => b,
        }
    }

    fn scale_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(match &self.input_scaling {
            Some(sc) => x.iter().zip(sc).map(|(v, a)| a.apply(*v)).collect(),
            None => x.to_vec(),
        })
    }

    /// `k^T C^{-1} k` through the Cholesky factor.
    pub(crate) fn quad_form_inv(&self, k: &DVector<f64>) -> f64 {
        self.l
            .solve_lower_triangular(k)
            .expect("factor has a positive diagonal")
            .norm_squared()
    }

    /// Kernel vector between a scaled point and the training points.
    pub(crate) fn cross_kernel(&self, xs: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.n_train(),
            self.points
                .column_iter()
                .map(|c| self.kernel.eval_unchecked(xs, c.as_slice())),
        )
    }

    pub fn predict(&self, x: &[f64]) -> Result<GaussianBelief> {
        Ok(self.predict_detailed(x)?.belief)
    }

    pub fn predict_detailed(&self, x: &[f64]) -> Result<Prediction> {
        let xs = self.scale_point(x)?;
        let k = self.cross_kernel(&xs);
        let mean = k.dot(&self.alpha);
        let raw_var = self.kernel.eval_unchecked(&xs, &xs) + self.noise - self.quad_form_inv(&k);
        if raw_var < 0.0 {
            self.diagnostics.record_clamp();
        }
        let belief = self.unscale_output(GaussianBelief {
            mean,
            variance: raw_var.max(0.0),
        });
        let scale2 = self.target_scaling.map_or(1.0, |a| a.scale * a.scale);
        Ok(Prediction {
            belief,
            pre_clamp_variance: raw_var * scale2,
        })
    }
}

/// Fit hyperparameters by maximizing the log marginal likelihood.
pub fn train(kernel_init: Kernel, data: &TrainingSet, opts: &TrainOptions) -> Result<GPNode> {
    if data.len() < 2 {
        return Err(Error::InvalidData(format!(
            "training needs at least 2 points, got {}",
            data.len()
        )));
    }
    kernel_init.check_dim(data.dim())?;
    if !(opts.noise > 0.0 && opts.noise.is_finite()) {
        return Err(Error::InvalidData(format!(
            "initial noise variance must be positive, got {}",
            opts.noise
        )));
    }
    let (input_scaling, target_scaling) = scalings(data, opts);
    let points = scaled_points(data, &input_scaling);
    let targets = match &target_scaling {
        Some(a) => data.y.map(|v| a.apply(v)),
        None => data.y.clone(),
    };

    let bounds = LogBounds::new(&kernel_init, &points, &targets);
    let n_kernel = kernel_init.n_params();
    let fixed_noise_ln = opts.noise.ln();

    let objective = |p: &[f64]| -> Option<(f64, Vec<f64>)> {
        let full: Vec<f64> = if opts.fix_noise {
            p.iter()
                .copied()
                .chain(std::iter::once(fixed_noise_ln))
                .collect()
        } else {
            p.to_vec()
        };
        let mut clamped = bounds.clamp(&full);
        if opts.fix_noise {
            clamped[n_kernel] = fixed_noise_ln;
        }
        let kernel = kernel_init.with_log_params(&clamped[..n_kernel]).ok()?;
        let (lml, grad) =
            lml_grad_points(&kernel, clamped[n_kernel].exp(), &points, &targets).ok()?;
        // quadratic wall outside the box keeps the optimizer inside
        let mut value = -lml;
        let mut g: Vec<f64> = grad.iter().map(|v| -v).collect();
        for i in 0..p.len() {
            let over = full[i] - clamped[i];
            value += 10.0 * over * over;
            if over != 0.0 {
                g[i] = 20.0 * over;
            }
        }
        g.truncate(p.len());
        Some((value, g))
    };

    let init: Vec<f64> = kernel_init
        .log_params()
        .into_iter()
        .chain(std::iter::once(opts.noise.ln()))
        .collect();
    let init = bounds.clamp(&init);
    let strip = |v: Vec<f64>| -> Vec<f64> {
        if opts.fix_noise {
            v[..n_kernel].to_vec()
        } else {
            v
        }
    };

    let optimizer = Lbfgs {
        max_iters: opts.max_iters,
        tol: opts.tol,
        memory: 10,
    };
    let initial_value = objective(&strip(init.clone()));
    let mut best: Option<(Vec<f64>, f64, usize, bool)> = None;
    let mut total_iters = 0;
    for start in 0..opts.restarts.max(1) {
        let x0 = if start == 0 {
            init.clone()
        } else {
            let mut r = rng::stream(opts.seed, &[rng::tag::TRAIN, start as u64]);
            bounds.sample(&kernel_init, &mut r)
        };
        let Some(m) = optimizer.minimize(objective, strip(x0)) else {
            log::debug!("optimizer start {start} failed at its initial point");
            continue;
        };
        total_iters += m.iterations;
        if best.as_ref().is_none_or(|b| m.value < b.1) {
            best = Some((m.x, m.value, m.iterations, m.converged));
        }
    }
    let (x, value, _, converged) = best.ok_or(Error::NonFiniteObjective)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut full = if opts.fix_noise {
        x.into_iter()
            .chain(std::iter::once(fixed_noise_ln))
            .collect()
    } else {
        x
    };
    full = bounds.clamp(&full);
    if opts.fix_noise {
        full[n_kernel] = fixed_noise_ln;
    }
    let kernel = kernel_init.with_log_params(&full[..n_kernel])?;
    let noise = full[n_kernel].exp();
    let report = TrainReport {
        log_likelihood: 0.0,
        initial_log_likelihood: initial_value.map_or(f64::NEG_INFINITY, |(v, _)| -v),
        iterations: total_iters,
        starts: opts.restarts.max(1),
        converged,
    };
    let mut node = GPNode::assemble(
        kernel,
        noise,
        points,
        targets,
        input_scaling,
        target_scaling,
        Some(report),
    )?;
    if let Some(r) = node.report.as_mut() {
        r.log_likelihood = node.log_likelihood;
    }
    Ok(node)
}
