//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Objective evaluations may fail (for example a covariance that cannot be
//! factorized); a failed trial point is treated as an infinitely bad value
//! and the line search shrinks the step.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Lbfgs {
    pub max_iters: usize,
    pub tol: f64,
    pub memory: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

impl Lbfgs {
    /// Minimize `f`, which returns the value and gradient or `None` when the
    /// point is infeasible. Returns `None` only if the starting point fails.
    pub fn minimize<F>(&self, mut f: F, x0: Vec<f64>) -> Option<Minimum>
    where
        F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    {
        let (mut fx, mut g) = f(&x0)?;
        if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut x = x0;
        let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        let mut converged = false;
        let mut iterations = 0;

        for it in 0..self.max_iters {
            iterations = it + 1;
            if inf_norm(&g) < self.tol {
                converged = true;
                break;
            }

            // two-loop recursion
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(history.len());
            for (s, y, rho) in history.iter().rev() {
                let a = rho * dot(s, &q);
                for (qi, yi) in q.iter_mut().zip(y) {
                    *qi -= a * yi;
                }
                alphas.push(a);
            }
            let gamma = history
                .back()
                .map(|(s, y, _)| dot(s, y) / dot(y, y))
                .unwrap_or_else(|| 1.0 / inf_norm(&g).max(1.0));
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
            for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(y, &q);
                for (qi, si) in q.iter_mut().zip(s) {
                    *qi += (a - b) * si;
                }
            }
            let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
            let mut slope = dot(&g, &dir);
            if slope >= 0.0 {
                history.clear();
                dir = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
                slope = dot(&g, &dir);
            }

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..50 {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
                if let Some((ft, gt)) = f(&trial) {
                    if ft.is_finite()
                        && gt.iter().all(|v| v.is_finite())
                        && ft <= fx + 1e-4 * step * slope
                    {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((xn, fxn, gn)) = accepted else {
                break;
            };

            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if history.len() == self.memory {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }

            let rel_change = (fx - fxn).abs() / fx.abs().max(1.0);
            x = xn;
            fx = fxn;
            g = gn;
            if rel_change < 1e-12 {
                converged = true;
                break;
            }
        }

        Some(Minimum {
            x,
            value: fx,
            iterations,
            converged,
        })
    }
}
