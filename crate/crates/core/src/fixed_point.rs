//! The PnP proximal-gradient operator `T(x) = D(x - gamma * grad g(x))` and
//! the fixed-point solvers used for the forward and backward passes.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, PreparedDenoiser};
use crate::error::{invalid, Error, Result};
use crate::forward_model::MeasurementOp;
use crate::image::{axpy, norm, ComplexImage, RealImage};

/// Floor on the denominator of the relative residual.
const RESIDUAL_EPS: f64 = 1e-12;
/// Relative residual beyond which a solve is declared divergent.
const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acceleration {
    Plain,
    Nesterov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnPConfig {
    pub gamma: f64,
    pub max_iter: usize,
    /// Relative-change tolerance.
    pub tol: f64,
    pub acceleration: Acceleration,
}

impl Default for PnPConfig {
    fn default() -> Self {
        Self { gamma: 1.0, max_iter: 100, tol: 1e-6, acceleration: Acceleration::Nesterov }
    }
}

impl PnPConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(invalid("gamma must be positive"));
        }
        if self.max_iter == 0 || !(self.tol >= 0.0) {
            return Err(invalid("max_iter must be positive and tol nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AndersonConfig {
    /// History depth.
    pub depth_m: usize,
    pub damping_beta: f64,
    /// Tikhonov weight, relative to the mean diagonal of the residual Gram matrix.
    pub reg_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for AndersonConfig {
    fn default() -> Self {
        Self { depth_m: 5, damping_beta: 1.0, reg_lambda: 1e-4, max_iter: 100, tol: 1e-6 }
    }
}

impl AndersonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_m == 0 {
            return Err(invalid("Anderson depth must be >= 1"));
        }
        if !(self.damping_beta > 0.0 && self.damping_beta <= 1.0) {
            return Err(invalid("Anderson damping must lie in (0, 1]"));
        }
        if !(self.reg_lambda >= 0.0) || !(self.tol >= 0.0) || self.max_iter == 0 {
            return Err(invalid("invalid Anderson regularization, tolerance or iteration cap"));
        }
        Ok(())
    }
}

/// Outcome of a fixed-point solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult<S> {
    pub x_bar: S,
    /// Relative residual after each iteration.
    pub residuals: Vec<f64>,
    pub iters_used: usize,
    pub converged: bool,
}

impl<S> FixedPointResult<S> {
    pub fn last_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::INFINITY)
    }

    pub fn map<T>(self, f: impl FnOnce(S) -> T) -> FixedPointResult<T> {
        FixedPointResult {
            x_bar: f(self.x_bar),
            residuals: self.residuals,
            iters_used: self.iters_used,
            converged: self.converged,
        }
    }
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let diff: f64 = new.iter().zip(old).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    diff / norm(new).max(RESIDUAL_EPS)
}

fn guard(iteration: usize, residual: f64) -> Result<()> {
    if !residual.is_finite() || residual > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { iteration, residual });
    }
    Ok(())
}

/// Plain or Nesterov-accelerated iteration of `map`, stopping once the
/// relative change `||x_k - x_{k-1}|| / ||x_k||` drops to `tol`.
pub fn iterate<F>(
    mut map: F,
    x0: Vec<f64>,
    max_iter: usize,
    tol: f64,
    acceleration: Acceleration,
) -> Result<FixedPointResult<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut prev = x0.clone();
    let mut s = x0;
    let mut t = 1.0f64;
    let mut residuals = Vec::new();
    for k in 1..=max_iter {
        let x = map(&s)?;
        let r = relative_change(&x, &prev);
        residuals.push(r);
        guard(k, r)?;
        if r <= tol {
            return Ok(FixedPointResult { x_bar: x, residuals, iters_used: k, converged: true });
        }
        s = match acceleration {
            Acceleration::Plain => x.clone(),
            Acceleration::Nesterov => {
                let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
                let beta = (t - 1.0) / t_next;
                t = t_next;
                x.iter().zip(&prev).map(|(a, b)| a + beta * (a - b)).collect()
            }
        };
        prev = x;
    }
    Ok(FixedPointResult { x_bar: prev, residuals, iters_used: max_iter, converged: false })
}

/// Anderson-accelerated fixed-point iteration.
///
/// Keeps the last `m` iterates `x_i` with images `G(x_i)` and residuals
/// `f_i = G(x_i) - x_i`, picks mixing weights from
/// `min ||sum a_i f_i||^2 + lambda ||a||^2  s.t.  sum a_i = 1`
/// (solved through its KKT system) and sets
/// `x_{k+1} = (1 - beta) sum a_i x_i + beta sum a_i G(x_i)`.
/// The residual reported is `||G(x_k) - x_k|| / ||G(x_k)||`.
pub fn anderson_solve<F>(mut map: F, x0: Vec<f64>, cfg: &AndersonConfig) -> Result<FixedPointResult<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let m = cfg.depth_m;
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut gs: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut fs: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut residuals = Vec::new();
    let mut x = x0;
    let mut last_g = x.clone();
    for k in 1..=cfg.max_iter {
        let g = map(&x)?;
        if g.len() != x.len() {
            return Err(invalid("fixed-point map changed the state dimension"));
        }
        let f: Vec<f64> = g.iter().zip(&x).map(|(a, b)| a - b).collect();
        let r = norm(&f) / norm(&g).max(RESIDUAL_EPS);
        residuals.push(r);
        guard(k, r)?;
        if r <= cfg.tol {
            return Ok(FixedPointResult { x_bar: g, residuals, iters_used: k, converged: true });
        }
        if xs.len() == m {
            xs.remove(0);
            gs.remove(0);
            fs.remove(0);
        }
        xs.push(x);
        gs.push(g.clone());
        fs.push(f);
        last_g = g;

        let alpha = mixing_weights(&fs, cfg.reg_lambda).unwrap_or_else(|| {
            debug!("Anderson KKT system singular at iteration {k}; taking a plain step");
            let mut a = vec![0.0; fs.len()];
            *a.last_mut().expect("non-empty history") = 1.0;
            a
        });
        let mut next = vec![0.0; last_g.len()];
        for ((a, xi), gi) in alpha.iter().zip(&xs).zip(&gs) {
            axpy(&mut next, a * (1.0 - cfg.damping_beta), xi);
            axpy(&mut next, a * cfg.damping_beta, gi);
        }
        x = next;
    }
    Ok(FixedPointResult { x_bar: last_g, residuals, iters_used: cfg.max_iter, converged: false })
}

fn mixing_weights(fs: &[Vec<f64>], reg_lambda: f64) -> Option<Vec<f64>> {
    let n = fs.len();
    if n == 1 {
        return Some(vec![1.0]);
    }
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = crate::image::dot(&fs[i], &fs[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let scale = gram.trace() / n as f64;
    let mut kkt = DMatrix::<f64>::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = 2.0 * gram[(i, j)];
        }
        kkt[(i, i)] += 2.0 * reg_lambda * scale;
        kkt[(i, n)] = 1.0;
        kkt[(n, i)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n + 1);
    rhs[n] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    let alpha: Vec<f64> = sol.iter().take(n).copied().collect();
    alpha.iter().all(|a| a.is_finite()).then_some(alpha)
}

/// `T(x) = D(x - gamma * grad g(x))` with the denoiser weights frozen.
#[derive(Debug, Clone)]
pub struct PnpOperator<'a> {
    pub op: &'a MeasurementOp,
    pub y: &'a ComplexImage,
    pub denoiser: PreparedDenoiser,
    pub gamma: f64,
}

impl<'a> PnpOperator<'a> {
    pub fn new(op: &'a MeasurementOp, y: &'a ComplexImage, params: &DenoiserParams, gamma: f64) -> Result<Self> {
        if y.shape() != op.shape() {
            return Err(invalid("measurement shape does not match operator"));
        }
        Ok(Self { op, y, denoiser: params.prepare(), gamma })
    }

    /// `x - gamma * grad g(x)`.
    pub fn gradient_step(&self, x: &RealImage) -> Result<RealImage> {
        let mut z = x.clone();
        z.axpy(-self.gamma, &self.op.grad_datafit(x, self.y)?);
        Ok(z)
    }

    pub fn apply(&self, x: &RealImage) -> Result<RealImage> {
        self.denoiser.apply(&self.gradient_step(x)?)
    }

    pub fn solve(&self, x0: &RealImage, cfg: &PnPConfig) -> Result<FixedPointResult<RealImage>> {
        cfg.validate()?;
        let (h, w) = x0.shape();
        if (h, w) != self.op.shape() {
            return Err(invalid("initial image shape does not match operator"));
        }
        let result = iterate(
            |s| {
                let s = RealImage::from_vec(h, w, s.to_vec())?;
                Ok(self.apply(&s)?.into_vec())
            },
            x0.data().to_vec(),
            cfg.max_iter,
            cfg.tol,
            cfg.acceleration,
        )?;
        Ok(result.map(|v| RealImage::from_vec(h, w, v).expect("shape preserved")))
    }
}

pub fn pnp_operator(
    x: &RealImage,
    y: &ComplexImage,
    op: &MeasurementOp,
    params: &DenoiserParams,
    gamma: f64,
) -> Result<RealImage> {
    PnpOperator::new(op, y, params, gamma)?.apply(x)
}

/// PnP-PGM from `x0`; `cfg.gamma` is the data-fidelity step size.
pub fn run_pnp(
    x0: &RealImage,
    y: &ComplexImage,
    op: &MeasurementOp,
    params: &DenoiserParams,
    cfg: &PnPConfig,
) -> Result<FixedPointResult<RealImage>> {
    PnpOperator::new(op, y, params, cfg.gamma)?.solve(x0, cfg)
}
