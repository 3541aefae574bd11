//! Implicit differentiation of losses evaluated at a PnP fixed point.
//!
//! For `x_bar = T(x_bar; theta)` and a loss `L(T(x_bar; theta))`, the total
//! derivative is `(dT/dtheta)^T w` where `w = J^T w + v`, `J` is the state
//! Jacobian of `T` at `x_bar` and `v` is the loss gradient at `T(x_bar)`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, DenoiserTape, ParamGrad, PreparedDenoiser};
use crate::error::{invalid, Result};
use crate::fixed_point::{anderson_solve, AndersonConfig, FixedPointResult};
use crate::forward_model::MeasurementOp;
use crate::image::{ComplexImage, RealImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    #[default]
    AdjointFixedPoint,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DeqBackwardConfig {
    pub anderson: AndersonConfig,
    pub jacobian_mode: JacobianMode,
}

impl DeqBackwardConfig {
    pub fn validate(&self) -> Result<()> {
        self.anderson.validate()
    }
}

/// Measurement-consistency loss on `u = T(x_bar)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `||A u - y||^2`
    #[default]
    L2sq,
    /// `||A u - y||_1 / ||y||_1` with complex magnitudes.
    Norml1,
}

impl LossKind {
    pub fn value(self, u: &RealImage, y: &ComplexImage, op: &MeasurementOp) -> Result<f64> {
        let r = op.apply(u)?.sub(y);
        Ok(match self {
            LossKind::L2sq => r.norm_sqr(),
            LossKind::Norml1 => l1(&r) / l1(y).max(f64::MIN_POSITIVE),
        })
    }

    /// Gradient of [`LossKind::value`] with respect to `u`.
    pub fn cotangent(self, u: &RealImage, y: &ComplexImage, op: &MeasurementOp) -> Result<RealImage> {
        let mut r = op.apply(u)?.sub(y);
        match self {
            LossKind::L2sq => {
                for v in r.data_mut() {
                    *v *= 2.0;
                }
            }
            LossKind::Norml1 => {
                let scale = 1.0 / l1(y).max(f64::MIN_POSITIVE);
                for v in r.data_mut() {
                    let m = v.norm();
                    *v = if m > 0.0 { *v * (scale / m) } else { 0.0.into() };
                }
            }
        }
        op.adjoint(&r)
    }
}

fn l1(y: &ComplexImage) -> f64 {
    y.data().iter().map(|v| v.norm()).sum()
}

/// A fixed-point map linearized at a point: its output there and the two
/// vector-Jacobian products needed for implicit differentiation.
pub trait Linearization {
    type Grad;

    fn output(&self) -> &[f64];
    fn vjp_state(&self, w: &[f64]) -> Result<Vec<f64>>;
    fn vjp_params(&self, w: &[f64]) -> Result<Self::Grad>;
}

/// Solves `w = J^T w + v` with Anderson mixing, starting from `v`.
pub fn solve_adjoint<L: Linearization>(lin: &L, v: &[f64], cfg: &AndersonConfig) -> Result<FixedPointResult<Vec<f64>>> {
    if v.len() != lin.output().len() {
        return Err(invalid("cotangent length does not match state"));
    }
    let result = anderson_solve(
        |w| {
            let mut jw = lin.vjp_state(w)?;
            crate::image::axpy(&mut jw, 1.0, v);
            Ok(jw)
        },
        v.to_vec(),
        cfg,
    )?;
    if !result.converged {
        warn!(
            "adjoint solve stopped after {} iterations at residual {:.3e}",
            result.iters_used,
            result.last_residual()
        );
    }
    Ok(result)
}

/// `||w - J^T w - v|| / ||v||`.
pub fn adjoint_residual<L: Linearization>(lin: &L, w: &[f64], v: &[f64]) -> Result<f64> {
    let jw = lin.vjp_state(w)?;
    let r: f64 = w.iter().zip(&jw).zip(v).map(|((a, b), c)| (a - b - c).powi(2)).sum::<f64>().sqrt();
    Ok(r / crate::image::norm(v).max(f64::MIN_POSITIVE))
}

/// Parameter gradient plus diagnostics of the adjoint solve.
#[derive(Debug, Clone)]
pub struct ImplicitGradient<G> {
    pub grad: G,
    pub adjoint: FixedPointResult<Vec<f64>>,
}

pub fn implicit_gradient<L: Linearization>(lin: &L, v: &[f64], cfg: &AndersonConfig) -> Result<ImplicitGradient<L::Grad>> {
    let adjoint = solve_adjoint(lin, v, cfg)?;
    let grad = lin.vjp_params(&adjoint.x_bar)?;
    Ok(ImplicitGradient { grad, adjoint })
}

/// `T(x) = D(x - gamma * A^H (A x - y))` linearized at `x_bar`.
pub struct PnpLinearization<'a> {
    op: &'a MeasurementOp,
    gamma: f64,
    tape: DenoiserTape<'a>,
}

impl<'a> PnpLinearization<'a> {
    pub fn new(
        x_bar: &RealImage,
        y: &ComplexImage,
        op: &'a MeasurementOp,
        net: &'a PreparedDenoiser,
        gamma: f64,
    ) -> Result<Self> {
        if x_bar.shape() != op.shape() || y.shape() != op.shape() {
            return Err(invalid("fixed point and measurement must match the operator shape"));
        }
        let mut z = x_bar.clone();
        z.axpy(-gamma, &op.grad_datafit(x_bar, y)?);
        let tape = net.record(&z)?;
        Ok(Self { op, gamma, tape })
    }

    pub fn output_image(&self) -> &RealImage {
        self.tape.output()
    }

    fn image(&self, w: &[f64]) -> Result<RealImage> {
        let (h, wd) = self.op.shape();
        RealImage::from_vec(h, wd, w.to_vec())
    }
}

impl Linearization for PnpLinearization<'_> {
    type Grad = ParamGrad;

    fn output(&self) -> &[f64] {
        self.tape.output().data()
    }

    fn vjp_state(&self, w: &[f64]) -> Result<Vec<f64>> {
        let u = self.tape.vjp_input(&self.image(w)?)?;
        let mut out = u.clone();
        out.axpy(-self.gamma, &self.op.adjoint(&self.op.apply(&u)?)?);
        Ok(out.into_vec())
    }

    fn vjp_params(&self, w: &[f64]) -> Result<ParamGrad> {
        self.tape.vjp_params(&self.image(w)?)
    }
}

/// `||A T(x_bar) - y||^2`.
pub fn loss_selfsup(
    x_bar: &RealImage,
    y: &ComplexImage,
    op: &MeasurementOp,
    params: &DenoiserParams,
    gamma: f64,
) -> Result<f64> {
    let u = crate::fixed_point::pnp_operator(x_bar, y, op, params, gamma)?;
    LossKind::L2sq.value(&u, y, op)
}

/// `2 A^H (A T(x_bar) - y)`.
pub fn loss_cotangent(
    x_bar: &RealImage,
    y: &ComplexImage,
    op: &MeasurementOp,
    params: &DenoiserParams,
    gamma: f64,
) -> Result<RealImage> {
    let u = crate::fixed_point::pnp_operator(x_bar, y, op, params, gamma)?;
    LossKind::L2sq.cotangent(&u, y, op)
}

pub fn adjoint_solve(
    x_bar: &RealImage,
    v: &RealImage,
    params: &DenoiserParams,
    y: &ComplexImage,
    op: &MeasurementOp,
    gamma: f64,
    cfg: &DeqBackwardConfig,
) -> Result<FixedPointResult<RealImage>> {
    cfg.validate()?;
    v.ensure_same_shape(x_bar, "adjoint_solve")?;
    let net = params.prepare();
    let lin = PnpLinearization::new(x_bar, y, op, &net, gamma)?;
    let (h, w) = x_bar.shape();
    Ok(solve_adjoint(&lin, v.data(), &cfg.anderson)?.map(|s| RealImage::from_vec(h, w, s).expect("shape preserved")))
}

/// Loss value, parameter gradient and adjoint-solve diagnostics.
#[derive(Debug, Clone)]
pub struct DeqGradient {
    pub loss: f64,
    pub grad: ParamGrad,
    pub adjoint: FixedPointResult<Vec<f64>>,
}

/// Gradient of `loss(T(x_bar))` through the implicit fixed point.
pub fn deq_gradient_with(
    loss: LossKind,
    x_bar: &RealImage,
    y: &ComplexImage,
    op: &MeasurementOp,
    params: &DenoiserParams,
    gamma: f64,
    cfg: &DeqBackwardConfig,
) -> Result<DeqGradient> {
    cfg.validate()?;
    let net = params.prepare();
    let lin = PnpLinearization::new(x_bar, y, op, &net, gamma)?;
    let u = lin.output_image();
    let value = loss.value(u, y, op)?;
    let v = loss.cotangent(u, y, op)?;
    if v.data().iter().all(|&c| c == 0.0) {
        return Ok(DeqGradient {
            loss: value,
            grad: ParamGrad::zeros_like(params),
            adjoint: FixedPointResult { x_bar: v.into_vec(), residuals: vec![0.0], iters_used: 0, converged: true },
        });
    }
    let ig = implicit_gradient(&lin, v.data(), &cfg.anderson)?;
    Ok(DeqGradient { loss: value, grad: ig.grad, adjoint: ig.adjoint })
}

pub fn deq_gradient(
    x_bar: &RealImage,
    y: &ComplexImage,
    op: &MeasurementOp,
    params: &DenoiserParams,
    gamma: f64,
    cfg: &DeqBackwardConfig,
) -> Result<DeqGradient> {
    deq_gradient_with(LossKind::L2sq, x_bar, y, op, params, gamma, cfg)
}

/// Gradient of `0.5 ||T(x_bar) - x_star||^2` through the implicit fixed point.
pub fn deq_gradient_supervised(
    x_bar: &RealImage,
    x_star: &RealImage,
    y: &ComplexImage,
    op: &MeasurementOp,
    params: &DenoiserParams,
    gamma: f64,
    cfg: &DeqBackwardConfig,
) -> Result<DeqGradient> {
    cfg.validate()?;
    x_star.ensure_same_shape(x_bar, "deq_gradient_supervised")?;
    let net = params.prepare();
    let lin = PnpLinearization::new(x_bar, y, op, &net, gamma)?;
    let v = lin.output_image().sub(x_star);
    let value = 0.5 * v.dot(&v);
    if value == 0.0 {
        return Ok(DeqGradient {
            loss: 0.0,
            grad: ParamGrad::zeros_like(params),
            adjoint: FixedPointResult { x_bar: v.into_vec(), residuals: vec![0.0], iters_used: 0, converged: true },
        });
    }
    let ig = implicit_gradient(&lin, v.data(), &cfg.anderson)?;
    Ok(DeqGradient { loss: value, grad: ig.grad, adjoint: ig.adjoint })
}
