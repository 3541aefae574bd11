//! Test-time training: adapt the denoiser to one measurement by descending the
//! measurement-consistency loss at the PnP fixed point.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, ParamGrad};
use crate::deq::{deq_gradient_with, DeqBackwardConfig, LossKind};
use crate::error::{invalid, Error, Result};
use crate::fixed_point::{pnp_operator, run_pnp, PnPConfig};
use crate::forward_model::MeasurementOp;
use crate::image::{ComplexImage, RealImage};
use crate::metrics::{psnr, ssim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TttOptimizer {
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TttConfig {
    pub num_iter: usize,
    pub lr: f64,
    pub optimizer: TttOptimizer,
    pub loss: LossKind,
    pub record_every: usize,
    /// Re-apply spectral normalization after every update.
    pub renormalize: bool,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self { num_iter: 50, lr: 1e-5, optimizer: TttOptimizer::Sgd, loss: LossKind::L2sq, record_every: 1, renormalize: true }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("TTT learning rate must be finite and nonnegative"));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    /// Loss of this iterate under the weights that produced it.
    pub loss: f64,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub forward_residual: f64,
    /// Residual of the adjoint solve used for the following update.
    pub adjoint_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TttTrace {
    pub entries: Vec<TraceEntry>,
}

impl TttTrace {
    pub fn psnr(&self) -> Option<Vec<f64>> {
        self.entries.iter().map(|e| e.psnr_db).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

#[derive(Debug)]
pub struct TttOutcome {
    pub params: DenoiserParams,
    /// Reconstruction with the final weights.
    pub reconstruction: RealImage,
    pub trace: TttTrace,
    /// Reconstructions aligned with `trace.entries`.
    pub iterates: Vec<RealImage>,
    /// Set when an inner solve failed; the trace stops at the last good iterate.
    pub failure: Option<Error>,
}

pub fn sgd_step(params: &DenoiserParams, grad: &ParamGrad, lr: f64) -> Result<DenoiserParams> {
    params.sgd_step(grad, lr)
}

/// Adapts a private copy of `params` to the measurement `y`. Every
/// reconstruction restarts from `x0`; `ground_truth` only feeds the trace.
#[allow(clippy::too_many_arguments)]
pub fn ttt_adapt(
    x0: &RealImage,
    y: &ComplexImage,
    op: &MeasurementOp,
    params: &DenoiserParams,
    pnp_cfg: &PnPConfig,
    deq_cfg: &DeqBackwardConfig,
    ttt_cfg: &TttConfig,
    ground_truth: Option<&RealImage>,
) -> Result<TttOutcome> {
    ttt_cfg.validate()?;
    deq_cfg.validate()?;
    if let Some(gt) = ground_truth {
        gt.ensure_same_shape(x0, "ttt_adapt ground truth")?;
    }
    let gamma = pnp_cfg.gamma;
    let mut theta = params.clone();
    let mut solve = run_pnp(x0, y, op, &theta, pnp_cfg)?;
    let mut trace = TttTrace::default();
    let mut iterates = Vec::new();
    let mut failure = None;

    for i in 0..=ttt_cfg.num_iter {
        let x = &solve.x_bar;
        let (loss, grad, adjoint_residual) = if i < ttt_cfg.num_iter {
            match deq_gradient_with(ttt_cfg.loss, x, y, op, &theta, gamma, deq_cfg) {
                Ok(g) => (g.loss, Some(g.grad), Some(g.adjoint.last_residual())),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        } else {
            let u = pnp_operator(x, y, op, &theta, gamma)?;
            (ttt_cfg.loss.value(&u, y, op)?, None, None)
        };
        if !loss.is_finite() {
            failure = Some(Error::NonFiniteTtt { iteration: i });
            break;
        }
        if i % ttt_cfg.record_every == 0 {
            let (p, s) = match ground_truth {
                Some(gt) => (Some(psnr(x, gt, 1.0)?), ssim(x, gt).ok()),
                None => (None, None),
            };
            debug!("ttt iteration {i}: loss {loss:.4e} psnr {p:?}");
            trace.entries.push(TraceEntry {
                index: i,
                loss,
                psnr_db: p,
                ssim: s,
                forward_residual: solve.last_residual(),
                adjoint_residual,
            });
            iterates.push(x.clone());
        }
        let Some(grad) = grad else { break };
        if ttt_cfg.lr != 0.0 {
            theta = sgd_step(&theta, &grad, ttt_cfg.lr)?;
            if ttt_cfg.renormalize && theta.config.spectral_norm {
                theta.spectral_normalize_in_place();
            }
        }
        match run_pnp(x0, y, op, &theta, pnp_cfg) {
            Ok(next) => solve = next,
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if let Some(e) = &failure {
        warn!("test-time training stopped early: {e}");
    }
    Ok(TttOutcome { params: theta, reconstruction: solve.x_bar, trace, iterates, failure })
}

/// Position of the highest-PSNR iterate (earliest on ties). PSNR comes from
/// the trace, or from `ground_truth` when the trace has none.
pub fn best_iterate(trace: &TttTrace, results: &[RealImage], ground_truth: Option<&RealImage>) -> Result<(usize, RealImage)> {
    if trace.entries.is_empty() || trace.entries.len() != results.len() {
        return Err(Error::Precondition("trace and results must be non-empty and aligned".into()));
    }
    let scores: Vec<f64> = match (trace.psnr(), ground_truth) {
        (Some(p), _) => p,
        (None, Some(gt)) => results.iter().map(|r| psnr(r, gt, 1.0)).collect::<Result<_>>()?,
        (None, None) => return Err(Error::Precondition("no PSNR recorded and no ground truth given".into())),
    };
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    Ok((best, results[best].clone()))
}
