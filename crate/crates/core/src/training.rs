//! Pre-training of denoiser priors as AWGN removers on patches.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, ParamGrad};
use crate::error::{invalid, Error, Result};
use crate::image::RealImage;
use crate::metrics::psnr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub noise_sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub patch_size: usize,
    pub patches_per_image: usize,
    /// Fraction of pairs held out for the validation PSNR.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 5.0 / 255.0,
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            patch_size: 32,
            patches_per_image: 8,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid("noise sigma must be nonnegative"));
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.patches_per_image == 0 {
            return Err(invalid("batch size, patch size and patches per image must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub noisy: RealImage,
    pub clean: RealImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-pixel squared error of the minibatches seen in each epoch.
    pub epoch_mse: Vec<f64>,
    pub validation_psnr: f64,
    /// PSNR of the unprocessed noisy validation inputs.
    pub validation_input_psnr: f64,
    pub train_pairs: usize,
    pub validation_pairs: usize,
}

/// Random `patch_size` crops with additive Gaussian noise (unclipped).
/// Returns the pairs and the number of images skipped for being too small.
pub fn make_training_pairs(images: &[RealImage], cfg: &TrainConfig) -> Result<(Vec<TrainingPair>, usize)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let p = cfg.patch_size;
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for image in images {
        let (h, w) = image.shape();
        if h < p || w < p {
            skipped += 1;
            continue;
        }
        for _ in 0..cfg.patches_per_image {
            let r0 = rng.random_range(0..=h - p);
            let c0 = rng.random_range(0..=w - p);
            let clean = RealImage::from_fn(p, p, |r, c| image.get(r0 + r, c0 + c));
            let noisy = if cfg.noise_sigma > 0.0 {
                clean.map(|v| v + normal.sample(&mut rng))
            } else {
                clean.clone()
            };
            pairs.push(TrainingPair { noisy, clean });
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} images smaller than the {p}x{p} patch size");
    }
    Ok((pairs, skipped))
}

/// Mean of `0.5 ||D(noisy) - clean||^2` over the batch and its parameter gradient.
pub fn batch_loss_and_grad(params: &DenoiserParams, batch: &[&TrainingPair]) -> Result<(f64, ParamGrad)> {
    let net = params.prepare();
    let mut grad = ParamGrad::zeros_like(params);
    let mut loss = 0.0;
    for pair in batch {
        let tape = net.record(&pair.noisy)?;
        let residual = tape.output().sub(&pair.clean);
        loss += 0.5 * residual.dot(&residual);
        grad.axpy(1.0, &tape.vjp_params(&residual)?);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.scale(scale);
    Ok((loss * scale, grad))
}

struct AdamState {
    m: ParamGrad,
    v: ParamGrad,
    step: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(params: &DenoiserParams) -> Self {
        Self { m: ParamGrad::zeros_like(params), v: ParamGrad::zeros_like(params), step: 0 }
    }

    fn apply(&mut self, params: &mut DenoiserParams, grad: &ParamGrad, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((layer, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            };
            update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

/// Minibatch training of `0.5 ||D(noisy) - clean||^2`; spectral normalization
/// is re-applied after every step when enabled in the denoiser config.
pub fn train_denoiser(
    params: &DenoiserParams,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, TrainReport)> {
    cfg.validate()?;
    params.validate()?;
    if pairs.is_empty() {
        return Err(invalid("no training pairs"));
    }
    let n_val = ((pairs.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_val = n_val.min(pairs.len() - 1);
    let (train, val) = pairs.split_at(pairs.len() - n_val);

    let mut params = params.clone();
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7EA1);
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    let pixels = train[0].clean.len() as f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = batch_loss_and_grad(&params, &batch)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += 2.0 * loss * batch.len() as f64 / pixels;
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (layer, g) in params.layers.iter_mut().zip(&grad.layers) {
                        crate::image::axpy(&mut layer.weights, -cfg.lr, &g.weights);
                        crate::image::axpy(&mut layer.bias, -cfg.lr, &g.bias);
                    }
                }
                Optimizer::Adam => adam.apply(&mut params, &grad, cfg.lr),
            }
            if params.config.spectral_norm {
                params.spectral_normalize_in_place();
            }
        }
        let mse = total / train.len() as f64;
        info!("epoch {epoch}: train mse {mse:.3e}");
        epoch_mse.push(mse);
    }

    let (validation_psnr, validation_input_psnr) = validation_psnr(&params, if val.is_empty() { train } else { val })?;
    let report = TrainReport {
        epoch_mse,
        validation_psnr,
        validation_input_psnr,
        train_pairs: train.len(),
        validation_pairs: val.len(),
    };
    Ok((params, report))
}

/// Mean PSNR of denoised and of raw noisy inputs over `pairs`.
pub fn validation_psnr(params: &DenoiserParams, pairs: &[TrainingPair]) -> Result<(f64, f64)> {
    let net = params.prepare();
    let (mut out, mut input) = (0.0, 0.0);
    for pair in pairs {
        out += psnr(&net.apply(&pair.noisy)?, &pair.clean, 1.0)?;
        input += psnr(&pair.noisy, &pair.clean, 1.0)?;
    }
    let n = pairs.len() as f64;
    Ok((out / n, input / n))
}
