//! DnCNN-style residual denoiser with spectrally normalized convolutions.
//!
//! The network computes `D(x) = x - net(x)` with
//! `net = conv -> ReLU -> (conv -> ReLU)^(depth-2) -> conv`. Each layer's
//! effective weights are `W / max(1, sigma / lipschitz_target)` where `sigma`
//! is the power-iteration estimate of the layer's operator norm read from
//! `sn_state`. Parameter gradients treat that scale as a constant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv2d_linear, conv2d_transpose, conv2d_vjp_kernel, ConvKernel, KernelGrad};
use crate::error::{invalid, Result};
use crate::image::{norm, FeatureMap, RealImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Number of convolution layers (>= 2).
    pub depth: usize,
    /// Hidden channel count.
    pub channels: usize,
    pub kernel_size: usize,
    pub residual: bool,
    pub lipschitz_target: f64,
    pub power_iters: usize,
    pub spectral_norm: bool,
    /// Spatial size of the feature maps the conv operator norm is estimated on.
    pub sn_reference_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            channels: 16,
            kernel_size: 3,
            residual: true,
            lipschitz_target: 1.0,
            power_iters: 1,
            spectral_norm: true,
            sn_reference_size: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(invalid(format!("denoiser depth must be >= 2, got {}", self.depth)));
        }
        if self.channels == 0 {
            return Err(invalid("denoiser channels must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid("kernel size must be odd"));
        }
        if !(self.lipschitz_target > 0.0) {
            return Err(invalid("lipschitz_target must be positive"));
        }
        if self.power_iters == 0 || self.sn_reference_size == 0 {
            return Err(invalid("power_iters and sn_reference_size must be positive"));
        }
        Ok(())
    }

    /// `(out_channels, in_channels)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let cin = if l == 0 { 1 } else { self.channels };
                let cout = if l + 1 == self.depth { 1 } else { self.channels };
                (cout, cin)
            })
            .collect()
    }
}

/// Weights, biases and power-iteration state of the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub layers: Vec<ConvKernel>,
    /// Per-layer left singular vector estimate, `out_channels x R x R`.
    pub sn_state: Vec<Vec<f64>>,
}

/// Gradient with respect to every weight and bias of a [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub layers: Vec<KernelGrad>,
}

impl ParamGrad {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        Self { layers: params.layers.iter().map(ConvKernel::zero_grad).collect() }
    }

    pub fn dot(&self, other: &ParamGrad) -> f64 {
        self.layers.iter().zip(&other.layers).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(alpha));
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(alpha, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Entry at a flat index (see [`DenoiserParams::param_mut`]).
    pub fn get(&self, index: usize) -> f64 {
        let mut idx = index;
        for l in &self.layers {
            if idx < l.weights.len() {
                return l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index {index} out of range")
    }
}

fn reference_len(kernel: &ConvKernel, r: usize) -> usize {
    kernel.out_channels * r * r
}

fn unit_vector(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl DenoiserParams {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Mutable access by flat index: layer by layer, weights then bias.
    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut idx = index;
        for l in &mut self.layers {
            if idx < l.weights.len() {
                return &mut l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index {index} out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.layer_shapes();
        if shapes.len() != self.layers.len() || self.sn_state.len() != self.layers.len() {
            return Err(invalid("layer count does not match config depth"));
        }
        let r = self.config.sn_reference_size;
        for (l, (kernel, &(cout, cin))) in self.layers.iter().zip(&shapes).enumerate() {
            kernel.validate()?;
            if kernel.out_channels != cout
                || kernel.in_channels != cin
                || kernel.kh != self.config.kernel_size
                || kernel.kw != self.config.kernel_size
            {
                return Err(invalid(format!("layer {l} shape does not match config")));
            }
            if self.sn_state[l].len() != reference_len(kernel, r) {
                return Err(invalid(format!("layer {l} spectral state has wrong length")));
            }
        }
        if !self.is_finite() {
            return Err(invalid("non-finite denoiser weights"));
        }
        Ok(())
    }

    /// Operator-norm estimate `||K^T u||` of each layer from the stored state.
    pub fn sigma_estimates(&self) -> Vec<f64> {
        let r = self.config.sn_reference_size;
        self.layers
            .iter()
            .zip(&self.sn_state)
            .map(|(kernel, u)| {
                let u = FeatureMap::from_vec(kernel.out_channels, r, r, u.clone()).expect("state shape");
                conv2d_transpose(kernel, &u).expect("state channels").norm()
            })
            .collect()
    }

    /// Freezes the effective (normalized) weights for repeated evaluation.
    pub fn prepare(&self) -> PreparedDenoiser {
        let scales: Vec<f64> = if self.config.spectral_norm {
            self.sigma_estimates()
                .into_iter()
                .map(|s| (s / self.config.lipschitz_target).max(1.0))
                .collect()
        } else {
            vec![1.0; self.layers.len()]
        };
        let effective = self
            .layers
            .iter()
            .zip(&scales)
            .map(|(k, &s)| {
                let mut k = k.clone();
                if s != 1.0 {
                    k.weights.iter_mut().for_each(|w| *w /= s);
                }
                k
            })
            .collect();
        PreparedDenoiser { effective, scales, residual: self.config.residual }
    }

    /// Power iteration on every layer followed by rescaling of the stored
    /// weights so the estimated operator norm does not exceed the target.
    pub fn spectral_normalize_in_place(&mut self) {
        let r = self.config.sn_reference_size;
        let target = self.config.lipschitz_target;
        for (kernel, u) in self.layers.iter_mut().zip(self.sn_state.iter_mut()) {
            let mut sigma = 0.0;
            for _ in 0..self.config.power_iters {
                let uf = FeatureMap::from_vec(kernel.out_channels, r, r, u.clone()).expect("state shape");
                let mut v = conv2d_transpose(kernel, &uf).expect("state channels");
                let vn = v.norm();
                if vn == 0.0 {
                    sigma = 0.0;
                    break;
                }
                v.scale(1.0 / vn);
                let kv = conv2d_linear(&v, kernel).expect("state channels");
                sigma = kv.norm();
                if sigma == 0.0 {
                    break;
                }
                for (dst, src) in u.iter_mut().zip(kv.data()) {
                    *dst = src / sigma;
                }
            }
            if sigma > target {
                let s = target / sigma;
                kernel.weights.iter_mut().for_each(|w| *w *= s);
            }
        }
    }

    /// `theta - lr * grad`; the power-iteration state is carried over.
    pub fn sgd_step(&self, grad: &ParamGrad, lr: f64) -> Result<DenoiserParams> {
        if grad.layers.len() != self.layers.len()
            || grad
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len())
        {
            return Err(invalid("gradient shape does not match parameters"));
        }
        let mut next = self.clone();
        for (layer, g) in next.layers.iter_mut().zip(&grad.layers) {
            crate::image::axpy(&mut layer.weights, -lr, &g.weights);
            crate::image::axpy(&mut layer.bias, -lr, &g.bias);
        }
        Ok(next)
    }
}

/// He-normal weights, zero biases, random unit spectral state; deterministic per seed.
pub fn init_params(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel_size;
    let r = config.sn_reference_size;
    let mut layers = Vec::with_capacity(config.depth);
    let mut sn_state = Vec::with_capacity(config.depth);
    for (cout, cin) in config.layer_shapes() {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let weights = (0..cout * cin * k * k).map(|_| normal.sample(&mut rng)).collect();
        layers.push(ConvKernel::new(cout, cin, k, k, weights, vec![0.0; cout])?);
        sn_state.push(unit_vector(cout * r * r, &mut rng));
    }
    Ok(DenoiserParams { config: config.clone(), layers, sn_state })
}

pub fn spectral_normalize(params: &DenoiserParams) -> DenoiserParams {
    let mut out = params.clone();
    out.spectral_normalize_in_place();
    out
}

pub fn denoise(x: &RealImage, params: &DenoiserParams) -> Result<RealImage> {
    params.prepare().apply(x)
}

pub fn denoiser_vjp_input(x: &RealImage, params: &DenoiserParams, v: &RealImage) -> Result<RealImage> {
    let net = params.prepare();
    let tape = net.record(x)?;
    tape.vjp_input(v)
}

pub fn denoiser_vjp_params(x: &RealImage, params: &DenoiserParams, v: &RealImage) -> Result<ParamGrad> {
    let net = params.prepare();
    let tape = net.record(x)?;
    tape.vjp_params(v)
}

/// Denoiser with frozen effective weights.
#[derive(Debug, Clone)]
pub struct PreparedDenoiser {
    effective: Vec<ConvKernel>,
    scales: Vec<f64>,
    residual: bool,
}

fn relu_in_place(map: &mut FeatureMap) {
    map.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

impl PreparedDenoiser {
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn effective_layers(&self) -> &[ConvKernel] {
        &self.effective
    }

    /// Pre-residual network output.
    pub fn net(&self, x: &RealImage) -> Result<RealImage> {
        let mut h = FeatureMap::from_image(x);
        let last = self.effective.len() - 1;
        for (l, kernel) in self.effective.iter().enumerate() {
            h = conv2d(&h, kernel)?;
            if l < last {
                relu_in_place(&mut h);
            }
        }
        h.into_image()
    }

    pub fn apply(&self, x: &RealImage) -> Result<RealImage> {
        let net = self.net(x)?;
        Ok(if self.residual { x.sub(&net) } else { net })
    }

    /// Forward pass that keeps every layer input for reverse mode.
    pub fn record(&self, x: &RealImage) -> Result<DenoiserTape<'_>> {
        let mut inputs = Vec::with_capacity(self.effective.len());
        let mut h = FeatureMap::from_image(x);
        let last = self.effective.len() - 1;
        for (l, kernel) in self.effective.iter().enumerate() {
            let mut next = conv2d(&h, kernel)?;
            if l < last {
                relu_in_place(&mut next);
            }
            inputs.push(h);
            h = next;
        }
        let net = h.into_image()?;
        let output = if self.residual { x.sub(&net) } else { net };
        Ok(DenoiserTape { net: self, inputs, output })
    }
}

/// Stored forward activations of one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct DenoiserTape<'a> {
    net: &'a PreparedDenoiser,
    inputs: Vec<FeatureMap>,
    output: RealImage,
}

impl DenoiserTape<'_> {
    pub fn output(&self) -> &RealImage {
        &self.output
    }

    pub fn input(&self) -> RealImage {
        self.inputs[0].clone().into_image().expect("single-channel input")
    }

    fn backward(&self, v: &RealImage, want_params: bool) -> Result<(RealImage, Option<ParamGrad>)> {
        self.output.ensure_same_shape(v, "denoiser cotangent")?;
        let mut g = FeatureMap::from_image(v);
        if self.net.residual {
            g.scale(-1.0);
        }
        let depth = self.net.effective.len();
        let mut grads: Vec<Option<KernelGrad>> = vec![None; depth];
        for l in (0..depth).rev() {
            let kernel = &self.net.effective[l];
            if want_params {
                let mut kg = conv2d_vjp_kernel(&self.inputs[l], kernel, &g)?;
                let s = self.net.scales[l];
                if s != 1.0 {
                    kg.weights.iter_mut().for_each(|w| *w /= s);
                }
                grads[l] = Some(kg);
            }
            let mut gin = conv2d_transpose(kernel, &g)?;
            if l > 0 {
                // inputs[l] is relu(pre-activation); derivative is 0 wherever it is 0
                for (gi, &a) in gin.data_mut().iter_mut().zip(self.inputs[l].data()) {
                    if a <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = gin;
        }
        let mut dx = g.into_image()?;
        if self.net.residual {
            dx.axpy(1.0, v);
        }
        let pg = want_params.then(|| ParamGrad { layers: grads.into_iter().map(|g| g.expect("filled")).collect() });
        Ok((dx, pg))
    }

    /// `v^T dD/dx`.
    pub fn vjp_input(&self, v: &RealImage) -> Result<RealImage> {
        Ok(self.backward(v, false)?.0)
    }

    /// `v^T dD/dtheta`.
    pub fn vjp_params(&self, v: &RealImage) -> Result<ParamGrad> {
        Ok(self.backward(v, true)?.1.expect("requested"))
    }

    pub fn vjp_both(&self, v: &RealImage) -> Result<(RealImage, ParamGrad)> {
        let (dx, pg) = self.backward(v, true)?;
        Ok((dx, pg.expect("requested")))
    }
}
