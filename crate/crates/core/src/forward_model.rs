//! Radially undersampled Fourier measurement operator `A = M F`.
//!
//! k-space is kept on the full grid with zeros off the mask, so `A` and its
//! adjoint are shape-preserving.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;

use crate::error::{invalid, Result};
use crate::fft::{dft2, idft2};
use crate::image::{ComplexImage, RealImage};

/// Binary k-space mask in unshifted DFT coordinates (DC at `(0, 0)`).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
    ratio: f64,
    /// Set when the requested ratio could not be reached and the full mask was used instead.
    pub saturated_fallback: bool,
    /// Number of radial lines used to build the mask (0 when not radial).
    pub num_lines: usize,
}

impl SamplingMask {
    pub fn from_keep(height: usize, width: usize, mut keep: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || keep.len() != height * width {
            return Err(invalid("mask dimensions do not match keep array"));
        }
        keep[0] = true;
        let ratio = keep.iter().filter(|&&k| k).count() as f64 / (height * width) as f64;
        Ok(Self { height, width, keep, ratio, saturated_fallback: false, num_lines: 0 })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            keep: vec![true; height * width],
            ratio: 1.0,
            saturated_fallback: false,
            num_lines: 0,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// 0/1 image, for storage in image containers.
    pub fn to_image(&self) -> RealImage {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        RealImage::from_vec(self.height, self.width, data).expect("mask shape is valid")
    }

    pub fn from_image(image: &RealImage) -> Result<Self> {
        let keep = image.data().iter().map(|&v| v > 0.5).collect();
        Self::from_keep(image.height(), image.width(), keep)
    }
}

/// Rasterizes `num_lines` lines through the centered k-space origin at angles
/// `pi * (i + offset) / num_lines`, then moves the origin to `(0, 0)`.
pub fn radial_mask_with_offset(n: usize, num_lines: usize, offset: f64) -> Result<SamplingMask> {
    if n < 8 {
        return Err(invalid(format!("radial mask needs n >= 8, got {n}")));
    }
    if num_lines == 0 || num_lines > 2 * n {
        return Err(invalid(format!("num_lines must be in 1..={}, got {num_lines}", 2 * n)));
    }
    let center = (n / 2) as f64;
    let max_radius = (n as f64 / std::f64::consts::SQRT_2).ceil() as i64;
    let mut keep = vec![false; n * n];
    for i in 0..num_lines {
        let theta = std::f64::consts::PI * (i as f64 + offset) / num_lines as f64;
        let (sin, cos) = theta.sin_cos();
        for r in -max_radius..=max_radius {
            let row = (center + r as f64 * sin).round();
            let col = (center + r as f64 * cos).round();
            if row < 0.0 || col < 0.0 || row >= n as f64 || col >= n as f64 {
                continue;
            }
            // centered -> unshifted coordinates
            let (row, col) = (row as usize, col as usize);
            let ur = (row + n - n / 2) % n;
            let uc = (col + n - n / 2) % n;
            keep[ur * n + uc] = true;
        }
    }
    let mut mask = SamplingMask::from_keep(n, n, keep)?;
    mask.num_lines = num_lines;
    Ok(mask)
}

/// Radial mask whose angular offset is drawn uniformly from `[0, 1)` using `seed`.
pub fn radial_mask(n: usize, num_lines: usize, seed: u64) -> Result<SamplingMask> {
    let offset: f64 = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..1.0);
    radial_mask_with_offset(n, num_lines, offset)
}

/// Smallest radial mask (by line count, found by bisection) whose sampling
/// ratio reaches `target_ratio`.
pub fn mask_for_ratio(n: usize, target_ratio: f64, seed: u64) -> Result<SamplingMask> {
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(invalid(format!("target ratio must be in (0, 1], got {target_ratio}")));
    }
    let max_lines = 2 * n;
    let densest = radial_mask(n, max_lines, seed)?;
    if densest.ratio() < target_ratio {
        if target_ratio < 1.0 {
            warn!(
                "ratio {target_ratio} unreachable with {max_lines} radial lines (max {:.4}); using full mask",
                densest.ratio()
            );
        }
        let mut full = SamplingMask::full(n, n);
        full.saturated_fallback = densest.ratio() < target_ratio && target_ratio < 1.0;
        return Ok(full);
    }
    let (mut lo, mut hi) = (1usize, max_lines);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if radial_mask(n, mid, seed)?.ratio() >= target_ratio {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    radial_mask(n, lo, seed)
}

/// Measurement operator: mask plus k-space noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOp {
    pub mask: SamplingMask,
    pub noise_sigma: f64,
}

impl MeasurementOp {
    pub fn new(mask: SamplingMask) -> Self {
        Self { mask, noise_sigma: 0.0 }
    }

    pub fn with_noise(mask: SamplingMask, noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma must be nonnegative"));
        }
        Ok(Self { mask, noise_sigma })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    fn check(&self, shape: (usize, usize), what: &str) -> Result<()> {
        if shape != self.shape() {
            return Err(invalid(format!(
                "{what}: shape {shape:?} does not match operator {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    fn apply_mask(&self, y: &mut ComplexImage) {
        for (z, &k) in y.data_mut().iter_mut().zip(self.mask.keep()) {
            if !k {
                *z = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// `M F x`.
    pub fn apply(&self, x: &RealImage) -> Result<ComplexImage> {
        self.check(x.shape(), "apply_A")?;
        let mut y = dft2(&x.to_complex())?;
        self.apply_mask(&mut y);
        Ok(y)
    }

    /// `Re(F^H M y)`.
    pub fn adjoint(&self, y: &ComplexImage) -> Result<RealImage> {
        self.check(y.shape(), "apply_A_adj")?;
        let mut masked = y.clone();
        self.apply_mask(&mut masked);
        Ok(idft2(&masked)?.real_part())
    }

    /// Gradient of `g(x) = 0.5 ||y - A x||^2`.
    pub fn grad_datafit(&self, x: &RealImage, y: &ComplexImage) -> Result<RealImage> {
        self.check(y.shape(), "grad_datafit")?;
        let residual = self.apply(x)?.sub(y);
        self.adjoint(&residual)
    }

    pub fn datafit(&self, x: &RealImage, y: &ComplexImage) -> Result<f64> {
        self.check(y.shape(), "datafit")?;
        Ok(0.5 * self.apply(x)?.sub(y).norm_sqr())
    }

    /// `A x` plus i.i.d. complex Gaussian noise (per component std `noise_sigma`) on kept entries.
    pub fn simulate(&self, x: &RealImage, seed: u64) -> Result<ComplexImage> {
        let mut y = self.apply(x)?;
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, self.noise_sigma).map_err(|e| invalid(e.to_string()))?;
            for (z, &k) in y.data_mut().iter_mut().zip(self.mask.keep()) {
                if k {
                    z.re += normal.sample(&mut rng);
                    z.im += normal.sample(&mut rng);
                }
            }
        }
        Ok(y)
    }
}

pub fn apply_a(x: &RealImage, op: &MeasurementOp) -> Result<ComplexImage> {
    op.apply(x)
}

pub fn apply_a_adj(y: &ComplexImage, op: &MeasurementOp) -> Result<RealImage> {
    op.adjoint(y)
}

pub fn grad_datafit(x: &RealImage, y: &ComplexImage, op: &MeasurementOp) -> Result<RealImage> {
    op.grad_datafit(x, y)
}

pub fn simulate_measurement(x: &RealImage, op: &MeasurementOp, seed: u64) -> Result<ComplexImage> {
    op.simulate(x, seed)
}
