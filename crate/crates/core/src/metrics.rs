//! Image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::RealImage;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(x: &RealImage, reference: &RealImage, peak: f64) -> Result<f64> {
    x.ensure_same_shape(reference, "psnr")?;
    if !(peak > 0.0) {
        return Err(invalid("psnr peak must be positive"));
    }
    let mse = x.data().iter().zip(reference.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn filter_valid(data: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|j| win[j] * data[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| win[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over the valid (unpadded) region.
pub fn ssim(x: &RealImage, reference: &RealImage) -> Result<f64> {
    x.ensure_same_shape(reference, "ssim")?;
    let (h, w) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let win = gaussian_window();
    let a = x.data();
    let b = reference.data();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(p, q)| p * q).collect();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let e_aa = filter_valid(&aa, h, w, &win);
    let e_bb = filter_valid(&bb, h, w, &win);
    let e_ab = filter_valid(&ab, h, w, &win);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

pub fn evaluate(x: &RealImage, reference: &RealImage) -> Result<MetricReport> {
    Ok(MetricReport { psnr_db: psnr(x, reference, 1.0)?, ssim: ssim(x, reference)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(n: usize, seed: u64) -> RealImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealImage::from_fn(n, n, |_, _| rng.random_range(0.0..1.0))
    }

    /// Straight double loop over every 11x11 window with explicit Gaussian weights.
    #[allow(clippy::needless_range_loop)]
    fn naive_ssim(x: &RealImage, y: &RealImage) -> f64 {
        let (h, w) = x.shape();
        let mut weights = [[0.0; 11]; 11];
        let mut total_w = 0.0;
        for (i, row) in weights.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total_w += *v;
            }
        }
        let c1 = 0.0001;
        let c2 = 0.0009;
        let mut sum = 0.0;
        let mut count = 0;
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = weights[i][j] / total_w;
                        mx += g * x.get(r + i, c + j);
                        my += g * y.get(r + i, c + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = weights[i][j] / total_w;
                        let dx = x.get(r + i, c + j) - mx;
                        let dy = y.get(r + i, c + j) - my;
                        vx += g * dx * dx;
                        vy += g * dy * dy;
                        cxy += g * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn psnr_reference_values() {
        let x = random_image(16, 1);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let off = x.map(|v| v + 0.1);
        assert!((psnr(&off, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let off = x.map(|v| v + 0.5);
        assert!((psnr(&off, &x, 1.0).unwrap() - 6.020599913279624).abs() < 1e-9);
        assert!(psnr(&x, &RealImage::zeros(16, 8), 1.0).is_err());
        assert!(psnr(&x, &x, 0.0).is_err());
    }

    #[test]
    fn psnr_symmetric_and_decreasing_in_noise() {
        let x = random_image(32, 2);
        let mut last = f64::INFINITY;
        for (k, sigma) in [0.01, 0.02, 0.05, 0.1, 0.2].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let noise: Vec<f64> = (0..1024).map(|_| normal.sample(&mut rng)).collect();
            let noisy = RealImage::from_vec(32, 32, x.data().iter().zip(&noise).map(|(a, n)| a + sigma * n).collect()).unwrap();
            let p = psnr(&noisy, &x, 1.0).unwrap();
            assert_eq!(p, psnr(&x, &noisy, 1.0).unwrap());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_oracle() {
        let x = random_image(32, 3);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let y = random_image(32, 4).map(|v| 0.3 * v).add(&x.scaled(0.7));
        let fast = ssim(&x, &y).unwrap();
        assert!((fast - naive_ssim(&x, &y)).abs() < 1e-10);
        assert!((fast - ssim(&y, &x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn ssim_of_inverted_image_is_low() {
        let x = RealImage::from_fn(32, 32, |r, c| if (r / 4 + c / 4) % 2 == 0 { 1.0 } else { 0.0 });
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &inv).unwrap() < 0.1);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = RealImage::zeros(10, 32);
        assert!(ssim(&x, &x).is_err());
    }
}
