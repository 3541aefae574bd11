//! Synthetic image distributions: piecewise-smooth ellipse phantoms (the
//! MRI-like domain) and smoothed random-field textures with step edges (the
//! natural-image-like domain).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::image::RealImage;

const MIN_SIZE: usize = 32;

/// Ellipse phantom: 4-8 random ellipses composited by overwrite, one 3x3 box
/// blur, clamped to `[0, 1]`.
pub fn gen_phantom(n: usize, seed: u64) -> Result<RealImage> {
    if n < MIN_SIZE {
        return Err(invalid(format!("phantom size must be >= {MIN_SIZE}, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(4..=8);
    let nf = n as f64;
    let mut img = RealImage::zeros(n, n);
    for k in 0..count {
        // the first ellipse is a large "body" outline
        let (cy, cx, ay, ax) = if k == 0 {
            (
                nf * rng.random_range(0.45..0.55),
                nf * rng.random_range(0.45..0.55),
                nf * rng.random_range(0.32..0.45),
                nf * rng.random_range(0.28..0.42),
            )
        } else {
            (
                nf * rng.random_range(0.25..0.75),
                nf * rng.random_range(0.25..0.75),
                nf * rng.random_range(0.05..0.25),
                nf * rng.random_range(0.05..0.25),
            )
        };
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let value: f64 = rng.random_range(0.0..1.0);
        let (sin, cos) = angle.sin_cos();
        for r in 0..n {
            for c in 0..n {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                    img.set(r, c, value);
                }
            }
        }
    }
    let blurred = box_blur3(&img);
    Ok(blurred.map(|v| v.clamp(0.0, 1.0)))
}

/// Average over the in-bounds part of each 3x3 neighbourhood.
fn box_blur3(img: &RealImage) -> RealImage {
    let (h, w) = img.shape();
    RealImage::from_fn(h, w, |r, c| {
        let mut sum = 0.0;
        let mut count = 0.0;
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                sum += img.get(rr, cc);
                count += 1.0;
            }
        }
        sum / count
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with periodic boundaries.
fn gaussian_blur_periodic(img: &RealImage, sigma: f64) -> RealImage {
    let (h, w) = img.shape();
    let k = gaussian_kernel(sigma);
    let half = (k.len() / 2) as isize;
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let rows = RealImage::from_fn(h, w, |r, c| {
        k.iter().enumerate().map(|(j, kv)| kv * img.get(r, wrap(c as isize + j as isize - half, w))).sum()
    });
    RealImage::from_fn(h, w, |r, c| {
        k.iter().enumerate().map(|(j, kv)| kv * rows.get(wrap(r as isize + j as isize - half, h), c)).sum()
    })
}

/// Gaussian random field (white noise blurred with a random sigma in
/// `[1, 3]`) plus 1-3 straight step edges, rescaled to exactly `[0, 1]`.
pub fn gen_texture(n: usize, seed: u64) -> Result<RealImage> {
    if n < MIN_SIZE {
        return Err(invalid(format!("texture size must be >= {MIN_SIZE}, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma: f64 = rng.random_range(1.0..3.0);
    let noise = RealImage::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let mut field = gaussian_blur_periodic(&noise, sigma);
    let std = (field.data().iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();

    let edges = rng.random_range(1..=3);
    for _ in 0..edges {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = angle.sin_cos();
        let py = n as f64 * rng.random_range(0.2..0.8);
        let px = n as f64 * rng.random_range(0.2..0.8);
        let step = std * rng.random_range(1.0..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for r in 0..n {
            for c in 0..n {
                if (c as f64 - px) * cos + (r as f64 - py) * sin > 0.0 {
                    let v = field.get(r, c);
                    field.set(r, c, v + step);
                }
            }
        }
    }
    let (lo, hi) = field.min_max();
    Ok(field.map(|v| (v - lo) / (hi - lo)))
}

/// Mean magnitude of forward differences.
pub fn mean_gradient_magnitude(img: &RealImage) -> f64 {
    let (h, w) = img.shape();
    let mut total = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let gx = img.get(r, c + 1) - img.get(r, c);
            let gy = img.get(r + 1, c) - img.get(r, c);
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / ((h - 1) * (w - 1)) as f64
}
