//! Unitary 2-D discrete Fourier transform.
//!
//! Both directions are scaled by `1/sqrt(H*W)`, so `idft2` is simultaneously
//! the inverse and the adjoint of `dft2`.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{invalid, Result};
use crate::image::ComplexImage;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn dft2(x: &ComplexImage) -> Result<ComplexImage> {
    transform(x, FftDirection::Forward)
}

pub fn idft2(y: &ComplexImage) -> Result<ComplexImage> {
    transform(y, FftDirection::Inverse)
}

fn transform(x: &ComplexImage, direction: FftDirection) -> Result<ComplexImage> {
    let (h, w) = x.shape();
    if h == 0 || w == 0 {
        return Err(invalid("dft2 of an empty image"));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let row_fft = planner.plan_fft(w, direction);
        let col_fft = planner.plan_fft(h, direction);

        // rows are contiguous
        row_fft.process(data);

        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = data[r * w + c];
            }
            col_fft.process(&mut column);
            for r in 0..h {
                data[r * w + c] = column[r];
            }
        }
    });
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for z in data.iter_mut() {
        *z *= scale;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_complex(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ComplexImage::from_vec(h, w, data).unwrap()
    }

    /// O(n^4) direct sum, unitary scaling.
    fn direct_dft(x: &ComplexImage, sign: f64) -> ComplexImage {
        let (h, w) = x.shape();
        let mut out = Vec::with_capacity(h * w);
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let phase = sign
                            * 2.0
                            * std::f64::consts::PI
                            * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        acc += x.get(r, c) * Complex64::new(phase.cos(), phase.sin());
                    }
                }
                out.push(acc / ((h * w) as f64).sqrt());
            }
        }
        ComplexImage::from_vec(h, w, out).unwrap()
    }

    fn max_abs_diff(a: &ComplexImage, b: &ComplexImage) -> f64 {
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_image_concentrates_at_dc() {
        let c = 0.7;
        let x = ComplexImage::from_vec(4, 4, vec![Complex64::new(c, 0.0); 16]).unwrap();
        let y = dft2(&x).unwrap();
        assert!((y.get(0, 0) - Complex64::new(4.0 * c, 0.0)).norm() < 1e-14);
        for (i, z) in y.data().iter().enumerate().skip(1) {
            assert!(z.norm() < 1e-14, "entry {i} = {z}");
        }
    }

    #[test]
    fn matches_direct_dft() {
        for (n, seed) in [(4, 1), (8, 2), (16, 3)] {
            let x = random_complex(n, n, seed);
            let fast = dft2(&x).unwrap();
            assert!(max_abs_diff(&fast, &direct_dft(&x, -1.0)) <= 1e-12);
            let inv = idft2(&x).unwrap();
            assert!(max_abs_diff(&inv, &direct_dft(&x, 1.0)) <= 1e-12);
        }
    }

    #[test]
    fn non_power_of_two_sizes() {
        let x = random_complex(6, 10, 9);
        assert!(max_abs_diff(&dft2(&x).unwrap(), &direct_dft(&x, -1.0)) <= 1e-12);
    }

    #[test]
    fn inverse_and_adjoint() {
        let a = random_complex(8, 8, 4);
        let b = random_complex(8, 8, 5);
        let back = idft2(&dft2(&a).unwrap()).unwrap();
        assert!(max_abs_diff(&a, &back) <= 1e-12);

        // <F a, b> = <a, F^H b> as complex inner products
        let fa = dft2(&a).unwrap();
        let fhb = idft2(&b).unwrap();
        let lhs: Complex64 = fa.data().iter().zip(b.data()).map(|(p, q)| p * q.conj()).sum();
        let rhs: Complex64 = a.data().iter().zip(fhb.data()).map(|(p, q)| p * q.conj()).sum();
        assert!((lhs - rhs).norm() <= 1e-12 * lhs.norm().max(1.0));
    }

    #[test]
    fn parseval() {
        for seed in 0..100 {
            let x = random_complex(16, 16, 100 + seed);
            let y = dft2(&x).unwrap();
            assert!((y.norm() - x.norm()).abs() <= 1e-13 * x.norm());
        }
    }

    #[test]
    fn dc_delta_inverts_to_constant() {
        let mut y = ComplexImage::zeros(4, 8);
        y.data_mut()[0] = Complex64::new(2.0, 0.0);
        let x = idft2(&y).unwrap();
        let expected = 2.0 / 32f64.sqrt();
        for z in x.data() {
            assert!((z - Complex64::new(expected, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(ComplexImage::from_vec(0, 4, vec![]).is_err());
        assert!(dft2(&ComplexImage::zeros(0, 4)).is_err());
        assert!(idft2(&ComplexImage::zeros(3, 0)).is_err());
    }
}
