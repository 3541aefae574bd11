//! "Same"-padded 2-D cross-correlation and its two vector-Jacobian products.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::FeatureMap;

/// Convolution filter bank: weights laid out as `[out][in][kh][kw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient with respect to a [`ConvKernel`]'s weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights: vec![0.0; out_channels * in_channels * kh * kw],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let kernel = Self { out_channels, in_channels, kh, kw, weights, bias };
        kernel.validate()?;
        Ok(kernel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.in_channels == 0 {
            return Err(invalid("kernel channel counts must be positive"));
        }
        if self.kh.is_multiple_of(2) || self.kw.is_multiple_of(2) {
            return Err(invalid(format!("kernel size must be odd, got {}x{}", self.kh, self.kw)));
        }
        if self.weights.len() != self.out_channels * self.in_channels * self.kh * self.kw {
            return Err(invalid("kernel weight length does not match its shape"));
        }
        if self.bias.len() != self.out_channels {
            return Err(invalid("kernel bias length does not match out_channels"));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    /// Weights of the `(out, in)` filter.
    pub fn filter(&self, o: usize, i: usize) -> &[f64] {
        let t = self.taps();
        let start = (o * self.in_channels + i) * t;
        &self.weights[start..start + t]
    }

    pub fn zero_grad(&self) -> KernelGrad {
        KernelGrad { weights: vec![0.0; self.weights.len()], bias: vec![0.0; self.bias.len()] }
    }
}

impl KernelGrad {
    pub fn dot(&self, other: &KernelGrad) -> f64 {
        crate::image::dot(&self.weights, &other.weights) + crate::image::dot(&self.bias, &other.bias)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= alpha);
    }

    pub fn axpy(&mut self, alpha: f64, other: &KernelGrad) {
        crate::image::axpy(&mut self.weights, alpha, &other.weights);
        crate::image::axpy(&mut self.bias, alpha, &other.bias);
    }
}

/// Row/column ranges over which `out[y][x]` reads `in[y+dy][x+dx]` in bounds.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// `dst[y][x] += w * src[y+dy][x+dx]` over the valid region.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], w: f64, h: usize, wd: usize, dy: isize, dx: isize) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(wd, dx);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * wd + x0..y * wd + x1];
        let s0 = (x0 as isize + dx) as usize;
        let s = &src[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
        for (a, b) in d.iter_mut().zip(s) {
            *a += w * b;
        }
    }
}

/// `sum dst[y][x] * src[y+dy][x+dx]` over the valid region.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], h: usize, wd: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(wd, dx);
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let s0 = (x0 as isize + dx) as usize;
        let ra = &a[y * wd + x0..y * wd + x1];
        let rb = &b[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
        acc += ra.iter().zip(rb).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

/// Forward cross-correlation with zero "same" padding plus per-channel bias.
pub fn conv2d(input: &FeatureMap, kernel: &ConvKernel) -> Result<FeatureMap> {
    correlate(input, kernel, true)
}

/// [`conv2d`] without the bias term.
pub fn conv2d_linear(input: &FeatureMap, kernel: &ConvKernel) -> Result<FeatureMap> {
    correlate(input, kernel, false)
}

fn correlate(input: &FeatureMap, kernel: &ConvKernel, with_bias: bool) -> Result<FeatureMap> {
    if kernel.in_channels != input.channels() {
        return Err(invalid(format!(
            "conv2d: kernel expects {} input channels, got {}",
            kernel.in_channels,
            input.channels()
        )));
    }
    let (h, w) = (input.height(), input.width());
    let (ph, pw) = ((kernel.kh / 2) as isize, (kernel.kw / 2) as isize);
    let mut out = FeatureMap::zeros(kernel.out_channels, h, w);
    for o in 0..kernel.out_channels {
        let plane = out.plane_mut(o);
        if with_bias {
            plane.fill(kernel.bias[o]);
        }
        for i in 0..kernel.in_channels {
            let src = input.plane(i);
            for (t, &wt) in kernel.filter(o, i).iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let dy = (t / kernel.kw) as isize - ph;
                let dx = (t % kernel.kw) as isize - pw;
                shifted_axpy(plane, src, wt, h, w, dy, dx);
            }
        }
    }
    Ok(out)
}

fn check_cotangent(input: &FeatureMap, out_channels: usize, cotangent: &FeatureMap) -> Result<()> {
    if cotangent.channels() != out_channels
        || cotangent.height() != input.height()
        || cotangent.width() != input.width()
    {
        return Err(invalid(format!(
            "cotangent shape {}x{}x{} does not match conv output {}x{}x{}",
            cotangent.channels(),
            cotangent.height(),
            cotangent.width(),
            out_channels,
            input.height(),
            input.width()
        )));
    }
    Ok(())
}

/// `v^T d conv2d / d input`: correlation with the flipped, channel-transposed kernel.
pub fn conv2d_vjp_input(input: &FeatureMap, kernel: &ConvKernel, cotangent: &FeatureMap) -> Result<FeatureMap> {
    if kernel.in_channels != input.channels() {
        return Err(invalid("conv2d_vjp_input: kernel/input channel mismatch"));
    }
    check_cotangent(input, kernel.out_channels, cotangent)?;
    conv2d_transpose(kernel, cotangent)
}

/// Adjoint of the linear (bias-free) part of [`conv2d`]; shape comes from the cotangent.
pub fn conv2d_transpose(kernel: &ConvKernel, cotangent: &FeatureMap) -> Result<FeatureMap> {
    if cotangent.channels() != kernel.out_channels {
        return Err(invalid("conv2d_transpose: cotangent/kernel channel mismatch"));
    }
    let (h, w) = (cotangent.height(), cotangent.width());
    let (ph, pw) = ((kernel.kh / 2) as isize, (kernel.kw / 2) as isize);
    let mut grad = FeatureMap::zeros(kernel.in_channels, h, w);
    for i in 0..kernel.in_channels {
        let plane = grad.plane_mut(i);
        for o in 0..kernel.out_channels {
            let cot = cotangent.plane(o);
            for (t, &wt) in kernel.filter(o, i).iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let dy = (t / kernel.kw) as isize - ph;
                let dx = (t % kernel.kw) as isize - pw;
                // grad[y+dy][x+dx] += w * cot[y][x]  <=>  grad[y][x] += w * cot[y-dy][x-dx]
                shifted_axpy(plane, cot, wt, h, w, -dy, -dx);
            }
        }
    }
    Ok(grad)
}

/// `v^T d conv2d / d (weights, bias)`.
pub fn conv2d_vjp_kernel(input: &FeatureMap, kernel: &ConvKernel, cotangent: &FeatureMap) -> Result<KernelGrad> {
    if kernel.in_channels != input.channels() {
        return Err(invalid("conv2d_vjp_kernel: kernel/input channel mismatch"));
    }
    check_cotangent(input, kernel.out_channels, cotangent)?;
    let (h, w) = (input.height(), input.width());
    let (ph, pw) = ((kernel.kh / 2) as isize, (kernel.kw / 2) as isize);
    let mut grad = kernel.zero_grad();
    let taps = kernel.taps();
    for o in 0..kernel.out_channels {
        let cot = cotangent.plane(o);
        grad.bias[o] = cot.iter().sum();
        for i in 0..kernel.in_channels {
            let src = input.plane(i);
            let base = (o * kernel.in_channels + i) * taps;
            for t in 0..taps {
                let dy = (t / kernel.kw) as isize - ph;
                let dx = (t % kernel.kw) as isize - pw;
                grad.weights[base + t] = shifted_dot(cot, src, h, w, dy, dx);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::from_vec(c, h, w, data).unwrap()
    }

    fn random_kernel(o: usize, i: usize, rng: &mut ChaCha8Rng) -> ConvKernel {
        let weights = (0..o * i * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvKernel::new(o, i, 3, 3, weights, bias).unwrap()
    }

    fn identity_kernel() -> ConvKernel {
        let mut k = ConvKernel::zeros(1, 1, 3, 3);
        k.weights[4] = 1.0;
        k
    }

    /// Six nested loops, zero padding, no flip.
    fn naive_conv(x: &FeatureMap, k: &ConvKernel) -> FeatureMap {
        let (h, w) = (x.height(), x.width());
        let mut out = FeatureMap::zeros(k.out_channels, h, w);
        for o in 0..k.out_channels {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = k.bias[o];
                    for i in 0..k.in_channels {
                        for ky in 0..k.kh {
                            for kx in 0..k.kw {
                                let rr = r as isize + ky as isize - (k.kh / 2) as isize;
                                let cc = c as isize + kx as isize - (k.kw / 2) as isize;
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                acc += k.weights[((o * k.in_channels + i) * k.kh + ky) * k.kw + kx]
                                    * x.plane(i)[rr as usize * w + cc as usize];
                            }
                        }
                    }
                    out.plane_mut(o)[r * w + c] = acc;
                }
            }
        }
        out
    }

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(1, 7, 9, &mut rng);
        let y = conv2d(&x, &identity_kernel()).unwrap();
        assert_eq!(y, x);
        let v = random_map(1, 7, 9, &mut rng);
        assert_eq!(conv2d_vjp_input(&x, &identity_kernel(), &v).unwrap(), v);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_map(2, 8, 8, &mut rng);
        let k = random_kernel(2, 2, &mut rng);
        let fast = conv2d(&x, &k).unwrap();
        assert!(max_abs(fast.data(), naive_conv(&x, &k).data()) <= 1e-13);

        let x = random_map(3, 5, 11, &mut rng);
        let k = random_kernel(4, 3, &mut rng);
        assert!(max_abs(conv2d(&x, &k).unwrap().data(), naive_conv(&x, &k).data()) <= 1e-13);
    }

    #[test]
    fn bias_only_kernel_gives_constant_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_map(2, 6, 6, &mut rng);
        let mut k = ConvKernel::zeros(3, 2, 3, 3);
        k.bias = vec![0.5, -1.0, 2.0];
        let y = conv2d(&x, &k).unwrap();
        for o in 0..3 {
            assert!(y.plane(o).iter().all(|&v| v == k.bias[o]));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = FeatureMap::zeros(2, 4, 4);
        let k = ConvKernel::zeros(1, 3, 3, 3);
        assert!(conv2d(&x, &k).is_err());
        let k = ConvKernel::zeros(1, 2, 3, 3);
        assert!(conv2d_vjp_input(&x, &k, &FeatureMap::zeros(2, 4, 4)).is_err());
        assert!(conv2d_vjp_kernel(&x, &k, &FeatureMap::zeros(1, 4, 5)).is_err());
    }

    #[test]
    fn input_vjp_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x = random_map(3, 8, 8, &mut rng);
            let mut k = random_kernel(2, 3, &mut rng);
            k.bias.fill(0.0);
            let v = random_map(2, 8, 8, &mut rng);
            let lhs = conv2d(&x, &k).unwrap().dot(&v);
            let rhs = x.dot(&conv2d_vjp_input(&x, &k, &v).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn kernel_vjp_adjoint_identity() {
        // <conv(x, K) - bias, v> is linear in K: equals <K, vjp_kernel>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_map(3, 8, 8, &mut rng);
        let k = random_kernel(2, 3, &mut rng);
        let v = random_map(2, 8, 8, &mut rng);
        let g = conv2d_vjp_kernel(&x, &k, &v).unwrap();
        let lhs = conv2d(&x, &k).unwrap().dot(&v);
        let rhs = crate::image::dot(&k.weights, &g.weights) + crate::image::dot(&k.bias, &g.bias);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_map(2, 6, 6, &mut rng);
        let k = random_kernel(2, 2, &mut rng);
        let v = random_map(2, 6, 6, &mut rng);
        let g = conv2d_vjp_input(&x, &k, &v).unwrap();
        let f = |x: &FeatureMap| conv2d(x, &k).unwrap().dot(&v);
        let step = 1e-6;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += step;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= step;
            let fd = (f(&xp) - f(&xm)) / (2.0 * step);
            assert!((fd - g.data()[idx]).abs() <= 1e-6 * g.data()[idx].abs().max(1.0));
        }
    }

    #[test]
    fn kernel_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_map(2, 6, 6, &mut rng);
        let k = random_kernel(3, 2, &mut rng);
        let v = random_map(3, 6, 6, &mut rng);
        let g = conv2d_vjp_kernel(&x, &k, &v).unwrap();
        let f = |k: &ConvKernel| conv2d(&x, k).unwrap().dot(&v);
        let step = 1e-6;
        for idx in 0..k.weights.len() {
            let mut kp = k.clone();
            kp.weights[idx] += step;
            let mut km = k.clone();
            km.weights[idx] -= step;
            let fd = (f(&kp) - f(&km)) / (2.0 * step);
            assert!((fd - g.weights[idx]).abs() <= 1e-6 * g.weights[idx].abs().max(1.0));
        }
    }

    #[test]
    fn kernel_vjp_simple_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_map(2, 5, 7, &mut rng);
        let k = ConvKernel::zeros(3, 2, 3, 3);
        let g = conv2d_vjp_kernel(&x, &k, &FeatureMap::zeros(3, 5, 7)).unwrap();
        assert!(g.weights.iter().chain(&g.bias).all(|&v| v == 0.0));

        let c = 0.25;
        let v = FeatureMap::from_vec(3, 5, 7, vec![c; 3 * 35]).unwrap();
        let g = conv2d_vjp_kernel(&x, &k, &v).unwrap();
        for b in g.bias {
            assert!((b - c * 35.0).abs() < 1e-14);
        }
    }
}
