//! Thin helpers over `rustfft` with a per-thread plan cache.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

pub fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// In-place forward DFT (no scaling).
pub fn fft(buf: &mut [Complex64]) {
    forward_plan(buf.len()).process(buf);
}

/// In-place inverse DFT scaled by `1/n`.
pub fn ifft(buf: &mut [Complex64]) {
    let n = buf.len();
    inverse_plan(n).process(buf);
    let s = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= s;
    }
}

/// FFT size for a linear convolution of lengths `a` and `b` without wrap-around.
pub fn conv_size(a: usize, b: usize) -> usize {
    (a + b).saturating_sub(1).max(1).next_power_of_two()
}

/// Causal linear convolution `y[t] = sum_j k[j] u[t-j]`, truncated to `u.len()`.
pub fn causal_conv(kernel: &[Complex64], u: &[Complex64]) -> Vec<Complex64> {
    let len = u.len();
    let klen = kernel.len().min(len);
    if len == 0 || klen == 0 {
        return vec![Complex64::new(0.0, 0.0); len];
    }
    let n = conv_size(klen, len);
    let mut kb = vec![Complex64::new(0.0, 0.0); n];
    kb[..klen].copy_from_slice(&kernel[..klen]);
    let mut ub = vec![Complex64::new(0.0, 0.0); n];
    ub[..len].copy_from_slice(u);
    fft(&mut kb);
    fft(&mut ub);
    for (a, b) in ub.iter_mut().zip(&kb) {
        *a *= b;
    }
    ifft(&mut ub);
    ub.truncate(len);
    ub
}

/// O(L·K) causal convolution, used by the benchmark and as a reference path.
pub fn direct_causal_conv(kernel: &[Complex64], u: &[Complex64]) -> Vec<Complex64> {
    let len = u.len();
    let mut y = vec![Complex64::new(0.0, 0.0); len];
    for (t, yt) in y.iter_mut().enumerate() {
        let kmax = kernel.len().min(t + 1);
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, k) in kernel[..kmax].iter().enumerate() {
            acc += k * u[t - j];
        }
        *yt = acc;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_roundtrip() {
        let x: Vec<Complex64> = (0..12).map(|i| Complex64::new(i as f64, -(i as f64) * 0.5)).collect();
        let mut y = x.clone();
        fft(&mut y);
        ifft(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn fft_and_direct_agree() {
        let k: Vec<Complex64> = (0..5).map(|i| Complex64::new(1.0 / (i + 1) as f64, 0.1 * i as f64)).collect();
        let u: Vec<Complex64> = (0..9).map(|i| Complex64::new((i as f64).sin(), (i as f64).cos())).collect();
        let a = causal_conv(&k, &u);
        let b = direct_causal_conv(&k, &u);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-12);
        }
    }
}
