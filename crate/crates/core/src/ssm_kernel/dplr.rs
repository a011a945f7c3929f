//! Diagonal-plus-low-rank SSMs, `A = diag(Λ) − P·P*`, and the frequency-sampled
//! kernel path.
//!
//! The kernel's truncated generating function is evaluated at the L-th roots of
//! unity, where the resolvent `(g·I − A)⁻¹` of a DPLR matrix is a diagonal
//! Cauchy sum plus a rank-1 Woodbury correction. An inverse FFT then recovers
//! the taps.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{discretize, eigenvalues, ContinuousSsm, DiscreteSsm, SsmKernel};
use crate::error::{Error, Result};
use crate::fft;

/// Discrete eigenvalues closer than this to the unit circle are rejected by the
/// frequency-sampled path.
pub const UNIT_CIRCLE_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DplrSsm {
    pub lambda: Vec<Complex64>,
    pub p: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub c: Vec<Complex64>,
    pub delta: f64,
}

impl DplrSsm {
    pub fn new(lambda: Vec<Complex64>, p: Vec<Complex64>, b: Vec<Complex64>, c: Vec<Complex64>, delta: f64) -> Result<Self> {
        let n = lambda.len();
        if n == 0 || p.len() != n || b.len() != n || c.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "Λ {n}, P {}, B {}, C {}",
                p.len(),
                b.len(),
                c.len()
            )));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidDelta(delta));
        }
        Ok(Self { lambda, p, b, c, delta })
    }

    pub fn state_size(&self) -> usize {
        self.lambda.len()
    }

    /// Dense `A = diag(Λ) − P·P*`.
    pub fn dense_a(&self) -> DMatrix<Complex64> {
        dense_a(&self.lambda, &self.p)
    }

    /// Dense continuous SSM with `D = 0`.
    pub fn to_continuous(&self) -> ContinuousSsm {
        ContinuousSsm {
            a: self.dense_a(),
            b: DVector::from_column_slice(&self.b),
            c: DVector::from_column_slice(&self.c),
            d: Complex64::new(0.0, 0.0),
        }
    }

    pub fn discretize(&self) -> Result<DiscreteSsm> {
        discretize(&self.to_continuous(), self.delta)
    }

    /// Largest real part among the eigenvalues of the dense `A`.
    pub fn max_real_eigenvalue(&self) -> f64 {
        eigenvalues(&self.dense_a()).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn dense_a(lambda: &[Complex64], p: &[Complex64]) -> DMatrix<Complex64> {
    let n = lambda.len();
    DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { lambda[i] } else { Complex64::new(0.0, 0.0) };
        diag - p[i] * p[j].conj()
    })
}

/// Pulls a cotangent on the dense `A` back to `(g_Λ, g_P)`.
pub fn dense_a_vjp(p: &[Complex64], g_a: &DMatrix<Complex64>) -> (Vec<Complex64>, Vec<Complex64>) {
    let n = p.len();
    let g_lambda = (0..n).map(|i| g_a[(i, i)]).collect();
    // g_P = −(g_A + g_A^H)·P
    let g_p = (0..n)
        .map(|i| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, pj) in p.iter().enumerate() {
                acc += (g_a[(i, j)] + g_a[(j, i)].conj()) * pj;
            }
            -acc
        })
        .collect();
    (g_lambda, g_p)
}

/// Upper bound on the spectral radius of `Ā` that needs no eigendecomposition.
///
/// `−PP*` is negative semidefinite, so every eigenvalue `a` of `A` has
/// `Re a ≤ max Re λ` and `|a| ≤ max |λ| + ‖P‖²`. With `h = Δ/2` and
/// `μ = (1 + ha)/(1 − ha)` this gives `1 − |μ|² ≥ 4hσ/(1 + hR)²`.
/// `None` when some `Re λ ≥ 0`.
fn radius_bound(dplr: &DplrSsm) -> Option<f64> {
    let sigma = -dplr.lambda.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if !(sigma > 0.0) {
        return None;
    }
    let r = dplr.lambda.iter().map(|z| z.norm()).fold(0.0, f64::max) + dplr.p.iter().map(|z| z.norm_sqr()).sum::<f64>();
    let h = dplr.delta / 2.0;
    let gap = 4.0 * h * sigma / (1.0 + h * r).powi(2);
    Some((1.0 - gap).max(0.0).sqrt())
}

/// Right multiplication of a row vector by the bilinear `Ā = (I − hA)⁻¹(I + hA)`.
///
/// `Ā = 2(I − hA)⁻¹ − I`, and Sherman–Morrison on `diag(1 − hΛ) + hPP*` makes
/// that diagonal plus rank one: `Ā = diag(e) − a·bᵀ`.
struct RowStepper {
    e: Vec<Complex64>,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
}

impl RowStepper {
    fn new(dplr: &DplrSsm) -> Self {
        let h = dplr.delta / 2.0;
        let one = Complex64::new(1.0, 0.0);
        let inv_d: Vec<Complex64> = dplr.lambda.iter().map(|lam| one / (one - lam * h)).collect();
        let den = one + dplr.p.iter().zip(&inv_d).map(|(p, id)| p.norm_sqr() * id).sum::<Complex64>() * h;
        let scale = 2.0 * h / den;
        Self {
            e: inv_d.iter().map(|id| id * 2.0 - one).collect(),
            a: dplr.p.iter().zip(&inv_d).map(|(p, id)| p * id).collect(),
            b: dplr.p.iter().zip(&inv_d).map(|(p, id)| p.conj() * id * scale).collect(),
        }
    }

    fn apply(&self, v: &mut [Complex64]) {
        let s: Complex64 = v.iter().zip(&self.a).map(|(vi, ai)| vi * ai).sum();
        for ((vj, ej), bj) in v.iter_mut().zip(&self.e).zip(&self.b) {
            *vj = *vj * ej - s * bj;
        }
    }
}

/// Frequency-sampled kernel of a DPLR SSM (forward only).
///
/// Equal to [`super::materialize_kernel`] on the dense expansion to round-off;
/// lengths that are not powers of two are computed at the next power and
/// truncated.
pub fn materialize_kernel_dplr(dplr: &DplrSsm, len: usize) -> Result<SsmKernel> {
    if len == 0 {
        return Err(Error::DimensionMismatch("kernel length must be >= 1".into()));
    }
    if radius_bound(dplr).is_none_or(|r| r >= 1.0 - UNIT_CIRCLE_MARGIN) {
        for mu in dplr.discretize()?.eigenvalues() {
            if mu.norm() >= 1.0 - UNIT_CIRCLE_MARGIN {
                return Err(Error::NumericalInstability(format!(
                    "discrete eigenvalue {mu} has modulus {:.9} (limit {})",
                    mu.norm(),
                    1.0 - UNIT_CIRCLE_MARGIN
                )));
            }
        }
    }
    let l = len.next_power_of_two();

    // C̃ = C(I − Ā^L), stepping the row vector C·Ā^k in O(N) per step.
    let mut v = dplr.c.clone();
    let stepper = RowStepper::new(dplr);
    for _ in 0..l {
        stepper.apply(&mut v);
    }
    let c_tilde: Vec<Complex64> = dplr.c.iter().zip(&v).map(|(c, cv)| c - cv).collect();

    let two_over_dt = 2.0 / dplr.delta;
    let one = Complex64::new(1.0, 0.0);
    let zs: Vec<Complex64> = (0..l).map(|j| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * j as f64 / l as f64)).collect();
    let (g_re, g_im): (Vec<f64>, Vec<f64>) = zs
        .iter()
        .map(|z| {
            let g = (one - z) / (one + z) * two_over_dt;
            (g.re, g.im)
        })
        .unzip();
    // Four Cauchy sums Σ_i w_i/(g − λ_i), split into re/im planes so the
    // frequency loop vectorizes.
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; l]; 8];
    for (((ct, b), p), lam) in c_tilde.iter().zip(&dplr.b).zip(&dplr.p).zip(&dplr.lambda) {
        let w = [ct * b, ct * p, p.conj() * b, p.conj() * p];
        let (lr, li) = (lam.re, lam.im);
        let (inv_re, inv_im): (Vec<f64>, Vec<f64>) = g_re
            .iter()
            .zip(&g_im)
            .map(|(gr, gi)| {
                let (dr, di) = (gr - lr, gi - li);
                let s = 1.0 / (dr * dr + di * di);
                (dr * s, -di * s)
            })
            .unzip();
        for (m, wm) in w.iter().enumerate() {
            let (re_plane, rest) = acc[2 * m..2 * m + 2].split_at_mut(1);
            for (((kr, ki), rr), ri) in re_plane[0].iter_mut().zip(rest[0].iter_mut()).zip(&inv_re).zip(&inv_im) {
                *kr += wm.re * rr - wm.im * ri;
                *ki += wm.re * ri + wm.im * rr;
            }
        }
    }
    let k = |m: usize, j: usize| Complex64::new(acc[2 * m][j], acc[2 * m + 1][j]);
    let mut spectrum: Vec<Complex64> = zs
        .iter()
        .enumerate()
        .map(|(j, z)| (k(0, j) - k(1, j) * k(2, j) / (one + k(3, j))) * (Complex64::new(2.0, 0.0) / (one + z)))
        .collect();
    // spectrum[j] = Σ_k K_k ω^{jk} with ω = e^{−2πi/L}: a forward DFT, so invert it.
    fft::ifft(&mut spectrum);
    spectrum.truncate(len);
    SsmKernel::new(spectrum)
}
