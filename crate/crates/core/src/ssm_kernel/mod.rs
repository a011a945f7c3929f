//! 1-D state-space model core.
//!
//! A continuous SSM `x' = Ax + Bu, v = Cx + Du` is discretized with the bilinear
//! (Tustin) transform and can then be run either as a linear recurrence
//! ([`step`]) or as a causal convolution with its impulse response
//! ([`materialize_kernel`] + [`apply_conv`]). The two paths agree to round-off
//! whenever the discrete transition matrix is stable.
//!
//! The dense kernel path is differentiable: [`materialize_kernel_vjp`] and
//! [`discretize_vjp`] propagate cotangents back to the discrete and continuous
//! parameters. The diagonal-plus-low-rank path in [`dplr`] is forward only.

pub mod dplr;
pub mod dump;
pub mod init;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;

pub use dplr::{materialize_kernel_dplr, DplrSsm};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Pivot magnitude below which `I - Δ/2·A` is treated as singular.
const SINGULAR_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    pub a: DMatrix<Complex64>,
    pub b: DVector<Complex64>,
    /// Output projection stored as a column; `v = c^T x`.
    pub c: DVector<Complex64>,
    pub d: Complex64,
}

impl ContinuousSsm {
    pub fn new(
        a: DMatrix<Complex64>,
        b: DVector<Complex64>,
        c: DVector<Complex64>,
        d: Complex64,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || b.len() != n || c.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}, B has {}, C has {}",
                a.nrows(),
                a.ncols(),
                b.len(),
                c.len()
            )));
        }
        let finite = a.iter().chain(b.iter()).chain(c.iter()).all(|z| z.is_finite()) && d.is_finite();
        if !finite {
            return Err(Error::NumericalInstability("non-finite SSM parameter".into()));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn state_size(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: DMatrix<Complex64>,
    pub b_bar: DVector<Complex64>,
    pub c: DVector<Complex64>,
    pub d: Complex64,
    pub delta: f64,
}

impl DiscreteSsm {
    pub fn state_size(&self) -> usize {
        self.a_bar.nrows()
    }

    /// Eigenvalues of the discrete transition matrix.
    pub fn eigenvalues(&self) -> Vec<Complex64> {
        eigenvalues(&self.a_bar)
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

pub(crate) fn eigenvalues(m: &DMatrix<Complex64>) -> Vec<Complex64> {
    if m.nrows() == 1 {
        return vec![m[(0, 0)]];
    }
    let (_, t) = nalgebra::Schur::new(m.clone()).unpack();
    t.diagonal().iter().copied().collect()
}

/// Materialized convolution kernel `K_k = C Ā^k B̄`, `k = 0..L`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel {
    pub taps: Vec<Complex64>,
}

impl SsmKernel {
    pub fn new(taps: Vec<Complex64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::DimensionMismatch("kernel length must be >= 1".into()));
        }
        if taps.iter().any(|z| !z.is_finite()) {
            return Err(Error::NumericalInstability("non-finite kernel tap".into()));
        }
        Ok(Self { taps })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

fn solve_factor(a: &DMatrix<Complex64>, delta: f64) -> Result<nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>> {
    let n = a.nrows();
    let half = Complex64::new(delta / 2.0, 0.0);
    let m = DMatrix::<Complex64>::identity(n, n) - a * half;
    let lu = m.lu();
    let u = lu.u();
    if u.diagonal().iter().any(|p| p.norm() < SINGULAR_TOL) {
        return Err(Error::SingularMatrix);
    }
    Ok(lu)
}

/// Bilinear discretization: `Ā = (I − Δ/2·A)⁻¹(I + Δ/2·A)`, `B̄ = (I − Δ/2·A)⁻¹ΔB`.
pub fn discretize(ssm: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidDelta(delta));
    }
    let n = ssm.state_size();
    let lu = solve_factor(&ssm.a, delta)?;
    let half = Complex64::new(delta / 2.0, 0.0);
    let q = DMatrix::<Complex64>::identity(n, n) + &ssm.a * half;
    let a_bar = lu.solve(&q).ok_or(Error::SingularMatrix)?;
    let b_bar = lu.solve(&(&ssm.b * Complex64::new(delta, 0.0))).ok_or(Error::SingularMatrix)?;
    Ok(DiscreteSsm { a_bar, b_bar, c: ssm.c.clone(), d: ssm.d, delta })
}

/// One recurrence step: `x' = Ā x + B̄ u`, `v = C x' + D u`.
pub fn step(dssm: &DiscreteSsm, state: &[Complex64], u: Complex64) -> Result<(Vec<Complex64>, Complex64)> {
    let n = dssm.state_size();
    if state.len() != n {
        return Err(Error::DimensionMismatch(format!("state has {} entries, SSM has {n}", state.len())));
    }
    let mut next = vec![ZERO; n];
    matvec(&dssm.a_bar, state, &mut next);
    for (x, b) in next.iter_mut().zip(dssm.b_bar.iter()) {
        *x += b * u;
    }
    let v = dot(dssm.c.as_slice(), &next) + dssm.d * u;
    Ok((next, v))
}

/// Runs the recurrence over a whole sequence from a zero initial state.
pub fn run_recurrence(dssm: &DiscreteSsm, u: &[Complex64]) -> Vec<Complex64> {
    let mut state = vec![ZERO; dssm.state_size()];
    u.iter()
        .map(|&uk| {
            let (next, v) = step(dssm, &state, uk).expect("state sized from the SSM");
            state = next;
            v
        })
        .collect()
}

#[inline]
fn matvec(a: &DMatrix<Complex64>, x: &[Complex64], out: &mut [Complex64]) {
    let n = a.nrows();
    let data = a.as_slice();
    out.iter_mut().for_each(|o| *o = ZERO);
    // column-major storage
    for (j, xj) in x.iter().enumerate() {
        let col = &data[j * n..(j + 1) * n];
        for (o, aij) in out.iter_mut().zip(col) {
            *o += aij * xj;
        }
    }
}

#[inline]
fn matvec_adjoint(a: &DMatrix<Complex64>, x: &[Complex64], out: &mut [Complex64]) {
    let n = a.nrows();
    let data = a.as_slice();
    for (j, o) in out.iter_mut().enumerate() {
        let col = &data[j * n..(j + 1) * n];
        *o = col.iter().zip(x).map(|(aij, xi)| aij.conj() * xi).sum();
    }
}

#[inline]
fn dot(c: &[Complex64], x: &[Complex64]) -> Complex64 {
    c.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// States `x_k = Ā^k B̄` for `k = 0..len`, row-major `len × N`.
pub(crate) fn propagate_states(a_bar: &DMatrix<Complex64>, b_bar: &[Complex64], len: usize) -> Vec<Complex64> {
    let n = b_bar.len();
    let mut states = vec![ZERO; len * n];
    if len == 0 {
        return states;
    }
    states[..n].copy_from_slice(b_bar);
    for k in 1..len {
        let (prev, rest) = states.split_at_mut(k * n);
        matvec(a_bar, &prev[(k - 1) * n..], &mut rest[..n]);
    }
    states
}

pub(crate) fn project_states(states: &[Complex64], c: &[Complex64]) -> Vec<Complex64> {
    let n = c.len();
    states.chunks_exact(n).map(|x| dot(c, x)).collect()
}

/// `taps[k] = C·Ā^k·B̄` by iterated state propagation.
pub fn materialize_kernel(dssm: &DiscreteSsm, len: usize) -> Result<SsmKernel> {
    if len == 0 {
        return Err(Error::DimensionMismatch("kernel length must be >= 1".into()));
    }
    let states = propagate_states(&dssm.a_bar, dssm.b_bar.as_slice(), len);
    SsmKernel::new(project_states(&states, dssm.c.as_slice()))
}

/// Cotangents of a discrete SSM.
///
/// All complex gradients use the convention `g = ∂L/∂Re z + i·∂L/∂Im z` for a
/// real scalar loss `L`.
#[derive(Clone, Debug)]
pub struct DiscreteSsmGrad {
    pub a_bar: DMatrix<Complex64>,
    pub b_bar: DVector<Complex64>,
    pub c: DVector<Complex64>,
}

/// Shared backward pass for several output projections over one state sequence.
///
/// `cs[r]` produced kernel `r`, whose cotangent is `grads[r]`. Returns
/// `(g_Ā, g_B̄, g_c[r])`.
pub(crate) fn multi_kernel_vjp(
    a_bar: &DMatrix<Complex64>,
    states: &[Complex64],
    cs: &[&[Complex64]],
    grads: &[&[Complex64]],
) -> (DMatrix<Complex64>, Vec<Complex64>, Vec<Vec<Complex64>>) {
    let n = a_bar.nrows();
    let len = states.len() / n;
    let mut g_c: Vec<Vec<Complex64>> = cs.iter().map(|_| vec![ZERO; n]).collect();
    for (gc, g) in g_c.iter_mut().zip(grads) {
        for (x, gk) in states.chunks_exact(n).zip(g.iter()) {
            for (gcn, xn) in gc.iter_mut().zip(x) {
                *gcn += gk * xn.conj();
            }
        }
    }
    let mut g_a = DMatrix::<Complex64>::zeros(n, n);
    let mut lam = vec![ZERO; n];
    let mut carry = vec![ZERO; n];
    for k in (0..len).rev() {
        // lam = conj(C)·g_k + Ā^H lam_{k+1}
        for (l, c) in lam.iter_mut().zip(carry.iter()) {
            *l = *c;
        }
        for (c, g) in cs.iter().zip(grads) {
            let gk = g[k];
            for (l, cn) in lam.iter_mut().zip(c.iter()) {
                *l += cn.conj() * gk;
            }
        }
        if k > 0 {
            let prev = &states[(k - 1) * n..k * n];
            let data = g_a.as_mut_slice();
            for (j, pj) in prev.iter().enumerate() {
                let pjc = pj.conj();
                let col = &mut data[j * n..(j + 1) * n];
                for (gij, li) in col.iter_mut().zip(&lam) {
                    *gij += li * pjc;
                }
            }
            matvec_adjoint(a_bar, &lam, &mut carry);
        }
    }
    (g_a, lam, g_c)
}

/// Reverse-mode derivative of [`materialize_kernel`].
pub fn materialize_kernel_vjp(dssm: &DiscreteSsm, cotangent: &[Complex64]) -> DiscreteSsmGrad {
    let len = cotangent.len();
    let states = propagate_states(&dssm.a_bar, dssm.b_bar.as_slice(), len);
    let (g_a, g_b, mut g_c) = multi_kernel_vjp(&dssm.a_bar, &states, &[dssm.c.as_slice()], &[cotangent]);
    DiscreteSsmGrad {
        a_bar: g_a,
        b_bar: DVector::from_vec(g_b),
        c: DVector::from_vec(g_c.pop().expect("one projection")),
    }
}

#[derive(Clone, Debug)]
pub struct ContinuousSsmGrad {
    pub a: DMatrix<Complex64>,
    pub b: DVector<Complex64>,
    pub delta: f64,
}

/// Reverse-mode derivative of [`discretize`] with respect to `A`, `B` and `Δ`.
pub fn discretize_vjp(
    a: &DMatrix<Complex64>,
    b: &DVector<Complex64>,
    delta: f64,
    a_bar: &DMatrix<Complex64>,
    b_bar: &DVector<Complex64>,
    g_a_bar: &DMatrix<Complex64>,
    g_b_bar: &DVector<Complex64>,
) -> Result<ContinuousSsmGrad> {
    let n = a.nrows();
    let half = Complex64::new(delta / 2.0, 0.0);
    let m = DMatrix::<Complex64>::identity(n, n) - a * half;
    let lu_h = m.adjoint().lu();
    let z1 = lu_h.solve(g_a_bar).ok_or(Error::SingularMatrix)?;
    let z2 = lu_h.solve(g_b_bar).ok_or(Error::SingularMatrix)?;
    // g_M = -(Z1 Ā^H + Z2 B̄^H)
    let g_m = -(&z1 * a_bar.adjoint() + &z2 * b_bar.adjoint());
    let g_q = z1;
    let g_db = z2;
    let g_a = (&g_q - &g_m) * half;
    let inner = |g: &DMatrix<Complex64>, x: &DMatrix<Complex64>| -> f64 {
        g.iter().zip(x.iter()).map(|(gi, xi)| (gi.conj() * xi).re).sum()
    };
    let g_delta = 0.5 * inner(&g_q, a) - 0.5 * inner(&g_m, a)
        + g_db.iter().zip(b.iter()).map(|(gi, bi)| (gi.conj() * bi).re).sum::<f64>();
    let g_b = g_db * Complex64::new(delta, 0.0);
    Ok(ContinuousSsmGrad { a: g_a, b: g_b, delta: g_delta })
}

/// Causal convolution of `u` with the kernel (truncated or zero-padded to
/// `u.len()`) plus the feedthrough `d_term·u`, via FFT.
pub fn apply_conv(kernel: &SsmKernel, u: &[Complex64], d_term: Complex64) -> Result<Vec<Complex64>> {
    if u.is_empty() {
        return Err(Error::DimensionMismatch("empty input sequence".into()));
    }
    let mut v = fft::causal_conv(&kernel.taps, u);
    if d_term != ZERO {
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi += d_term * ui;
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn scalar(a: f64, b: f64, cc: f64) -> ContinuousSsm {
        ContinuousSsm::new(
            DMatrix::from_element(1, 1, c(a)),
            DVector::from_element(1, c(b)),
            DVector::from_element(1, c(cc)),
            c(0.0),
        )
        .unwrap()
    }

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex64 {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> ContinuousSsm {
        let mut a = DMatrix::from_fn(n, n, |_, _| rand_c(rng) * 0.3);
        for i in 0..n {
            a[(i, i)] -= c(1.0 + i as f64 * 0.2);
        }
        let b = DVector::from_fn(n, |_, _| rand_c(rng));
        let cc = DVector::from_fn(n, |_, _| rand_c(rng));
        ContinuousSsm::new(a, b, cc, rand_c(rng)).unwrap()
    }

    #[test]
    fn zero_matrix_discretizes_to_identity() {
        let d = discretize(&scalar(0.0, 1.0, 1.0), 0.5).unwrap();
        assert_eq!(d.a_bar[(0, 0)], c(1.0));
        assert_eq!(d.b_bar[0], c(0.5));
    }

    #[test]
    fn scalar_bilinear_hand_value() {
        // (1 - Δa/2)^-1 (1 + Δa/2) with a = -1, Δ = 2 -> 0 / 2 = 0; B̄ = Δ/(1 - Δa/2) = 1.
        let d = discretize(&scalar(-1.0, 1.0, 1.0), 2.0).unwrap();
        assert!(d.a_bar[(0, 0)].norm() < 1e-15);
        assert!((d.b_bar[0] - c(1.0)).norm() < 1e-15);
    }

    #[test]
    fn bilinear_approximates_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ssm = random_stable(&mut rng, 2);
        let delta = 0.01;
        let d = discretize(&ssm, delta).unwrap();
        // truncated Taylor series for exp(ΔA)
        let x = &ssm.a * c(delta);
        let mut term = DMatrix::<Complex64>::identity(2, 2);
        let mut expm = term.clone();
        for k in 1..30 {
            term = &term * &x * c(1.0 / k as f64);
            expm += &term;
        }
        let err = (&d.a_bar - expm).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn invalid_delta_and_singular() {
        assert!(matches!(discretize(&scalar(-1.0, 1.0, 1.0), 0.0), Err(Error::InvalidDelta(_))));
        assert!(matches!(discretize(&scalar(-1.0, 1.0, 1.0), -1.0), Err(Error::InvalidDelta(_))));
        // I - Δ/2·a = 0 for a = 2/Δ
        assert!(matches!(discretize(&scalar(2.0, 1.0, 1.0), 1.0), Err(Error::SingularMatrix)));
    }

    #[test]
    fn tiny_delta_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ssm = random_stable(&mut rng, 4);
        let d = discretize(&ssm, 1e-8).unwrap();
        let err = (&d.a_bar - DMatrix::<Complex64>::identity(4, 4)).norm();
        assert!(err <= 1e-6);
    }

    #[test]
    fn step_examples() {
        let d = DiscreteSsm {
            a_bar: DMatrix::from_element(1, 1, c(0.0)),
            b_bar: DVector::from_element(1, c(1.0)),
            c: DVector::from_element(1, c(1.0)),
            d: c(0.0),
            delta: 1.0,
        };
        let (s, v) = step(&d, &[c(0.0)], c(3.0)).unwrap();
        assert_eq!(s, vec![c(3.0)]);
        assert_eq!(v, c(3.0));
        let (s, v) = step(&d, &[c(0.0)], c(0.0)).unwrap();
        assert_eq!(s, vec![c(0.0)]);
        assert_eq!(v, c(0.0));
        assert!(matches!(step(&d, &[c(0.0), c(0.0)], c(1.0)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn scalar_kernel_closed_forms() {
        let mk = |a: f64, b: f64, cc: f64| DiscreteSsm {
            a_bar: DMatrix::from_element(1, 1, c(a)),
            b_bar: DVector::from_element(1, c(b)),
            c: DVector::from_element(1, c(cc)),
            d: c(0.0),
            delta: 1.0,
        };
        let k = materialize_kernel(&mk(0.0, 1.0, 1.0), 4).unwrap();
        assert_eq!(k.taps, vec![c(1.0), c(0.0), c(0.0), c(0.0)]);
        let k = materialize_kernel(&mk(0.5, 1.0, 2.0), 3).unwrap();
        assert_eq!(k.taps, vec![c(2.0), c(1.0), c(0.5)]);
        let k = materialize_kernel(&mk(0.3, 1.5, 2.0), 1).unwrap();
        assert_eq!(k.taps, vec![c(3.0)]);
        assert!(materialize_kernel(&mk(0.3, 1.5, 2.0), 0).is_err());
    }

    #[test]
    fn conv_impulse_and_zero() {
        let k = SsmKernel::new(vec![c(1.0), Complex64::new(0.5, -0.2), c(0.25)]).unwrap();
        let mut imp = vec![c(0.0); 3];
        imp[0] = c(1.0);
        let v = apply_conv(&k, &imp, c(0.0)).unwrap();
        for (a, b) in v.iter().zip(&k.taps) {
            assert!((a - b).norm() < 1e-12);
        }
        let v = apply_conv(&k, &[c(0.0); 5], c(0.0)).unwrap();
        assert!(v.iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn conv_matches_nested_loops_non_power_of_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let len = 33;
        let taps: Vec<Complex64> = (0..len).map(|_| rand_c(&mut rng)).collect();
        let u: Vec<Complex64> = (0..len).map(|_| rand_c(&mut rng)).collect();
        let k = SsmKernel::new(taps.clone()).unwrap();
        let d = rand_c(&mut rng);
        let v = apply_conv(&k, &u, d).unwrap();
        let mut scale = 0.0f64;
        for t in 0..len {
            let mut acc = d * u[t];
            for j in 0..=t {
                acc += taps[j] * u[t - j];
            }
            scale = scale.max(acc.norm());
            assert!((acc - v[t]).norm() <= 1e-6 * scale.max(1.0));
        }
    }

    #[test]
    fn recurrence_matches_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ssm = random_stable(&mut rng, 6);
        let d = discretize(&ssm, 0.1).unwrap();
        let u: Vec<Complex64> = (0..32).map(|_| rand_c(&mut rng)).collect();
        let rec = run_recurrence(&d, &u);
        let k = materialize_kernel(&d, 32).unwrap();
        let conv = apply_conv(&k, &u, d.d).unwrap();
        let scale = rec.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, b) in rec.iter().zip(&conv) {
            assert!((a - b).norm() <= 1e-6 * scale);
        }
    }

    /// Loss used for gradient checks: L = Σ Re(w_k · K_k).
    fn weighted_loss(d: &DiscreteSsm, w: &[Complex64]) -> f64 {
        let k = materialize_kernel(d, w.len()).unwrap();
        k.taps.iter().zip(w).map(|(a, b)| (a * b).re).sum()
    }

    #[test]
    fn kernel_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 5;
        let len = 24;
        let ssm = random_stable(&mut rng, n);
        let d = discretize(&ssm, 0.3).unwrap();
        let w: Vec<Complex64> = (0..len).map(|_| rand_c(&mut rng)).collect();
        // d/dK of Σ Re(w K) in the (∂re + i∂im) convention is conj(w).
        let cot: Vec<Complex64> = w.iter().map(|z| z.conj()).collect();
        let g = materialize_kernel_vjp(&d, &cot);
        let h = 1e-5;
        let check = |analytic: Complex64, perturb: &dyn Fn(Complex64) -> DiscreteSsm| {
            for (dir, part) in [(c(1.0), analytic.re), (Complex64::new(0.0, 1.0), analytic.im)] {
                let fd = (weighted_loss(&perturb(dir * h), &w) - weighted_loss(&perturb(-dir * h), &w)) / (2.0 * h);
                let rel = (fd - part).abs() / fd.abs().max(part.abs()).max(1e-8);
                assert!(rel < 1e-4, "fd {fd} analytic {part}");
            }
        };
        for i in 0..n {
            for j in 0..n {
                check(g.a_bar[(i, j)], &|e| {
                    let mut p = d.clone();
                    p.a_bar[(i, j)] += e;
                    p
                });
            }
            check(g.b_bar[i], &|e| {
                let mut p = d.clone();
                p.b_bar[i] += e;
                p
            });
            check(g.c[i], &|e| {
                let mut p = d.clone();
                p.c[i] += e;
                p
            });
        }
    }

    #[test]
    fn discretize_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 4;
        let len = 16;
        let ssm = random_stable(&mut rng, n);
        let delta = 0.2;
        let w: Vec<Complex64> = (0..len).map(|_| rand_c(&mut rng)).collect();
        let loss = |s: &ContinuousSsm, dt: f64| weighted_loss(&discretize(s, dt).unwrap(), &w);
        let d = discretize(&ssm, delta).unwrap();
        let cot: Vec<Complex64> = w.iter().map(|z| z.conj()).collect();
        let gk = materialize_kernel_vjp(&d, &cot);
        let g = discretize_vjp(&ssm.a, &ssm.b, delta, &d.a_bar, &d.b_bar, &gk.a_bar, &gk.b_bar).unwrap();
        let h = 1e-5;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        for i in 0..n {
            for j in 0..n {
                for (dir, an) in [(c(h), g.a[(i, j)].re), (Complex64::new(0.0, h), g.a[(i, j)].im)] {
                    let mut p = ssm.clone();
                    p.a[(i, j)] += dir;
                    let mut m = ssm.clone();
                    m.a[(i, j)] -= dir;
                    let fd = (loss(&p, delta) - loss(&m, delta)) / (2.0 * h);
                    assert!(rel(fd, an) < 1e-4, "A[{i},{j}] fd {fd} an {an}");
                }
            }
            for (dir, an) in [(c(h), g.b[i].re), (Complex64::new(0.0, h), g.b[i].im)] {
                let mut p = ssm.clone();
                p.b[i] += dir;
                let mut m = ssm.clone();
                m.b[i] -= dir;
                let fd = (loss(&p, delta) - loss(&m, delta)) / (2.0 * h);
                assert!(rel(fd, an) < 1e-4, "B[{i}] fd {fd} an {an}");
            }
        }
        let fd = (loss(&ssm, delta + h) - loss(&ssm, delta - h)) / (2.0 * h);
        assert!(rel(fd, g.delta) < 1e-4, "delta fd {fd} an {}", g.delta);
    }
}
