//! Default initialization for DPLR SSMs.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DplrSsm;

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

/// Diagonal of the HiPPO-LegS approximation: `Λ_k = −1/2 + iπk`.
pub fn hippo_lambda(n: usize) -> Vec<Complex64> {
    (0..n).map(|k| Complex64::new(-0.5, std::f64::consts::PI * k as f64)).collect()
}

/// HiPPO-LegS low-rank term `P_k = sqrt(k + 1/2)`.
pub fn hippo_p(n: usize) -> Vec<Complex64> {
    (0..n).map(|k| Complex64::new((k as f64 + 0.5).sqrt(), 0.0)).collect()
}

/// Log-uniform time step in `[DT_MIN, DT_MAX]`.
pub fn sample_log_dt<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(DT_MIN.ln()..DT_MAX.ln())
}

/// Unit-variance circular complex normal samples.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Complex64> {
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid std");
    (0..n).map(|_| Complex64::new(normal.sample(rng), normal.sample(rng))).collect()
}

/// HiPPO-initialized DPLR SSM with `B = 1`, `C ~ CN(0, 1)` and log-uniform Δ.
pub fn hippo_dplr<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DplrSsm {
    let delta = sample_log_dt(rng).exp();
    DplrSsm {
        lambda: hippo_lambda(n),
        p: hippo_p(n),
        b: vec![Complex64::new(1.0, 0.0); n],
        c: complex_normal(rng, n),
        delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hippo_init_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1, 2, 4, 8, 16, 32] {
            let d = hippo_dplr(n, &mut rng);
            assert!(d.max_real_eigenvalue() <= 0.0, "n={n}");
            assert!(d.delta >= DT_MIN && d.delta <= DT_MAX);
            assert!(d.discretize().unwrap().spectral_radius() < 1.0);
        }
    }
}
