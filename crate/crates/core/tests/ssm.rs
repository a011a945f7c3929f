use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s4se::fft::{causal_conv, direct_causal_conv};
use s4se::ssm_kernel::init::hippo_dplr;
use s4se::ssm_kernel::{apply_conv, materialize_kernel, materialize_kernel_dplr, run_recurrence};

fn max_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let scale = b.iter().map(|z| z.norm()).fold(1e-12, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
}

fn complex_vec(max_len: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64).prop_map(|(r, i)| Complex64::new(r, i)), 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fft_convolution_matches_direct(k in complex_vec(40), u in complex_vec(90)) {
        let fast = causal_conv(&k, &u);
        let slow = direct_causal_conv(&k, &u);
        prop_assert_eq!(fast.len(), u.len());
        prop_assert!(max_err(&fast, &slow) < 1e-10);
    }

    #[test]
    fn convolution_view_matches_recurrence(seed in any::<u64>(), n in 1usize..12, u in complex_vec(70)) {
        let ssm = hippo_dplr(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let d = ssm.discretize().unwrap();
        let k = materialize_kernel(&d, u.len()).unwrap();
        let conv = apply_conv(&k, &u, Complex64::new(0.0, 0.0)).unwrap();
        prop_assert!(max_err(&conv, &run_recurrence(&d, &u)) < 1e-9);
    }

    #[test]
    fn frequency_sampled_kernel_matches_dense(seed in any::<u64>(), n in 1usize..20, len in 1usize..300) {
        let ssm = hippo_dplr(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let fast = materialize_kernel_dplr(&ssm, len).unwrap();
        let dense = materialize_kernel(&ssm.discretize().unwrap(), len).unwrap();
        prop_assert_eq!(fast.len(), len);
        prop_assert!(max_err(&fast.taps, &dense.taps) < 1e-8);
    }
}
