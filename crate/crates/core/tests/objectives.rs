use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4se::autodiff::{check_gradients, Tape, Tensor, Var};
use s4se::dsp::{stft, StftConfig, SAMPLE_RATE};
use s4se::error::Error;
use s4se::metrics::{log_spectral_distance, si_sdr, write_jsonl, MetricRecord};
use s4se::objectives::*;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn cfg() -> StftConfig {
    StftConfig::analysis(64, 40, 10).unwrap()
}

/// Spectral convergence and log term computed directly from two spectra.
fn stft_loss_oracle(y: &[f64], yh: &[f64], c: &StftConfig) -> (f64, f64) {
    let a = stft(y, c, SAMPLE_RATE).unwrap();
    let b = stft(yh, c, SAMPLE_RATE).unwrap();
    let (f, t) = a.shape();
    let (mut num, mut den, mut lg) = (0.0, 0.0, 0.0);
    for fi in 0..f {
        for ti in 0..t {
            let (x, z) = (a.at(fi, ti).norm(), b.at(fi, ti).norm());
            num += (x - z) * (x - z);
            den += x * x;
            lg += (x.max(1e-7).ln() - z.max(1e-7).ln()).abs();
        }
    }
    ((num / den).sqrt(), lg / t as f64)
}

#[test]
fn stft_loss_examples() {
    let c = cfg();
    let y = noise(400, 1);
    assert_eq!(stft_loss(&y, &y, &c).unwrap(), 0.0);
    let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    let l = stft_loss(&y, &y2, &c).unwrap();
    let (sc, lg) = stft_loss_oracle(&y, &y2, &c);
    assert!((sc - 1.0).abs() < 1e-12);
    let frames = stft(&y, &c, SAMPLE_RATE).unwrap().n_frames;
    assert!((lg - c.n_freqs() as f64 * 2f64.ln()).abs() < 1e-9);
    assert!((l - (1.0 + c.n_freqs() as f64 * 2f64.ln())).abs() < 1e-9, "{l} {frames}");
    let z = vec![0.0; 400];
    let (sc, lg) = stft_loss_oracle(&y, &z, &c);
    assert!((sc - 1.0).abs() < 1e-15);
    assert!((stft_loss(&y, &z, &c).unwrap() - (1.0 + lg)).abs() < 1e-9);
    assert!(matches!(stft_loss(&z, &y, &c), Err(Error::ZeroReference)));
    assert!(stft_loss(&y, &y[..399], &c).is_err());
}

#[test]
fn time_domain_loss_examples() {
    let mr = MultiResStftConfig {
        resolutions: vec![cfg(), StftConfig::analysis(128, 100, 25).unwrap()],
    };
    let y = noise(600, 2);
    let n = noise(600, 3);
    assert_eq!(time_domain_loss(&y, &y, &mr).unwrap(), 0.0);
    let pert = |e: f64| y.iter().zip(&n).map(|(a, b)| a + e * b).collect::<Vec<_>>();
    let l1 = time_domain_loss(&y, &pert(0.01), &mr).unwrap();
    let l2 = time_domain_loss(&y, &pert(0.1), &mr).unwrap();
    assert!(0.0 < l1 && l1 < l2);
    let single = MultiResStftConfig { resolutions: vec![cfg()] };
    let yh = pert(0.1);
    let l1norm = y.iter().zip(&yh).map(|(a, b)| (a - b).abs()).sum::<f64>() / 600.0;
    let want = l1norm + stft_loss(&y, &yh, &cfg()).unwrap();
    assert!((time_domain_loss(&y, &yh, &single).unwrap() - want).abs() < 1e-12);
    assert!(time_domain_loss(&y, &yh, &MultiResStftConfig { resolutions: vec![] }).is_err());
    assert_eq!(MultiResStftConfig::default().resolutions.len(), 3);
}

#[test]
fn mag_loss_examples() {
    let s = noise(60, 4).iter().map(|v| v.abs()).collect::<Vec<_>>();
    assert_eq!(mag_loss(&s, &s).unwrap(), 0.0);
    assert!((mag_loss(&[0.0; 12], &[0.7; 12]).unwrap() - 0.7).abs() < 1e-15);
    let sh = noise(60, 5).iter().map(|v| v.abs()).collect::<Vec<_>>();
    let (f, t) = (6, 10);
    let mut acc = 0.0;
    for i in 0..f {
        for j in 0..t {
            acc += (s[i * t + j] - sh[i * t + j]).abs();
        }
    }
    assert!((mag_loss(&s, &sh).unwrap() - acc / 60.0).abs() < 1e-12);
    assert!(matches!(mag_loss(&s, &sh[..59]), Err(Error::ShapeMismatch(_))));
}

#[test]
fn complex_loss_examples() {
    let c = cfg();
    let spec = stft(&noise(300, 6), &c, SAMPLE_RATE).unwrap();
    let (f, t) = spec.shape();
    assert_eq!(complex_loss(&spec, &spec).unwrap(), 0.0);
    // one bin with a positive real coefficient, shifted along the real axis
    let mut a = spec.with_data(vec![Complex64::new(0.0, 0.0); f * t]);
    a.data[7] = Complex64::new(0.5, 0.0);
    let mut b = a.clone();
    let delta = 0.25;
    b.data[7].re += delta;
    let l = complex_loss(&a, &b).unwrap();
    assert!((l - 2.0 * delta / (f * t) as f64).abs() < 1e-15);
    // phase rotation keeps magnitudes
    let rot = spec.with_data(spec.data.iter().map(|z| z * Complex64::from_polar(1.0, 0.9)).collect());
    let l = complex_loss(&spec, &rot).unwrap();
    let m = mag_loss(&spec.magnitudes(), &rot.magnitudes()).unwrap();
    assert!(m < 1e-12 && l > 0.1);
    let short = stft(&noise(200, 6), &c, SAMPLE_RATE).unwrap();
    assert!(matches!(complex_loss(&spec, &short), Err(Error::ShapeMismatch(_))));
}

#[test]
fn si_sdr_examples() {
    let r = noise(500, 7);
    let three: Vec<f64> = r.iter().map(|v| 3.0 * v).collect();
    assert_eq!(si_sdr(&r, &three).unwrap(), 100.0);
    assert_eq!(si_sdr(&r, &r.iter().map(|v| -0.2 * v).collect::<Vec<_>>()).unwrap(), 100.0);
    // Gram-Schmidt an orthogonal component of equal norm
    let n0 = noise(500, 8);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let proj = r.iter().zip(&n0).map(|(a, b)| a * b).sum::<f64>() / rr;
    let mut n: Vec<f64> = n0.iter().zip(&r).map(|(b, a)| b - proj * a).collect();
    let nn: f64 = n.iter().map(|v| v * v).sum();
    n.iter_mut().for_each(|v| *v *= (rr / nn).sqrt());
    let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
    assert!(si_sdr(&r, &est).unwrap().abs() < 1e-9);
    assert_eq!(si_sdr(&r, &n).unwrap(), -100.0);
    assert!(matches!(si_sdr(&[0.0; 4], &[1.0; 4]), Err(Error::ZeroReference)));
}

#[test]
fn lsd_examples() {
    let c = cfg();
    let a = noise(400, 9);
    let b = noise(400, 10);
    assert_eq!(log_spectral_distance(&a, &a, &c).unwrap(), 0.0);
    let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
    assert!((log_spectral_distance(&a, &a2, &c).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-9);
    assert_eq!(log_spectral_distance(&a, &b, &c).unwrap(), log_spectral_distance(&b, &a, &c).unwrap());
}

#[test]
fn metric_records_are_json_lines() {
    let mut r = MetricRecord::new("u1");
    r.si_sdr_db = Some(3.5);
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &[r.clone(), MetricRecord::new("u2")]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let back: MetricRecord = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(back, r);
    let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    for k in ["id", "si_sdr_db", "lsd_db", "loss"] {
        assert!(v.get(k).is_some(), "{k}");
    }
}

fn check(f: impl Fn(&mut Tape, Var) -> s4se::error::Result<Var>, x: Vec<f64>, shape: Vec<usize>) {
    let t = Tensor::new(shape, x).unwrap();
    let rep = check_gradients(&["x".to_string()], &[t], |tape: &mut Tape, p: &[Var]| f(tape, p[0]), 50, 3).unwrap();
    assert!(rep.passed, "{rep:#?}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let c = StftConfig::analysis(32, 20, 5).unwrap();
    let c2 = c.clone();
    let y = noise(80, 11);
    let yh = noise(80, 12);
    let yc = y.clone();
    check(
        move |tape, x| {
            let r = tape.constant(Tensor::new(vec![80], yc.clone())?);
            stft_loss_on(tape, r, x, &c)
        },
        yh.clone(),
        vec![80],
    );
    let mr = MultiResStftConfig { resolutions: vec![c2, StftConfig::analysis(64, 32, 8).unwrap()] };
    check(
        move |tape, x| {
            let r = tape.constant(Tensor::new(vec![80], y.clone())?);
            time_domain_loss_on(tape, r, x, &mr)
        },
        yh,
        vec![80],
    );
    let s: Vec<f64> = noise(40, 13).iter().map(|v| v.abs()).collect();
    check(
        move |tape, x| {
            let r = tape.constant(Tensor::new(vec![4, 10], s.clone())?);
            mag_loss_on(tape, r, x)
        },
        noise(40, 14).iter().map(|v| v.abs()).collect(),
        vec![4, 10],
    );
    let s = noise(80, 15);
    check(
        move |tape, x| {
            let r = tape.constant(Tensor::new(vec![2, 4, 10], s.clone())?);
            complex_loss_on(tape, r, x)
        },
        noise(80, 16),
        vec![2, 4, 10],
    );
}
