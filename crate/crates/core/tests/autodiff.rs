use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4se::autodiff::{check_gradients, S4ConvInputs, SsmKernelInputs, Tape, Tensor, Var};
use s4se::dsp::StftConfig;
use s4se::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).unwrap()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

fn assert_passes(params: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, tol: f64) {
    let rep = check_gradients(&names(params.len()), params, f, 50, 3).unwrap();
    assert!(rep.max_rel_err <= tol, "{rep:#?}");
    assert!(rep.disconnected().is_empty(), "{rep:#?}");
}

#[test]
fn quadratic_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = rand_tensor(&mut rng, &[7], 1.0);
    let mut tape = Tape::new();
    let v = tape.param(0, w.clone());
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    for (gi, wi) in g.get(0).unwrap().iter().zip(w.data()) {
        assert_eq!(*gi, 2.0 * wi);
    }
}

#[test]
fn l1_subgradient_uses_zero_sign_at_zero() {
    let w = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 0.5]).unwrap();
    let c = Tensor::new(vec![4], vec![0.0, 0.0, 0.5, 1.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(0, w);
    let cv = tape.constant(c);
    let d = tape.sub(cv, v).unwrap();
    let a = tape.abs(d);
    let loss = tape.mean(a);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(0).unwrap(), &[0.25, -0.25, 0.0, -0.25]);
}

#[test]
fn linear_layer_counts_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![rand_tensor(&mut rng, &[3, 5, 4], 1.0), rand_tensor(&mut rng, &[6, 3], 1.0), rand_tensor(&mut rng, &[6], 1.0)];
    assert_passes(
        &params,
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let y = t.square(y);
            Ok(t.mean(y))
        },
        1e-6,
    );
}

#[test]
fn layer_norm_gelu_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![rand_tensor(&mut rng, &[5, 3, 4], 2.0), rand_tensor(&mut rng, &[5], 1.0), rand_tensor(&mut rng, &[5], 1.0)];
    let target = rand_tensor(&mut rng, &[5, 3, 4], 1.0);
    assert_passes(
        &params,
        move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let y = t.gelu(y);
            let c = t.constant(target.clone());
            let d = t.sub(y, c)?;
            let d = t.square(d);
            Ok(t.sum(d))
        },
        1e-5,
    );
}

#[test]
fn elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pos = Tensor::new(vec![6], (0..6).map(|i| 0.3 + 0.2 * i as f64).collect()).unwrap();
    let params = vec![rand_tensor(&mut rng, &[6], 1.5), pos, rand_tensor(&mut rng, &[1], 1.0)];
    assert_passes(
        &params,
        |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.tanh(v[0]);
            let c = t.softplus(v[0]);
            let d = t.sqrt(v[1]);
            let e = t.log_floor(v[1], 1e-7);
            let f = t.div(a, v[1])?;
            let g = t.mul(b, v[2])?;
            let s = t.add(f, g)?;
            let s = t.add(s, c)?;
            let s = t.sub(s, d)?;
            let s = t.mul(s, e)?;
            let s = t.scale(s, 0.7);
            let s = t.offset(s, 0.1);
            let n = t.norm(s);
            let m = t.mean(s);
            let q = t.div(n, v[2])?;
            t.add(q, m)
        },
        1e-6,
    );
}

#[test]
fn resampling_and_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![rand_tensor(&mut rng, &[2, 4, 6], 1.0), rand_tensor(&mut rng, &[3, 2, 3], 1.0)];
    let w = rand_tensor(&mut rng, &[5, 2, 3], 1.0);
    assert_passes(
        &params,
        move |t, v| {
            let p = t.avg_pool(v[0], 2, 2)?;
            let c = t.concat(p, v[1])?;
            let u = t.upsample(c, 1, 2)?;
            let r = t.resize(u, 3, 5)?;
            let r = t.resize(r, 2, 3)?;
            let r = t.reshape(r, &[5, 6])?;
            let r = t.reshape(r, &[5, 2, 3])?;
            let wc = t.constant(w.clone());
            let y = t.mul(r, wc)?;
            let y = t.square(y);
            Ok(t.sum(y))
        },
        1e-6,
    );
}

#[test]
fn polar_mask_magnitude_and_complex_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = rand_tensor(&mut rng, &[2, 3, 4], 2.0);
    let noisy = Rc::new(rand_tensor(&mut rng, &[2, 3, 4], 1.0).into_data());
    assert_passes(
        &[m],
        move |t, v| {
            let mk = t.polar_mask(v[0])?;
            let e = t.complex_mul_const(mk, noisy.clone())?;
            let mag = t.magnitude(e)?;
            Ok(t.sum(mag))
        },
        1e-5,
    );
}

#[test]
fn polar_mask_near_origin() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut m = rand_tensor(&mut rng, &[2, 4], 1e-3);
    m.data_mut()[0] = 1e-5;
    m.data_mut()[4] = -2e-5;
    let w = rand_tensor(&mut rng, &[2, 4], 1.0);
    assert_passes(
        &[m],
        move |t, v| {
            let mk = t.polar_mask(v[0])?;
            let wc = t.constant(w.clone());
            let y = t.mul(mk, wc)?;
            Ok(t.sum(y))
        },
        1e-5,
    );
}

#[test]
fn polar_mask_saturates_to_identity() {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![2, 1], vec![40.0, 0.0]).unwrap());
    let mk = tape.polar_mask(m).unwrap();
    let v = tape.value(mk).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] == 0.0);
}

#[test]
fn stft_op_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = StftConfig::analysis(64, 40, 10).unwrap();
    let x = rand_tensor(&mut rng, &[300], 1.0);
    let target = rand_tensor(&mut rng, &[300], 1.0);
    assert_passes(
        &[x],
        move |t, v| {
            let s = t.stft(v[0], &cfg)?;
            let c = t.constant(target.clone());
            let sc = t.stft(c, &cfg)?;
            let m = t.magnitude(s)?;
            let mc = t.magnitude(sc)?;
            let d = t.sub(m, mc)?;
            let n = t.norm(d);
            let l = t.log_floor(m, 1e-7);
            let l = t.abs(l);
            let l = t.mean(l);
            t.add(n, l)
        },
        1e-4,
    );
}

fn ssm_params(rng: &mut ChaCha8Rng, h: usize, r: usize, n: usize) -> Vec<Tensor> {
    let lnr = Tensor::new(vec![h, n], (0..h * n).map(|_| rng.random_range(-1.5..0.0)).collect()).unwrap();
    let lim = Tensor::new(vec![h, n], (0..h * n).map(|i| std::f64::consts::PI * (i % n) as f64).collect()).unwrap();
    let mut v = vec![lnr, lim];
    for _ in 0..4 {
        v.push(rand_tensor(rng, &[h, n], 0.5));
    }
    v.push(rand_tensor(rng, &[h, r, n], 1.0));
    v.push(rand_tensor(rng, &[h, r, n], 1.0));
    v.push(Tensor::new(vec![h], (0..h).map(|_| rng.random_range(-4.0..-1.5)).collect()).unwrap());
    v
}

fn ssm_inputs(v: &[Var]) -> SsmKernelInputs {
    SsmKernelInputs {
        log_neg_re: v[0],
        lambda_im: v[1],
        p_re: v[2],
        p_im: v[3],
        b_re: v[4],
        b_im: v[5],
        c_re: v[6],
        c_im: v[7],
        log_dt: v[8],
    }
}

#[test]
fn ssm_kernel_op_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = ssm_params(&mut rng, 2, 2, 3);
    let w = rand_tensor(&mut rng, &[2, 2, 2, 12], 1.0);
    assert_passes(
        &params,
        move |t, v| {
            let k = t.ssm_kernel(&ssm_inputs(v), 12)?;
            let wc = t.constant(w.clone());
            let y = t.mul(k, wc)?;
            Ok(t.sum(y))
        },
        1e-5,
    );
}

#[test]
fn s4_conv_1d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = vec![rand_tensor(&mut rng, &[3, 10], 1.0), rand_tensor(&mut rng, &[2, 3, 2, 14], 1.0), rand_tensor(&mut rng, &[3], 1.0)];
    let w = rand_tensor(&mut rng, &[3, 10], 1.0);
    assert_passes(
        &params,
        move |t, v| {
            let y = t.s4_conv(&S4ConvInputs { x: v[0], k_time: v[1], k_freq: None, d: Some(v[2]) })?;
            let wc = t.constant(w.clone());
            let y = t.mul(y, wc)?;
            let y = t.square(y);
            Ok(t.sum(y))
        },
        1e-5,
    );
}

#[test]
fn s4_conv_2d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = vec![
        rand_tensor(&mut rng, &[2, 5, 6], 1.0),
        rand_tensor(&mut rng, &[2, 2, 2, 6], 1.0),
        rand_tensor(&mut rng, &[2, 2, 2, 5], 1.0),
        rand_tensor(&mut rng, &[2], 1.0),
    ];
    let w = rand_tensor(&mut rng, &[2, 5, 6], 1.0);
    assert_passes(
        &params,
        move |t, v| {
            let y = t.s4_conv(&S4ConvInputs { x: v[0], k_time: v[1], k_freq: Some(v[2]), d: Some(v[3]) })?;
            let wc = t.constant(w.clone());
            let y = t.mul(y, wc)?;
            let y = t.square(y);
            Ok(t.sum(y))
        },
        1e-6,
    );
}

/// Direct quadruple loop over the summed 2-D taps.
#[test]
fn s4_conv_2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, f, tl, r) = (2, 5, 7, 2);
    let x = rand_tensor(&mut rng, &[h, f, tl], 1.0);
    let kt = rand_tensor(&mut rng, &[2, h, r, tl], 1.0);
    let kf = rand_tensor(&mut rng, &[2, h, r, f], 1.0);
    let mut tape = Tape::new();
    let (xv, ktv, kfv) = (tape.constant(x.clone()), tape.constant(kt.clone()), tape.constant(kf.clone()));
    let y = tape.s4_conv(&S4ConvInputs { x: xv, k_time: ktv, k_freq: Some(kfv), d: None }).unwrap();
    let y = tape.value(y).data().to_vec();
    let c = |t: &Tensor, ch: usize, k: usize, j: usize, len: usize| {
        let base = (ch * r + k) * len + j;
        num_complex::Complex64::new(t.data()[base], t.data()[h * r * len + base])
    };
    for ch in 0..h {
        for i in 0..f {
            for j in 0..tl {
                let mut acc = num_complex::Complex64::new(0.0, 0.0);
                for a in 0..=i {
                    for b in 0..=j {
                        let tap: num_complex::Complex64 = (0..r).map(|k| c(&kf, ch, k, a, f) * c(&kt, ch, k, b, tl)).sum();
                        acc += tap * x.data()[(ch * f + i - a) * tl + j - b];
                    }
                }
                assert!((acc.re - y[(ch * f + i) * tl + j]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn detached_parameter_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = vec![rand_tensor(&mut rng, &[3], 1.0), rand_tensor(&mut rng, &[3], 1.0)];
    let rep = check_gradients(&names(2), &params, |t, v| Ok(t.norm(v[0])), 10, 0).unwrap();
    assert_eq!(rep.disconnected(), vec!["p1"]);
    assert!(!rep.passed);
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[4, 3, 8], 1.0);
    let run = || {
        let mut t = Tape::new();
        let v = t.param(0, x.clone());
        let p = t.avg_pool(v, 1, 2).unwrap();
        let g = t.gelu(p);
        let l = t.norm(g);
        t.backward(l).unwrap().params
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_errors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    assert!(t.add(a, b).is_err());
    assert!(t.linear(a, b, None).is_ok());
    assert!(t.linear(b, b, None).is_err());
    assert!(t.backward(a).is_err());
    assert!(t.avg_pool(a, 1, 2).is_err());
}
