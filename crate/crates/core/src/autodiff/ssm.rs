//! Fused op materializing per-channel DPLR SSM kernels.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm_kernel::dplr::{dense_a, dense_a_vjp};
use crate::ssm_kernel::{discretize, discretize_vjp, multi_kernel_vjp, project_states, propagate_states, ContinuousSsm};

/// Parameters of `H` independent DPLR SSMs with `R` output projections each.
///
/// `Λ = −exp(log_neg_re) + i·lambda_im`, `Δ = exp(log_dt)`. Shapes: `(H, N)`
/// except `c_re`, `c_im` `(H, R, N)` and `log_dt` `(H)`. The op yields
/// kernels of shape `(2, H, R, L)`.
#[derive(Clone, Copy, Debug)]
pub struct SsmKernelInputs {
    pub log_neg_re: Var,
    pub lambda_im: Var,
    pub p_re: Var,
    pub p_im: Var,
    pub b_re: Var,
    pub b_im: Var,
    pub c_re: Var,
    pub c_im: Var,
    pub log_dt: Var,
}

impl SsmKernelInputs {
    fn vars(&self) -> [Var; 9] {
        [self.log_neg_re, self.lambda_im, self.p_re, self.p_im, self.b_re, self.b_im, self.c_re, self.c_im, self.log_dt]
    }
}

struct Channel {
    a: DMatrix<Complex64>,
    b: DVector<Complex64>,
    a_bar: DMatrix<Complex64>,
    b_bar: DVector<Complex64>,
    p: Vec<Complex64>,
    cs: Vec<Vec<Complex64>>,
    states: Vec<Complex64>,
    delta: f64,
}

pub(crate) struct Saved {
    inputs: SsmKernelInputs,
    h: usize,
    r: usize,
    n: usize,
    len: usize,
    channels: Vec<Channel>,
}

fn complex_row(re: &[f64], im: &[f64]) -> Vec<Complex64> {
    re.iter().zip(im).map(|(a, b)| Complex64::new(*a, *b)).collect()
}

pub(super) fn forward(tape: &mut Tape, inp: &SsmKernelInputs, len: usize) -> Result<Var> {
    let shape = tape.shape(inp.log_neg_re).to_vec();
    let (h, n) = match shape.as_slice() {
        [h, n] => (*h, *n),
        s => return Err(Error::ShapeMismatch(format!("SSM parameters must be (H, N), got {s:?}"))),
    };
    let r = tape.value(inp.c_re).len() / (h * n).max(1);
    for v in [inp.lambda_im, inp.p_re, inp.p_im, inp.b_re, inp.b_im] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!("SSM parameter {:?}, expected {shape:?}", tape.shape(v))));
        }
    }
    if tape.shape(inp.c_re) != [h, r, n] || tape.shape(inp.c_im) != [h, r, n] || tape.shape(inp.log_dt) != [h] || r == 0 {
        return Err(Error::ShapeMismatch("SSM output projections must be (H, R, N) and log_dt (H)".into()));
    }
    if len == 0 {
        return Err(Error::DimensionMismatch("kernel length must be >= 1".into()));
    }
    let d = |v: Var| tape.value(v).data();
    let mut out = vec![0.0; 2 * h * r * len];
    let mut channels = Vec::with_capacity(h);
    for ch in 0..h {
        let row = ch * n..(ch + 1) * n;
        let lambda: Vec<Complex64> = d(inp.log_neg_re)[row.clone()]
            .iter()
            .zip(&d(inp.lambda_im)[row.clone()])
            .map(|(lr, li)| Complex64::new(-lr.exp(), *li))
            .collect();
        let p = complex_row(&d(inp.p_re)[row.clone()], &d(inp.p_im)[row.clone()]);
        let b = DVector::from_vec(complex_row(&d(inp.b_re)[row.clone()], &d(inp.b_im)[row]));
        let cs: Vec<Vec<Complex64>> = (0..r)
            .map(|k| {
                let span = (ch * r + k) * n..(ch * r + k + 1) * n;
                complex_row(&d(inp.c_re)[span.clone()], &d(inp.c_im)[span])
            })
            .collect();
        let delta = d(inp.log_dt)[ch].exp();
        let a = dense_a(&lambda, &p);
        let cont = ContinuousSsm { a: a.clone(), b: b.clone(), c: DVector::zeros(n), d: Complex64::new(0.0, 0.0) };
        let dssm = discretize(&cont, delta)?;
        let states = propagate_states(&dssm.a_bar, dssm.b_bar.as_slice(), len);
        for (k, c) in cs.iter().enumerate() {
            let taps = project_states(&states, c);
            let base = (ch * r + k) * len;
            for (j, z) in taps.iter().enumerate() {
                out[base + j] = z.re;
                out[h * r * len + base + j] = z.im;
            }
        }
        channels.push(Channel { a, b, a_bar: dssm.a_bar, b_bar: dssm.b_bar, p, cs, states, delta });
    }
    let value = Tensor::new(vec![2, h, r, len], out)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteActivation("SSM kernel".into()));
    }
    let saved = Saved { inputs: *inp, h, r, n, len, channels };
    Ok(tape.push(value, Op::SsmKernel(Box::new(saved)), &inp.vars()))
}

pub(super) fn backward(tape: &Tape, s: &Saved, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let (h, r, n, len) = (s.h, s.r, s.n, s.len);
    let mut g_lnr = vec![0.0; h * n];
    let mut g_lim = vec![0.0; h * n];
    let mut g_pre = vec![0.0; h * n];
    let mut g_pim = vec![0.0; h * n];
    let mut g_bre = vec![0.0; h * n];
    let mut g_bim = vec![0.0; h * n];
    let mut g_cre = vec![0.0; h * r * n];
    let mut g_cim = vec![0.0; h * r * n];
    let mut g_ldt = vec![0.0; h];
    let lnr = tape.value(s.inputs.log_neg_re).data();
    for (ch, c) in s.channels.iter().enumerate() {
        let gk: Vec<Vec<Complex64>> = (0..r)
            .map(|k| {
                let base = (ch * r + k) * len;
                (0..len).map(|j| Complex64::new(g[base + j], g[h * r * len + base + j])).collect()
            })
            .collect();
        let cs: Vec<&[Complex64]> = c.cs.iter().map(|v| v.as_slice()).collect();
        let gs: Vec<&[Complex64]> = gk.iter().map(|v| v.as_slice()).collect();
        let (g_abar, g_bbar, g_c) = multi_kernel_vjp(&c.a_bar, &c.states, &cs, &gs);
        let cg = discretize_vjp(&c.a, &c.b, c.delta, &c.a_bar, &c.b_bar, &g_abar, &DVector::from_vec(g_bbar))?;
        let (g_lambda, g_p) = dense_a_vjp(&c.p, &cg.a);
        for i in 0..n {
            let idx = ch * n + i;
            // Re Λ = −exp(log_neg_re)
            g_lnr[idx] = g_lambda[i].re * -lnr[idx].exp();
            g_lim[idx] = g_lambda[i].im;
            g_pre[idx] = g_p[i].re;
            g_pim[idx] = g_p[i].im;
            g_bre[idx] = cg.b[i].re;
            g_bim[idx] = cg.b[i].im;
        }
        for (k, gc) in g_c.iter().enumerate() {
            for (i, z) in gc.iter().enumerate() {
                g_cre[(ch * r + k) * n + i] = z.re;
                g_cim[(ch * r + k) * n + i] = z.im;
            }
        }
        g_ldt[ch] = cg.delta * c.delta;
    }
    let add = |grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64]| {
        tape.acc(grads, v, |d| d.iter_mut().zip(src).for_each(|(d, s)| *d += s));
    };
    let i = &s.inputs;
    add(grads, i.log_neg_re, &g_lnr);
    add(grads, i.lambda_im, &g_lim);
    add(grads, i.p_re, &g_pre);
    add(grads, i.p_im, &g_pim);
    add(grads, i.b_re, &g_bre);
    add(grads, i.b_im, &g_bim);
    add(grads, i.c_re, &g_cre);
    add(grads, i.c_im, &g_cim);
    add(grads, i.log_dt, &g_ldt);
    Ok(())
}
