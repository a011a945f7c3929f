//! Fused depthwise causal convolution with SSM kernels, 1-D or 2-D separable.
//!
//! For a map `x (H, F, T)` and per-channel rank factors `K1_r` (frequency axis)
//! and `K2_r` (time axis), the output is
//! `y = Re Σ_r K1_r ∗_F (K2_r ∗_T x) + D·x`.
//! Without frequency kernels the `F` rows are convolved along time only.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::Fft;

use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fft::{forward_plan, inverse_plan};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug)]
pub struct S4ConvInputs {
    /// `(H, F, T)` or `(H, T)`.
    pub x: Var,
    /// `(2, H, R, Lt)` time-axis kernels; taps beyond `T` are ignored.
    pub k_time: Var,
    /// `(2, H, R, Lf)` frequency-axis kernels, or `None` for a 1-D layer.
    pub k_freq: Option<Var>,
    /// `(H)` feedthrough.
    pub d: Option<Var>,
}

pub(crate) struct Saved {
    inputs: S4ConvInputs,
}

struct Plan {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Plan {
    fn new(n: usize) -> Self {
        let fwd = forward_plan(n);
        let inv = inverse_plan(n);
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Self { n, fwd, inv, scratch: vec![ZERO; len] }
    }

    fn forward(&mut self, buf: &mut [Complex64]) {
        self.fwd.process_with_scratch(buf, &mut self.scratch);
    }

    /// Inverse transform scaled by `1/n`.
    fn inverse(&mut self, buf: &mut [Complex64]) {
        self.inv.process_with_scratch(buf, &mut self.scratch);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|z| *z *= s);
    }

    /// Zero-pads `x` into `buf` and transforms it.
    fn load(&mut self, buf: &mut [Complex64], x: impl Iterator<Item = Complex64>) {
        buf.fill(ZERO);
        for (b, v) in buf.iter_mut().zip(x) {
            *b = v;
        }
        self.forward(buf);
    }

    fn load_real(&mut self, buf: &mut [Complex64], x: &[f64]) {
        self.load(buf, x.iter().map(|v| Complex64::new(*v, 0.0)));
    }
}

fn mul_into(out: &mut [Complex64], a: &[Complex64], b: &[Complex64]) {
    out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (p, q))| *o = p * q);
}

/// `acc += a·conj(b)`
fn acc_conj(acc: &mut [Complex64], a: &[Complex64], b: &[Complex64]) {
    acc.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (p, q))| *o += p * q.conj());
}

struct KernelView<'a> {
    data: &'a [f64],
    h: usize,
    r: usize,
    len: usize,
}

impl<'a> KernelView<'a> {
    fn new(t: &'a Tensor, h: usize, what: &str) -> Result<Self> {
        match t.shape() {
            [2, hh, r, len] if *hh == h && *r > 0 && *len > 0 => Ok(Self { data: t.data(), h, r: *r, len: *len }),
            s => Err(Error::ShapeMismatch(format!("{what} kernel must be (2, {h}, R, L), got {s:?}"))),
        }
    }

    fn taps(&self, ch: usize, k: usize, n: usize) -> impl Iterator<Item = Complex64> + '_ {
        let base = (ch * self.r + k) * self.len;
        let im = self.h * self.r * self.len;
        (0..n.min(self.len)).map(move |j| Complex64::new(self.data[base + j], self.data[im + base + j]))
    }

    fn offsets(&self, ch: usize, k: usize) -> (usize, usize) {
        let base = (ch * self.r + k) * self.len;
        (base, self.h * self.r * self.len + base)
    }
}

fn fft_len(n: usize) -> usize {
    (2 * n).next_power_of_two()
}

/// `W_r[f, :] = K2_r ∗ x[f, :]` from precomputed row spectra, into `w (F, T)`.
fn time_pass(plan: &mut Plan, xhat: &[Complex64], k2hat: &[Complex64], t: usize, buf: &mut [Complex64], w: &mut [Complex64]) {
    for (row, wr) in xhat.chunks_exact(plan.n).zip(w.chunks_exact_mut(t)) {
        mul_into(buf, row, k2hat);
        plan.inverse(buf);
        wr.copy_from_slice(&buf[..t]);
    }
}

pub(super) fn forward(tape: &mut Tape, inp: &S4ConvInputs) -> Result<Var> {
    let vx = tape.value(inp.x);
    let (h, f, t) = vx.dims3();
    let kt = KernelView::new(tape.value(inp.k_time), h, "time")?;
    let kf = match inp.k_freq {
        Some(v) => {
            let k = KernelView::new(tape.value(v), h, "frequency")?;
            if k.r != kt.r {
                return Err(Error::ShapeMismatch("time and frequency kernels differ in rank".into()));
            }
            Some(k)
        }
        None => None,
    };
    if let Some(d) = inp.d {
        if tape.value(d).len() != h {
            return Err(Error::ShapeMismatch(format!("feedthrough must have {h} entries")));
        }
    }
    let xd = vx.data();
    let mut out = vec![0.0; h * f * t];
    let mut pt = Plan::new(fft_len(t));
    let mut pf = Plan::new(fft_len(f));
    let (nt, nf) = (pt.n, pf.n);
    let mut xhat = vec![ZERO; f * nt];
    let mut k2hat = vec![ZERO; nt];
    let mut k1hat = vec![ZERO; nf];
    let mut tbuf = vec![ZERO; nt];
    let mut col = vec![ZERO; nf];
    let mut w = vec![ZERO; if kf.is_some() { f * t } else { 0 }];
    for ch in 0..h {
        let xc = &xd[ch * f * t..(ch + 1) * f * t];
        let yc = &mut out[ch * f * t..(ch + 1) * f * t];
        for (row, xh) in xc.chunks_exact(t).zip(xhat.chunks_exact_mut(nt)) {
            pt.load_real(xh, row);
        }
        match &kf {
            None => {
                let mut ksum = vec![ZERO; nt];
                for k in 0..kt.r {
                    pt.load(&mut k2hat, kt.taps(ch, k, t));
                    ksum.iter_mut().zip(&k2hat).for_each(|(a, b)| *a += b);
                }
                for (row, xh) in yc.chunks_exact_mut(t).zip(xhat.chunks_exact(nt)) {
                    mul_into(&mut tbuf, xh, &ksum);
                    pt.inverse(&mut tbuf);
                    row.iter_mut().zip(&tbuf).for_each(|(y, z)| *y += z.re);
                }
            }
            Some(kf) => {
                for k in 0..kt.r {
                    pt.load(&mut k2hat, kt.taps(ch, k, t));
                    time_pass(&mut pt, &xhat, &k2hat, t, &mut tbuf, &mut w);
                    pf.load(&mut k1hat, kf.taps(ch, k, f));
                    for ti in 0..t {
                        pf.load(&mut col, (0..f).map(|fi| w[fi * t + ti]));
                        col.iter_mut().zip(&k1hat).for_each(|(a, b)| *a *= b);
                        pf.inverse(&mut col);
                        for fi in 0..f {
                            yc[fi * t + ti] += col[fi].re;
                        }
                    }
                }
            }
        }
        if let Some(d) = inp.d {
            let dv = tape.value(d).data()[ch];
            yc.iter_mut().zip(xc).for_each(|(y, x)| *y += dv * x);
        }
    }
    let value = Tensor::new(vx.shape().to_vec(), out)?;
    let inputs: Vec<Var> = [Some(inp.x), Some(inp.k_time), inp.k_freq, inp.d].into_iter().flatten().collect();
    Ok(tape.push(value, Op::S4Conv(Box::new(Saved { inputs: *inp })), &inputs))
}

pub(super) fn backward(tape: &Tape, s: &Saved, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let inp = &s.inputs;
    let vx = tape.value(inp.x);
    let (h, f, t) = vx.dims3();
    let kt = KernelView::new(tape.value(inp.k_time), h, "time")?;
    let kf = inp.k_freq.map(|v| KernelView::new(tape.value(v), h, "frequency")).transpose()?;
    let xd = vx.data();
    let mut pt = Plan::new(fft_len(t));
    let mut pf = Plan::new(fft_len(f));
    let (nt, nf) = (pt.n, pf.n);
    let mut g_x = vec![0.0; h * f * t];
    let mut g_kt = vec![0.0; kt.data.len()];
    let mut g_kf = kf.as_ref().map(|k| vec![0.0; k.data.len()]);
    let mut g_d = vec![0.0; h];
    let ltt = kt.len.min(t);

    let mut xhat = vec![ZERO; f * nt];
    // Σ_r GW_f·conj(K2hat_r), inverted once per row at the end
    let mut gx_hat = vec![ZERO; f * nt];
    let mut k2hat = vec![ZERO; nt];
    let mut k1hat = vec![ZERO; nf];
    let mut tbuf = vec![ZERO; nt];
    let mut acc_t = vec![ZERO; nt];
    let mut acc_f = vec![ZERO; nf];
    let mut col = vec![ZERO; nf];
    let two_d = kf.is_some();
    let mut w = vec![ZERO; if two_d { f * t } else { 0 }];
    let mut gw = vec![ZERO; if two_d { f * t } else { 0 }];
    let mut gcols = vec![ZERO; if two_d { t * nf } else { f * nt }];

    for ch in 0..h {
        let xc = &xd[ch * f * t..(ch + 1) * f * t];
        let gc = &g[ch * f * t..(ch + 1) * f * t];
        for (row, xh) in xc.chunks_exact(t).zip(xhat.chunks_exact_mut(nt)) {
            pt.load_real(xh, row);
        }
        gx_hat.fill(ZERO);
        match &kf {
            None => {
                // row spectra of the output gradient
                for (row, gh) in gc.chunks_exact(t).zip(gcols.chunks_exact_mut(nt)) {
                    pt.load_real(gh, row);
                }
                acc_t.fill(ZERO);
                for (gh, xh) in gcols.chunks_exact(nt).zip(xhat.chunks_exact(nt)) {
                    acc_conj(&mut acc_t, gh, xh);
                }
                pt.inverse(&mut acc_t);
                let mut ksum = vec![ZERO; nt];
                for k in 0..kt.r {
                    // only Re K reaches a real input through Re(K ∗ x)
                    let (re, _) = kt.offsets(ch, k);
                    for j in 0..ltt {
                        g_kt[re + j] += acc_t[j].re;
                    }
                    pt.load(&mut k2hat, kt.taps(ch, k, t));
                    ksum.iter_mut().zip(&k2hat).for_each(|(a, b)| *a += b);
                }
                for (gxh, gh) in gx_hat.chunks_exact_mut(nt).zip(gcols.chunks_exact(nt)) {
                    acc_conj(gxh, gh, &ksum);
                }
            }
            Some(kf) => {
                let g_kf = g_kf.as_mut().expect("frequency gradient buffer");
                let lff = kf.len.min(f);
                for (ti, gcol) in gcols.chunks_exact_mut(nf).enumerate() {
                    pf.load(gcol, (0..f).map(|fi| Complex64::new(gc[fi * t + ti], 0.0)));
                }
                for k in 0..kt.r {
                    pt.load(&mut k2hat, kt.taps(ch, k, t));
                    time_pass(&mut pt, &xhat, &k2hat, t, &mut tbuf, &mut w);
                    pf.load(&mut k1hat, kf.taps(ch, k, f));
                    acc_f.fill(ZERO);
                    for (ti, gcol) in gcols.chunks_exact(nf).enumerate() {
                        pf.load(&mut col, (0..f).map(|fi| w[fi * t + ti]));
                        acc_conj(&mut acc_f, gcol, &col);
                        col.iter_mut().zip(gcol.iter().zip(&k1hat)).for_each(|(o, (p, q))| *o = p * q.conj());
                        pf.inverse(&mut col);
                        for fi in 0..f {
                            gw[fi * t + ti] = col[fi];
                        }
                    }
                    pf.inverse(&mut acc_f);
                    let (re, im) = kf.offsets(ch, k);
                    for j in 0..lff {
                        g_kf[re + j] += acc_f[j].re;
                        g_kf[im + j] += acc_f[j].im;
                    }
                    acc_t.fill(ZERO);
                    for ((row, xh), gxh) in gw.chunks_exact(t).zip(xhat.chunks_exact(nt)).zip(gx_hat.chunks_exact_mut(nt)) {
                        pt.load(&mut tbuf, row.iter().copied());
                        acc_conj(&mut acc_t, &tbuf, xh);
                        acc_conj(gxh, &tbuf, &k2hat);
                    }
                    pt.inverse(&mut acc_t);
                    let (re, im) = kt.offsets(ch, k);
                    for j in 0..ltt {
                        g_kt[re + j] += acc_t[j].re;
                        g_kt[im + j] += acc_t[j].im;
                    }
                }
            }
        }
        let gxc = &mut g_x[ch * f * t..(ch + 1) * f * t];
        for (row, gh) in gxc.chunks_exact_mut(t).zip(gx_hat.chunks_exact_mut(nt)) {
            pt.inverse(gh);
            row.iter_mut().zip(gh.iter()).for_each(|(a, b)| *a += b.re);
        }
        if let Some(d) = inp.d {
            let dv = tape.value(d).data()[ch];
            gxc.iter_mut().zip(gc).for_each(|(a, b)| *a += dv * b);
            g_d[ch] = gc.iter().zip(xc).map(|(a, b)| a * b).sum();
        }
    }
    let add = |grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64]| {
        tape.acc(grads, v, |d| d.iter_mut().zip(src).for_each(|(d, s)| *d += s));
    };
    add(grads, inp.x, &g_x);
    add(grads, inp.k_time, &g_kt);
    if let (Some(v), Some(gk)) = (inp.k_freq, &g_kf) {
        add(grads, v, gk);
    }
    if let Some(d) = inp.d {
        add(grads, d, &g_d);
    }
    Ok(())
}
