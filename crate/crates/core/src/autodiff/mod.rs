//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every op appends a node holding its value and whatever the backward pass
//! needs. Nodes are created in evaluation order, so a single reverse sweep
//! visits each node once after all of its consumers.
//!
//! Feature maps use the `(C, F, T)` layout; 1-D signals are `(C, T)` and are
//! treated as `F = 1`. Complex quantities are stored as a leading axis of
//! length 2 holding real and imaginary parts.

mod conv;
pub mod gradcheck;
mod ssm;
mod tensor;

use std::rc::Rc;

use num_complex::Complex64;

use crate::dsp::{stft_adjoint, StftConfig};
use crate::error::{Error, Result};

pub use conv::S4ConvInputs;
pub use gradcheck::{check_gradients, GradcheckReport, GroupReport};
pub use ssm::SsmKernelInputs;
pub use tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

pub(crate) enum Op {
    Const,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    LogFloor(Var, f64),
    Magnitude(Var),
    Norm(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat(Var, Var),
    AvgPool { x: Var, pf: usize, pt: usize },
    Upsample { x: Var, pf: usize, pt: usize },
    Resize(Var),
    Reshape(Var),
    ComplexMulConst { x: Var, c: Rc<Vec<f64>> },
    PolarMask { m: Var },
    Stft { x: Var, cfg: StftConfig, n_frames: usize },
    SsmKernel(Box<ssm::Saved>),
    S4Conv(Box<conv::Saved>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed by parameter slot.
///
/// `None` marks a parameter the loss does not depend on.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&[f64]> {
        self.params.get(slot).and_then(|g| g.as_deref())
    }

    pub fn disconnected(&self) -> Vec<usize> {
        self.params.iter().enumerate().filter(|(_, g)| g.is_none()).map(|(i, _)| i).collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by op #{}", self.nodes.len());
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Const => false,
            _ => inputs.iter().any(|v| self.needs(*v)),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, &[])
    }

    /// Registers a trainable leaf in gradient slot `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor) -> Var {
        self.n_params = self.n_params.max(slot + 1);
        self.push(value, Op::Param(slot), &[])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if vb.len() == 1 {
            let s = vb.item();
            va.data().iter().map(|x| f(*x, s)).collect()
        } else {
            same_shape(va, vb, "elementwise op")?;
            va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect()
        };
        let t = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(t, mk(a, b), &[a, b]))
    }

    /// Elementwise `a + b`; `b` may be a single element broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same length");
        self.push(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `ln(max(a, floor))`.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor).ln(), Op::LogFloor(a, floor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        // 0.5·(1 + tanh u) = σ(2u)
        self.unary(a, |x| x * sigmoid(2.0 * GELU_C * (x + GELU_A * x * x * x)), Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Frobenius norm, as a scalar.
    pub fn norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Tensor::scalar(s), Op::Norm(a), &[a])
    }

    /// `(2, ...)` real/imaginary pairs to moduli `(...)`.
    pub fn magnitude(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().first() != Some(&2) {
            return Err(Error::ShapeMismatch(format!("magnitude expects a leading axis of 2, got {:?}", v.shape())));
        }
        let half = v.len() / 2;
        let (re, im) = v.data().split_at(half);
        let data = re.iter().zip(im).map(|(x, y)| x.hypot(*y)).collect();
        let t = Tensor::new(v.shape()[1..].to_vec(), data)?;
        Ok(self.push(t, Op::Magnitude(a), &[a]))
    }

    /// Pointwise channel mix: `x (Cin, ...)`, `w (Cout, Cin)`, `b (Cout)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (cout, cin) = match vw.shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::ShapeMismatch(format!("linear weight must be 2-D, got {s:?}"))),
        };
        if vx.shape().first() != Some(&cin) {
            return Err(Error::ShapeMismatch(format!("linear expects {cin} input channels, got {:?}", vx.shape())));
        }
        let p = vx.len() / cin;
        let mut out = vec![0.0; cout * p];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.len() != cout {
                return Err(Error::ShapeMismatch(format!("bias {:?} for {cout} outputs", vb.shape())));
            }
            for (row, bo) in out.chunks_exact_mut(p).zip(vb.data()) {
                row.fill(*bo);
            }
        }
        gemm(cout, cin, p, vw.data(), false, vx.data(), false, &mut out, 1.0);
        let mut shape = vx.shape().to_vec();
        shape[0] = cout;
        let t = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Linear { x, w, b }, &inputs))
    }

    /// Normalizes across channels at every position, then applies per-channel
    /// `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.shape()[0];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::ShapeMismatch(format!("layer norm over {c} channels")));
        }
        let p = vx.len() / c;
        let xd = vx.data();
        let mut mean = vec![0.0; p];
        for row in xd.chunks_exact(p) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let mut var = vec![0.0; p];
        for row in xd.chunks_exact(p) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let rstd: Vec<f64> = var.iter().map(|s| 1.0 / (s / c as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; c * p];
        let mut out = vec![0.0; c * p];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for ch in 0..c {
            let row = &xd[ch * p..(ch + 1) * p];
            let xh = &mut xhat[ch * p..(ch + 1) * p];
            let o = &mut out[ch * p..(ch + 1) * p];
            for i in 0..p {
                xh[i] = (row[i] - mean[i]) * rstd[i];
                o[i] = g[ch] * xh[i] + b[ch];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape()[1..] != vb.shape()[1..] {
            return Err(Error::ShapeMismatch(format!("concat {:?} with {:?}", va.shape(), vb.shape())));
        }
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(a, b), &[a, b]))
    }

    /// Non-overlapping `pf × pt` average pooling of a `(C, F, T)` map.
    pub fn avg_pool(&mut self, x: Var, pf: usize, pt: usize) -> Result<Var> {
        let vx = self.value(x);
        let (c, f, t) = vx.dims3();
        if f % pf != 0 || t % pt != 0 {
            return Err(Error::ShapeMismatch(format!("pooling {pf}x{pt} does not divide ({f}, {t})")));
        }
        let (fo, to) = (f / pf, t / pt);
        let mut out = vec![0.0; c * fo * to];
        let s = 1.0 / (pf * pt) as f64;
        let xd = vx.data();
        for ch in 0..c {
            for fi in 0..f {
                let src = &xd[(ch * f + fi) * t..(ch * f + fi + 1) * t];
                let dst = &mut out[(ch * fo + fi / pf) * to..(ch * fo + fi / pf + 1) * to];
                for (ti, v) in src.iter().enumerate() {
                    dst[ti / pt] += v * s;
                }
            }
        }
        let shape = reshape3(vx.shape(), c, fo, to);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::AvgPool { x, pf, pt }, &[x]))
    }

    /// Nearest-neighbour upsampling of a `(C, F, T)` map.
    pub fn upsample(&mut self, x: Var, pf: usize, pt: usize) -> Result<Var> {
        let vx = self.value(x);
        let (c, f, t) = vx.dims3();
        let (fo, to) = (f * pf, t * pt);
        let mut out = vec![0.0; c * fo * to];
        let xd = vx.data();
        for ch in 0..c {
            for fi in 0..fo {
                let src = &xd[(ch * f + fi / pf) * t..(ch * f + fi / pf + 1) * t];
                let dst = &mut out[(ch * fo + fi) * to..(ch * fo + fi + 1) * to];
                for (ti, d) in dst.iter_mut().enumerate() {
                    *d = src[ti / pt];
                }
            }
        }
        let shape = reshape3(vx.shape(), c, fo, to);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Upsample { x, pf, pt }, &[x]))
    }

    /// Zero-pads or crops the trailing end of the last two axes.
    pub fn resize(&mut self, x: Var, f_new: usize, t_new: usize) -> Result<Var> {
        let vx = self.value(x);
        let (c, f, t) = vx.dims3();
        if vx.shape().len() < 3 && f_new != 1 {
            return Err(Error::ShapeMismatch("cannot resize the frequency axis of a 1-D map".into()));
        }
        let mut out = vec![0.0; c * f_new * t_new];
        let xd = vx.data();
        let (fm, tm) = (f.min(f_new), t.min(t_new));
        for ch in 0..c {
            for fi in 0..fm {
                let src = &xd[(ch * f + fi) * t..(ch * f + fi) * t + tm];
                out[(ch * f_new + fi) * t_new..(ch * f_new + fi) * t_new + tm].copy_from_slice(src);
            }
        }
        let shape = reshape3(vx.shape(), c, f_new, t_new);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Resize(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Complex product of `x (2, ...)` with a constant of the same layout.
    pub fn complex_mul_const(&mut self, x: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().first() != Some(&2) || c.len() != vx.len() {
            return Err(Error::ShapeMismatch(format!("complex product of {:?} with {} values", vx.shape(), c.len())));
        }
        let h = vx.len() / 2;
        let xd = vx.data();
        let mut out = vec![0.0; vx.len()];
        for i in 0..h {
            let z = Complex64::new(xd[i], xd[h + i]) * Complex64::new(c[i], c[h + i]);
            out[i] = z.re;
            out[h + i] = z.im;
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::ComplexMulConst { x, c }, &[x]))
    }

    /// Bounded polar mask: `M = tanh(|m|)·m/|m|` for `m (2, ...)`.
    pub fn polar_mask(&mut self, m: Var) -> Result<Var> {
        let vm = self.value(m);
        if vm.shape().first() != Some(&2) {
            return Err(Error::ShapeMismatch(format!("polar mask expects a leading axis of 2, got {:?}", vm.shape())));
        }
        let h = vm.len() / 2;
        let md = vm.data();
        let mut out = vec![0.0; vm.len()];
        for i in 0..h {
            let s = tanh_ratio(md[i].hypot(md[h + i]));
            out[i] = s * md[i];
            out[h + i] = s * md[h + i];
        }
        let t = Tensor::new(vm.shape().to_vec(), out)?;
        Ok(self.push(t, Op::PolarMask { m }, &[m]))
    }

    /// Complex STFT of a waveform as a `(2, F, T)` tensor.
    pub fn stft(&mut self, x: Var, cfg: &StftConfig) -> Result<Var> {
        let vx = self.value(x);
        let spec = crate::dsp::stft(vx.data(), cfg, crate::dsp::SAMPLE_RATE)?;
        let (f, t) = spec.shape();
        let mut data = Vec::with_capacity(2 * f * t);
        data.extend(spec.data.iter().map(|z| z.re));
        data.extend(spec.data.iter().map(|z| z.im));
        let out = Tensor::new(vec![2, f, t], data)?;
        Ok(self.push(out, Op::Stft { x, cfg: cfg.clone(), n_frames: t }, &[x]))
    }

    /// Per-channel SSM convolution kernels; see [`SsmKernelInputs`].
    pub fn ssm_kernel(&mut self, inputs: &SsmKernelInputs, len: usize) -> Result<Var> {
        ssm::forward(self, inputs, len)
    }

    /// Depthwise causal convolution with SSM kernels; see [`S4ConvInputs`].
    pub fn s4_conv(&mut self, inputs: &S4ConvInputs) -> Result<Var> {
        conv::forward(self, inputs)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!("loss must be a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out = Gradients { params: vec![None; self.n_params] };
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Const => {}
            Op::Param(slot) => out.params[*slot] = Some(g.to_vec()),
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc_broadcast(grads, *b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc_broadcast(grads, *b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if vb.len() == 1 && va.len() != 1 {
                    let s = vb[0];
                    self.acc(grads, *a, |d| axpy(d, g, s));
                    let dot: f64 = g.iter().zip(va).map(|(x, y)| x * y).sum();
                    self.acc(grads, *b, |d| d[0] += dot);
                } else {
                    self.acc(grads, *a, |d| d.iter_mut().zip(g).zip(vb).for_each(|((d, g), b)| *d += g * b));
                    self.acc(grads, *b, |d| d.iter_mut().zip(g).zip(va).for_each(|((d, g), a)| *d += g * a));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                if vb.len() == 1 && y.len() != 1 {
                    let s = vb[0];
                    self.acc(grads, *a, |d| axpy(d, g, 1.0 / s));
                    let dot: f64 = g.iter().zip(y).map(|(x, y)| x * y).sum();
                    self.acc(grads, *b, |d| d[0] -= dot / s);
                } else {
                    self.acc(grads, *a, |d| d.iter_mut().zip(g).zip(vb).for_each(|((d, g), b)| *d += g / b));
                    self.acc(grads, *b, |d| {
                        d.iter_mut().zip(g).zip(y.iter().zip(vb)).for_each(|((d, g), (y, b))| *d -= g * y / b)
                    });
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, |d| axpy(d, g, *s)),
            Op::Offset(a) | Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let s = g[0] / self.value(*a).len() as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += s))
            }
            Op::Abs(a) => self.elementwise(grads, *a, g, y, |x, _| sign(x)),
            Op::Sqrt(a) => self.elementwise(grads, *a, g, y, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 }),
            Op::Square(a) => self.elementwise(grads, *a, g, y, |x, _| 2.0 * x),
            Op::LogFloor(a, floor) => self.elementwise(grads, *a, g, y, |x, _| if x > *floor { 1.0 / x } else { 0.0 }),
            Op::Gelu(a) => self.elementwise(grads, *a, g, y, |x, _| {
                let s = sigmoid(2.0 * GELU_C * (x + GELU_A * x * x * x));
                s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }),
            Op::Sigmoid(a) => self.elementwise(grads, *a, g, y, |_, y| y * (1.0 - y)),
            Op::Tanh(a) => self.elementwise(grads, *a, g, y, |_, y| 1.0 - y * y),
            Op::Softplus(a) => self.elementwise(grads, *a, g, y, |x, _| sigmoid(x)),
            Op::Norm(a) => {
                let n = y[0];
                let va = self.value(*a).data();
                if n > 0.0 {
                    self.acc(grads, *a, |d| axpy(d, va, g[0] / n));
                } else {
                    self.acc(grads, *a, |_| {});
                }
            }
            Op::Magnitude(a) => {
                let va = self.value(*a).data();
                let h = y.len();
                self.acc(grads, *a, |d| {
                    for i in 0..h {
                        if y[i] > 0.0 {
                            d[i] += g[i] * va[i] / y[i];
                            d[h + i] += g[i] * va[h + i] / y[i];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (cout, cin) = (vw.shape()[0], vw.shape()[1]);
                let p = vx.len() / cin;
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for (db, row) in d.iter_mut().zip(g.chunks_exact(p)) {
                            *db += row.iter().sum::<f64>();
                        }
                    });
                }
                // gW = gY·Xᵀ, gX = Wᵀ·gY
                self.acc(grads, *w, |d| gemm(cout, p, cin, g, false, vx.data(), true, d, 1.0));
                self.acc(grads, *x, |d| gemm(cin, cout, p, vw.data(), true, g, false, d, 1.0));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).len();
                let p = xhat.len() / c;
                let gam = self.value(*gamma).data();
                self.acc(grads, *beta, |d| {
                    for (db, row) in d.iter_mut().zip(g.chunks_exact(p)) {
                        *db += row.iter().sum::<f64>();
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for (dg, (row, xh)) in d.iter_mut().zip(g.chunks_exact(p).zip(xhat.chunks_exact(p))) {
                        *dg += row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                if self.needs(*x) {
                    // gx = rstd·(ĝ − mean(ĝ) − x̂·mean(ĝ·x̂)), ĝ = g·γ
                    let mut m1 = vec![0.0; p];
                    let mut m2 = vec![0.0; p];
                    for ch in 0..c {
                        let (gr, xr) = (&g[ch * p..(ch + 1) * p], &xhat[ch * p..(ch + 1) * p]);
                        for i in 0..p {
                            let gh = gr[i] * gam[ch];
                            m1[i] += gh;
                            m2[i] += gh * xr[i];
                        }
                    }
                    let inv = 1.0 / c as f64;
                    self.acc(grads, *x, |d| {
                        for ch in 0..c {
                            let (gr, xr) = (&g[ch * p..(ch + 1) * p], &xhat[ch * p..(ch + 1) * p]);
                            let dr = &mut d[ch * p..(ch + 1) * p];
                            for i in 0..p {
                                dr[i] += rstd[i] * (gr[i] * gam[ch] - m1[i] * inv - xr[i] * m2[i] * inv);
                            }
                        }
                    });
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.acc(grads, *a, |d| axpy(d, &g[..na], 1.0));
                self.acc(grads, *b, |d| axpy(d, &g[na..], 1.0));
            }
            Op::AvgPool { x, pf, pt } => {
                let (c, f, t) = self.value(*x).dims3();
                let (fo, to) = (f / pf, t / pt);
                let s = 1.0 / (pf * pt) as f64;
                self.acc(grads, *x, |d| {
                    for ch in 0..c {
                        for fi in 0..f {
                            let src = &g[(ch * fo + fi / pf) * to..(ch * fo + fi / pf + 1) * to];
                            let dst = &mut d[(ch * f + fi) * t..(ch * f + fi + 1) * t];
                            for (ti, dv) in dst.iter_mut().enumerate() {
                                *dv += src[ti / pt] * s;
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, pf, pt } => {
                let (c, f, t) = self.value(*x).dims3();
                let (fo, to) = (f * pf, t * pt);
                self.acc(grads, *x, |d| {
                    for ch in 0..c {
                        for fi in 0..fo {
                            let src = &g[(ch * fo + fi) * to..(ch * fo + fi + 1) * to];
                            let dst = &mut d[(ch * f + fi / pf) * t..(ch * f + fi / pf + 1) * t];
                            for (ti, v) in src.iter().enumerate() {
                                dst[ti / pt] += v;
                            }
                        }
                    }
                });
            }
            Op::Resize(x) => {
                let (c, f, t) = self.value(*x).dims3();
                let (_, fo, to) = node.value.dims3();
                let (fm, tm) = (f.min(fo), t.min(to));
                self.acc(grads, *x, |d| {
                    for ch in 0..c {
                        for fi in 0..fm {
                            let src = &g[(ch * fo + fi) * to..(ch * fo + fi) * to + tm];
                            axpy(&mut d[(ch * f + fi) * t..(ch * f + fi) * t + tm], src, 1.0);
                        }
                    }
                });
            }
            Op::ComplexMulConst { x, c } => {
                let h = y.len() / 2;
                // g_x = conj(c)·g_y
                self.acc(grads, *x, |d| {
                    for i in 0..h {
                        let z = Complex64::new(c[i], -c[h + i]) * Complex64::new(g[i], g[h + i]);
                        d[i] += z.re;
                        d[h + i] += z.im;
                    }
                });
            }
            Op::PolarMask { m } => {
                let md = self.value(*m).data();
                let h = y.len() / 2;
                self.acc(grads, *m, |d| {
                    for i in 0..h {
                        let (a, b) = (md[i], md[h + i]);
                        let r = a.hypot(b);
                        let s = tanh_ratio(r);
                        let q = tanh_ratio_slope(r);
                        // J = s·I + q·m·mᵀ (symmetric)
                        let dot = a * g[i] + b * g[h + i];
                        d[i] += s * g[i] + q * a * dot;
                        d[h + i] += s * g[h + i] + q * b * dot;
                    }
                });
            }
            Op::Stft { x, cfg, n_frames } => {
                let h = y.len() / 2;
                let gz: Vec<Complex64> = (0..h).map(|i| Complex64::new(g[i], g[h + i])).collect();
                let len = self.value(*x).len();
                let gx = stft_adjoint(&gz, cfg, *n_frames, len);
                self.acc(grads, *x, |d| axpy(d, &gx, 1.0));
            }
            Op::SsmKernel(saved) => ssm::backward(self, saved, g, grads)?,
            Op::S4Conv(saved) => conv::backward(self, saved, g, grads)?,
        }
        Ok(())
    }

    pub(crate) fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn acc_broadcast(&self, grads: &mut [Option<Vec<f64>>], b: Var, g: &[f64], f: impl Fn(f64, f64) -> f64) {
        let nb = self.value(b).len();
        if nb == 1 && g.len() != 1 {
            let s: f64 = g.iter().map(|gi| f(*gi, 0.0)).sum();
            self.acc(grads, b, |d| d[0] += s);
        } else {
            self.acc(grads, b, |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += f(*gi, 0.0)));
        }
    }

    /// `g_x += g · f'(x, y)` for a unary elementwise op with output `y`.
    fn elementwise(&self, grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], y: &[f64], df: impl Fn(f64, f64) -> f64) {
        let x = self.value(a).data();
        self.acc(grads, a, |d| {
            for (i, di) in d.iter_mut().enumerate() {
                *di += g[i] * df(x[i], y[i]);
            }
        });
    }
}

fn reshape3(orig: &[usize], c: usize, f: usize, t: usize) -> Vec<usize> {
    match orig.len() {
        3 => vec![c, f, t],
        2 => vec![c, t],
        _ => vec![t],
    }
}

#[inline]
fn axpy(d: &mut [f64], x: &[f64], s: f64) {
    for (di, xi) in d.iter_mut().zip(x) {
        *di += s * xi;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `tanh(r)/r`, continuous at 0.
pub(crate) fn tanh_ratio(r: f64) -> f64 {
    if r < 1e-4 {
        1.0 - r * r / 3.0
    } else {
        r.tanh() / r
    }
}

/// `s'(r)/r` for `s(r) = tanh(r)/r`.
fn tanh_ratio_slope(r: f64) -> f64 {
    if r < 1e-3 {
        -2.0 / 3.0 + 8.0 * r * r / 15.0
    } else {
        let th = r.tanh();
        (r * (1.0 - th * th) - th) / (r * r * r)
    }
}

/// `C (m×n) += alpha·op(A)·op(B)` with `op(A)` m×k and `op(B)` k×n, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], alpha: f64) {
    // a_t: A stored as k×m; b_t: B stored as n×k
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1);
    }
}
