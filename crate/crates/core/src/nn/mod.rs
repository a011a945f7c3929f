//! S4 / S4ND blocks and the three U-Net variants.
//!
//! All variants share one U-Net skeleton on `(C, F, T)` maps: a pointwise input
//! projection, `L` down levels (blocks, then average pooling and a channel
//! doubling projection), a stack of bottom blocks, `L` up levels (nearest
//! upsampling, skip concatenation, a merging projection, then blocks) and a
//! pointwise output head.
//!
//! * `s4nd_unet`: 2-D S4ND blocks on the spectrogram, 2×2 pooling.
//! * `tf_s4_unet`: frequency bins folded into channels, 1-D S4 over frames.
//! * `time_s4_unet`: 1-D S4 over waveform samples, pooling by 4.

mod check;
mod config;
mod params;
mod scenario;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{S4ConvInputs, SsmKernelInputs, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm_kernel::init::{complex_normal, hippo_lambda, hippo_p, sample_log_dt};

pub use check::{gradcheck_config, gradcheck_model, tiny_multires, GRADCHECK_SAMPLES};
pub use config::{ModelConfig, Scenario, Variant};
pub use params::ParamStore;
pub use scenario::{apply_scenario, apply_scenario_on, model_input, scenario_loss_on};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct SsmIdx {
    first: usize,
}

impl SsmIdx {
    fn inputs(&self, p: &[Var]) -> SsmKernelInputs {
        let i = self.first;
        SsmKernelInputs {
            log_neg_re: p[i],
            lambda_im: p[i + 1],
            p_re: p[i + 2],
            p_im: p[i + 3],
            b_re: p[i + 4],
            b_im: p[i + 5],
            c_re: p[i + 6],
            c_im: p[i + 7],
            log_dt: p[i + 8],
        }
    }
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ln_gamma: usize,
    ln_beta: usize,
    time: SsmIdx,
    freq: Option<SsmIdx>,
    d: usize,
    mix: LinearIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    input: LinearIdx,
    down: Vec<(Vec<BlockIdx>, LinearIdx)>,
    bottom: Vec<BlockIdx>,
    up: Vec<(LinearIdx, Vec<BlockIdx>)>,
    output: LinearIdx,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    /// Uniform `±1/sqrt(fan_in)` weights and bias.
    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> LinearIdx {
        let bound = 1.0 / (cin as f64).sqrt();
        let w = (0..cin * cout).map(|_| self.rng.random_range(-bound..bound)).collect();
        let b = (0..cout).map(|_| self.rng.random_range(-bound..bound)).collect();
        LinearIdx {
            w: self.store.push(format!("{name}.w"), Tensor::new(vec![cout, cin], w).expect("shape")),
            b: self.store.push(format!("{name}.b"), Tensor::new(vec![cout], b).expect("shape")),
        }
    }

    /// HiPPO-initialized per-channel DPLR SSM.
    fn ssm(&mut self, name: &str, h: usize) -> SsmIdx {
        let (n, r) = (self.cfg.state_size, self.cfg.rank);
        let lambda = hippo_lambda(n);
        let p = hippo_p(n);
        let rep = |f: &dyn Fn(usize) -> f64| Tensor::new(vec![h, n], (0..h * n).map(|i| f(i % n)).collect()).expect("shape");
        let lnr = rep(&|k| (-lambda[k].re).ln());
        let lim = rep(&|k| lambda[k].im);
        let pre = rep(&|k| p[k].re);
        let pim = rep(&|k| p[k].im);
        let bre = rep(&|_| 1.0);
        let bim = rep(&|_| 0.0);
        // rank components share the unit-variance budget
        let scale = 1.0 / (r as f64).sqrt();
        let c = complex_normal(self.rng, h * r * n);
        let cre = Tensor::new(vec![h, r, n], c.iter().map(|z| z.re * scale).collect()).expect("shape");
        let cim = Tensor::new(vec![h, r, n], c.iter().map(|z| z.im * scale).collect()).expect("shape");
        let ldt = Tensor::new(vec![h], (0..h).map(|_| sample_log_dt(self.rng)).collect()).expect("shape");
        let first = self.store.push(format!("{name}.log_neg_re"), lnr);
        for (suffix, t) in [("lambda_im", lim), ("p_re", pre), ("p_im", pim), ("b_re", bre), ("b_im", bim), ("c_re", cre), ("c_im", cim), ("log_dt", ldt)] {
            self.store.push(format!("{name}.{suffix}"), t);
        }
        SsmIdx { first }
    }

    fn block(&mut self, name: &str, h: usize) -> BlockIdx {
        let ln_gamma = self.store.push(format!("{name}.ln.gamma"), Tensor::full(&[h], 1.0));
        let ln_beta = self.store.push(format!("{name}.ln.beta"), Tensor::zeros(&[h]));
        let time = self.ssm(&format!("{name}.ssm_t"), h);
        let freq = (self.cfg.variant == Variant::S4ndUnet).then(|| self.ssm(&format!("{name}.ssm_f"), h));
        let d = (0..h).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        let d = self.store.push(format!("{name}.d"), Tensor::new(vec![h], d).expect("shape"));
        let mix = self.linear(&format!("{name}.mix"), h, h);
        BlockIdx { ln_gamma, ln_beta, time, freq, d, mix }
    }

    fn blocks(&mut self, name: &str, h: usize) -> Vec<BlockIdx> {
        (0..self.cfg.blocks_per_level).map(|i| self.block(&format!("{name}.{i}"), h)).collect()
    }
}

/// A model: configuration, parameters and the parameter layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Freshly initialized model; parameters are rounded to `f32` so that
    /// checkpoints store them exactly.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: ParamStore::default(), rng: &mut rng, cfg: &config };
        let base = config.base_channels;
        let in_ch = match config.variant {
            Variant::TfS4Unet => config.in_channels * config.n_freqs().unwrap_or(1),
            _ => config.in_channels,
        };
        let input = b.linear("in", in_ch, base);
        let mut down = Vec::new();
        let mut h = base;
        for lvl in 0..config.num_unet_levels {
            let blocks = b.blocks(&format!("down{lvl}"), h);
            let proj = b.linear(&format!("down{lvl}.proj"), h, 2 * h);
            down.push((blocks, proj));
            h *= 2;
        }
        let bottom = b.blocks("bottom", h);
        let mut up = Vec::new();
        for lvl in (0..config.num_unet_levels).rev() {
            let skip = h / 2;
            let merge = b.linear(&format!("up{lvl}.merge"), h + skip, skip);
            let blocks = b.blocks(&format!("up{lvl}"), skip);
            up.push((merge, blocks));
            h = skip;
        }
        let out_ch = match config.variant {
            Variant::TimeS4Unet => 1,
            Variant::TfS4Unet => config.scenario.out_channels() * config.n_freqs().unwrap_or(1),
            Variant::S4ndUnet => config.scenario.out_channels(),
        };
        let output = b.linear("out", h, out_ch);
        let mut params = b.store;
        params.round_to_f32();
        Ok(Self { config, params, layout: Layout { input, down, bottom, up, output } })
    }

    /// Rebuilds a model around stored parameter values.
    pub fn from_params(config: ModelConfig, values: Vec<Tensor>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.replace_values(values)?;
        Ok(m)
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// `(pf, pt)` pooling factors per level.
    pub fn pool_factors(&self) -> (usize, usize) {
        match self.config.variant {
            Variant::S4ndUnet => (2, 2),
            Variant::TfS4Unet => (1, 2),
            Variant::TimeS4Unet => (1, 4),
        }
    }

    /// Expected input shape for `frames` STFT frames (or `frames` samples for
    /// the time variant).
    pub fn input_shape(&self, frames: usize) -> Vec<usize> {
        match self.config.variant {
            Variant::TimeS4Unet => vec![1, frames],
            _ => vec![self.config.in_channels, self.config.n_freqs().unwrap_or(1), frames],
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match (self.config.variant, shape) {
            (Variant::TimeS4Unet, [1, l]) => *l >= 1,
            (Variant::TimeS4Unet, _) => false,
            (_, [c, f, t]) => *c == self.config.in_channels && Some(*f) == self.config.n_freqs() && *t >= 1,
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "{} expects input like {:?}, got {shape:?}",
                self.config.variant,
                self.input_shape(shape.last().copied().unwrap_or(0))
            )));
        }
        Ok(())
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.values().iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect()
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.values().iter().map(|t| tape.constant(t.clone())).collect()
    }

    fn linear(&self, tape: &mut Tape, p: &[Var], l: &LinearIdx, x: Var) -> Result<Var> {
        tape.linear(x, p[l.w], Some(p[l.b]))
    }

    fn block(&self, tape: &mut Tape, p: &[Var], b: &BlockIdx, x: Var) -> Result<Var> {
        let (_, f, t) = tape.value(x).dims3();
        let z = tape.layer_norm(x, p[b.ln_gamma], p[b.ln_beta], LN_EPS)?;
        let k_time = tape.ssm_kernel(&b.time.inputs(p), t)?;
        let k_freq = match &b.freq {
            Some(s) => Some(tape.ssm_kernel(&s.inputs(p), f)?),
            None => None,
        };
        let y = tape.s4_conv(&S4ConvInputs { x: z, k_time, k_freq, d: Some(p[b.d]) })?;
        let y = tape.gelu(y);
        let y = self.linear(tape, p, &b.mix, y)?;
        tape.add(x, y)
    }

    /// Runs the network on `input` (see [`Model::input_shape`]); returns the
    /// raw head output before any scenario nonlinearity for complex masking,
    /// softplus magnitudes for regression, sigmoid masks for magnitude masking
    /// and the waveform for the time variant.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], input: Var) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        self.check_input(&shape)?;
        let lay = &self.layout;
        let levels = self.config.num_unet_levels as u32;
        let (pf, pt) = self.pool_factors();

        // fold frequency into channels for the TF variant
        let (x, f0, t0) = match self.config.variant {
            Variant::TfS4Unet => {
                let (c, f, t) = (shape[0], shape[1], shape[2]);
                (tape.reshape(input, &[c * f, t])?, f, t)
            }
            Variant::TimeS4Unet => (input, 1, shape[1]),
            Variant::S4ndUnet => (input, shape[1], shape[2]),
        };
        let (fm, tm) = (pf.pow(levels), pt.pow(levels));
        let (fp, tp) = (f0.div_ceil(fm) * fm, t0.div_ceil(tm) * tm);
        let mut h = self.linear(tape, p, &lay.input, x)?;
        if self.config.variant == Variant::S4ndUnet {
            h = tape.resize(h, fp, tp)?;
        } else {
            h = tape.resize(h, 1, tp)?;
        }

        let mut skips = Vec::new();
        for (blocks, proj) in &lay.down {
            for b in blocks {
                h = self.block(tape, p, b, h)?;
            }
            skips.push(h);
            h = tape.avg_pool(h, pf, pt)?;
            h = self.linear(tape, p, proj, h)?;
        }
        for b in &lay.bottom {
            h = self.block(tape, p, b, h)?;
        }
        for (merge, blocks) in &lay.up {
            h = tape.upsample(h, pf, pt)?;
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(h, skip)?;
            h = self.linear(tape, p, merge, h)?;
            for b in blocks {
                h = self.block(tape, p, b, h)?;
            }
        }
        let mut y = self.linear(tape, p, &lay.output, h)?;
        y = match self.config.variant {
            Variant::S4ndUnet => tape.resize(y, f0, t0)?,
            Variant::TimeS4Unet => tape.resize(y, 1, t0)?,
            Variant::TfS4Unet => {
                let y = tape.resize(y, 1, t0)?;
                tape.reshape(y, &[self.config.scenario.out_channels(), f0, t0])?
            }
        };
        if !self.config.variant.is_time_domain() {
            y = match self.config.scenario {
                Scenario::MagRegression => tape.softplus(y),
                Scenario::MagMasking => tape.sigmoid(y),
                Scenario::ComplexMasking => y,
            };
        }
        if !tape.value(y).is_finite() {
            return Err(Error::NonFiniteActivation(format!("{} output", self.config.variant)));
        }
        Ok(y)
    }

    /// Inference without gradients.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    /// Randomly draws an input of the expected shape (used by checks and tests).
    pub fn random_input(&self, frames: usize, seed: u64) -> Tensor {
        let shape = self.input_shape(frames);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
    }
}
