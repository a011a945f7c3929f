use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;

/// Envelope floor (relative to its peak) below which overlap-add cannot invert.
const MIN_RELATIVE_ENVELOPE: f64 = 1e-12;

fn default_center() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    #[serde(default = "default_center")]
    pub center: bool,
}

impl StftConfig {
    /// Synthesis-capable configuration; validates the overlap-add condition.
    pub fn new(n_fft: usize, win_length: usize, hop_length: usize) -> Result<Self> {
        let cfg = Self::analysis(n_fft, win_length, hop_length)?;
        cfg.check_overlap_add()?;
        Ok(cfg)
    }

    /// Analysis-only configuration (no overlap-add check).
    pub fn analysis(n_fft: usize, win_length: usize, hop_length: usize) -> Result<Self> {
        let cfg = Self { n_fft, win_length, hop_length, center: true };
        cfg.validate_geometry()?;
        Ok(cfg)
    }

    pub fn with_center(mut self, center: bool) -> Self {
        self.center = center;
        self
    }

    /// 510/400/100.
    pub fn fine() -> Self {
        Self { n_fft: 510, win_length: 400, hop_length: 100, center: true }
    }

    /// 510/255/255.
    pub fn coarse() -> Self {
        Self { n_fft: 510, win_length: 255, hop_length: 255, center: true }
    }

    pub fn validate_geometry(&self) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.win_length || self.win_length > self.n_fft {
            return Err(Error::Config(format!(
                "need 0 < hop ({}) <= win ({}) <= n_fft ({})",
                self.hop_length, self.win_length, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn pad(&self) -> usize {
        if self.center {
            self.n_fft / 2
        } else {
            0
        }
    }

    /// Hann window of `win_length` sampled at half-integer points,
    /// `sin²(π(n + ½)/M)`, centred and zero-padded to `n_fft`.
    ///
    /// The half-sample offset keeps every tap strictly positive, so the
    /// window-squared envelope never vanishes even when `hop == win_length`.
    pub fn window(&self) -> Vec<f64> {
        let m = self.win_length;
        let offset = (self.n_fft - m) / 2;
        let mut w = vec![0.0; self.n_fft];
        for n in 0..m {
            let s = (std::f64::consts::PI * (n as f64 + 0.5) / m as f64).sin();
            w[offset + n] = s * s;
        }
        w
    }

    /// Steady-state window-squared overlap-add envelope over one hop period.
    pub fn steady_envelope(&self) -> Vec<f64> {
        let w = self.window();
        let mut env = vec![0.0; self.hop_length];
        for (n, wn) in w.iter().enumerate() {
            env[n % self.hop_length] += wn * wn;
        }
        env
    }

    /// Weighted overlap-add invertibility: the envelope must stay bounded away
    /// from zero.
    pub fn check_overlap_add(&self) -> Result<()> {
        let env = self.steady_envelope();
        let max = env.iter().copied().fold(0.0, f64::max);
        let min = env.iter().copied().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min < MIN_RELATIVE_ENVELOPE * max {
            return Err(Error::ColaViolation(min / max.max(f64::MIN_POSITIVE)));
        }
        Ok(())
    }

    pub fn min_signal_len(&self) -> usize {
        if self.center {
            self.win_length.max(self.pad() + 1)
        } else {
            self.n_fft
        }
    }

    /// Frame count: every hop that fits in the padded signal; centred transforms
    /// add frames until the last window's support reaches the final sample.
    pub fn num_frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        let fitting = 1 + (padded - self.n_fft) / self.hop_length;
        if !self.center {
            return fitting;
        }
        let off = (self.n_fft - self.win_length) / 2;
        let reach = (self.pad() + len).saturating_sub(off + self.win_length);
        fitting.max(1 + reach.div_ceil(self.hop_length))
    }
}

/// Complex STFT coefficients, stored row-major as `F × T` (`data[f * T + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Vec<Complex64>,
    pub n_freqs: usize,
    pub n_frames: usize,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn zeros(config: StftConfig, n_frames: usize, sample_rate: u32) -> Self {
        let n_freqs = config.n_freqs();
        Self { data: vec![Complex64::new(0.0, 0.0); n_freqs * n_frames], n_freqs, n_frames, config, sample_rate }
    }

    pub fn with_data(&self, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self { data, ..self.clone() }
    }

    pub fn at(&self, f: usize, t: usize) -> Complex64 {
        self.data[f * self.n_frames + t]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    /// Column `t` as a frequency vector.
    pub fn frame(&self, t: usize) -> Vec<Complex64> {
        (0..self.n_freqs).map(|f| self.at(f, t)).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_freqs, self.n_frames)
    }
}

/// Whole-sample symmetric reflection (`x[-1] = x[1]`), periodic beyond one bounce.
#[inline]
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let j = i.rem_euclid(period);
    if j >= len as isize { (period - j) as usize } else { j as usize }
}

pub(crate) fn check_len(len: usize, cfg: &StftConfig) -> Result<()> {
    let min = cfg.min_signal_len();
    if len < min {
        return Err(Error::SignalTooShort { len, min });
    }
    Ok(())
}

/// Windowed DFT frames of the (reflect-padded when `center`) signal.
pub fn stft(signal: &[f64], cfg: &StftConfig, sample_rate: u32) -> Result<ComplexSpectrogram> {
    cfg.validate_geometry()?;
    check_len(signal.len(), cfg)?;
    let pad = cfg.pad() as isize;
    let n_frames = cfg.num_frames(signal.len());
    let f_bins = cfg.n_freqs();
    let window = cfg.window();
    let plan = fft::forward_plan(cfg.n_fft);
    let mut spec = ComplexSpectrogram::zeros(cfg.clone(), n_frames, sample_rate);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    for t in 0..n_frames {
        let start = (t * cfg.hop_length) as isize - pad;
        for (n, (b, w)) in buf.iter_mut().zip(&window).enumerate() {
            let x = signal[reflect(start + n as isize, signal.len())];
            *b = Complex64::new(x * w, 0.0);
        }
        plan.process(&mut buf);
        for f in 0..f_bins {
            spec.data[f * n_frames + t] = buf[f];
        }
    }
    Ok(spec)
}

/// Adjoint of [`stft`] as a real-linear map: given `∂L/∂Re + i·∂L/∂Im` per
/// coefficient, returns `∂L/∂signal`.
pub fn stft_adjoint(grad: &[Complex64], cfg: &StftConfig, n_frames: usize, len: usize) -> Vec<f64> {
    let pad = cfg.pad() as isize;
    let f_bins = cfg.n_freqs();
    let window = cfg.window();
    let plan = fft::inverse_plan(cfg.n_fft);
    let mut out = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    for t in 0..n_frames {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for f in 0..f_bins {
            buf[f] = grad[f * n_frames + t];
        }
        // Σ_f G_f e^{+2πifn/N}
        plan.process(&mut buf);
        let start = (t * cfg.hop_length) as isize - pad;
        for (n, (b, w)) in buf.iter().zip(&window).enumerate() {
            if *w != 0.0 {
                out[reflect(start + n as isize, len)] += b.re * w;
            }
        }
    }
    out
}

/// Weighted overlap-add inverse (window-squared normalization).
///
/// `length` defaults to `(T − 1)·hop` for centred transforms.
pub fn istft(spec: &ComplexSpectrogram, length: Option<usize>) -> Result<Vec<f64>> {
    let cfg = &spec.config;
    cfg.validate_geometry()?;
    cfg.check_overlap_add()?;
    if spec.n_freqs != cfg.n_freqs() {
        return Err(Error::DimensionMismatch(format!("{} bins for n_fft {}", spec.n_freqs, cfg.n_fft)));
    }
    let n = cfg.n_fft;
    let t_frames = spec.n_frames;
    let pad = cfg.pad();
    let total = n + cfg.hop_length * t_frames.saturating_sub(1);
    let window = cfg.window();
    let plan = fft::inverse_plan(n);
    let mut acc = vec![0.0; total];
    let mut env = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..t_frames {
        for f in 0..spec.n_freqs {
            buf[f] = spec.at(f, t);
        }
        // Hermitian completion; DC and (for even n) Nyquist are forced real.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        for f in spec.n_freqs..n {
            buf[f] = buf[n - f].conj();
        }
        plan.process(&mut buf);
        let start = t * cfg.hop_length;
        for (k, (b, w)) in buf.iter().zip(&window).enumerate() {
            acc[start + k] += b.re / n as f64 * w;
            env[start + k] += w * w;
        }
    }
    let peak = env.iter().copied().fold(0.0, f64::max);
    let floor = MIN_RELATIVE_ENVELOPE * peak;
    let default_len = if cfg.center { cfg.hop_length * t_frames.saturating_sub(1) } else { total };
    let out_len = length.unwrap_or(default_len);
    let mut out = vec![0.0; out_len];
    for (i, o) in out.iter_mut().enumerate() {
        let j = i + pad;
        if j < total && env[j] > floor {
            *o = acc[j] / env[j];
        }
    }
    Ok(out)
}
