//! Training losses, each available on a [`Tape`] and as a plain function.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::{ComplexSpectrogram, StftConfig};
use crate::error::{Error, Result};

/// Floor applied to magnitudes inside every log.
pub const LOG_FLOOR: f64 = 1e-7;

/// Analysis settings of the multi-resolution STFT loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiResStftConfig {
    pub resolutions: Vec<StftConfig>,
}

impl Default for MultiResStftConfig {
    fn default() -> Self {
        let r = |n, w, h| StftConfig { n_fft: n, win_length: w, hop_length: h, center: true };
        Self { resolutions: vec![r(512, 240, 50), r(1024, 600, 120), r(2048, 1200, 240)] }
    }
}

impl MultiResStftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("multi-resolution STFT loss needs at least one setting".into()));
        }
        for r in &self.resolutions {
            r.validate_geometry()?;
        }
        Ok(())
    }

    pub fn min_signal_len(&self) -> usize {
        self.resolutions.iter().map(StftConfig::min_signal_len).max().unwrap_or(1)
    }
}

fn check_len(a: &Tape, x: Var, y: Var) -> Result<()> {
    if a.value(x).len() != a.value(y).len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", a.value(x).len(), a.value(y).len())));
    }
    Ok(())
}

/// Spectral convergence `‖S − Ŝ‖_F/‖S‖_F` plus `(1/T)·Σ|log S − log Ŝ|` over
/// STFT magnitudes, `T` the number of frames.
pub fn stft_loss_on(tape: &mut Tape, y: Var, y_hat: Var, cfg: &StftConfig) -> Result<Var> {
    check_len(tape, y, y_hat)?;
    let s = tape.stft(y, cfg)?;
    let s = tape.magnitude(s)?;
    let sh = tape.stft(y_hat, cfg)?;
    let sh = tape.magnitude(sh)?;
    let den = tape.norm(s);
    if tape.value(den).item() == 0.0 {
        return Err(Error::ZeroReference);
    }
    let d = tape.sub(s, sh)?;
    let num = tape.norm(d);
    let sc = tape.div(num, den)?;
    let frames = tape.shape(s)[1];
    let ls = tape.log_floor(s, LOG_FLOOR);
    let lh = tape.log_floor(sh, LOG_FLOOR);
    let dl = tape.sub(ls, lh)?;
    let dl = tape.abs(dl);
    let dl = tape.sum(dl);
    let mag = tape.scale(dl, 1.0 / frames as f64);
    tape.add(sc, mag)
}

/// `(1/T)·‖y − ŷ‖₁` plus the mean STFT loss over the resolutions.
pub fn time_domain_loss_on(tape: &mut Tape, y: Var, y_hat: Var, mr: &MultiResStftConfig) -> Result<Var> {
    mr.validate()?;
    check_len(tape, y, y_hat)?;
    let d = tape.sub(y, y_hat)?;
    let d = tape.abs(d);
    let mut total = tape.mean(d);
    let m = mr.resolutions.len() as f64;
    for cfg in &mr.resolutions {
        let l = stft_loss_on(tape, y, y_hat, cfg)?;
        let l = tape.scale(l, 1.0 / m);
        total = tape.add(total, l)?;
    }
    Ok(total)
}

/// Mean absolute difference of two magnitude maps.
pub fn mag_loss_on(tape: &mut Tape, s: Var, s_hat: Var) -> Result<Var> {
    let d = tape.sub(s, s_hat)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// `(Σ|ΔRe| + Σ|ΔIm|)/(TF)` plus the magnitude loss, for `(2, F, T)` inputs.
pub fn complex_loss_on(tape: &mut Tape, s: Var, s_hat: Var) -> Result<Var> {
    let d = tape.sub(s, s_hat)?;
    let d = tape.abs(d);
    let d = tape.sum(d);
    let bins = tape.value(s).len() / 2;
    let ri = tape.scale(d, 1.0 / bins as f64);
    let m = tape.magnitude(s)?;
    let mh = tape.magnitude(s_hat)?;
    let ml = mag_loss_on(tape, m, mh)?;
    tape.add(ri, ml)
}

fn eval2(a: Tensor, b: Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a), tape.constant(b));
    let l = f(&mut tape, x, y)?;
    Ok(tape.value(l).item())
}

fn wave(x: &[f64]) -> Tensor {
    Tensor::new(vec![x.len()], x.to_vec()).expect("1-D")
}

pub fn stft_loss(y: &[f64], y_hat: &[f64], cfg: &StftConfig) -> Result<f64> {
    eval2(wave(y), wave(y_hat), |t, a, b| stft_loss_on(t, a, b, cfg))
}

pub fn time_domain_loss(y: &[f64], y_hat: &[f64], mr: &MultiResStftConfig) -> Result<f64> {
    eval2(wave(y), wave(y_hat), |t, a, b| time_domain_loss_on(t, a, b, mr))
}

/// Magnitude maps of equal shape, any layout.
pub fn mag_loss(s: &[f64], s_hat: &[f64]) -> Result<f64> {
    if s.len() != s_hat.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} bins", s.len(), s_hat.len())));
    }
    eval2(wave(s), wave(s_hat), mag_loss_on)
}

pub fn spectrogram_tensor(spec: &ComplexSpectrogram) -> Tensor {
    let (f, t) = spec.shape();
    let mut data = Vec::with_capacity(2 * f * t);
    data.extend(spec.data.iter().map(|z| z.re));
    data.extend(spec.data.iter().map(|z| z.im));
    Tensor::new(vec![2, f, t], data).expect("spectrogram layout")
}

pub fn complex_loss(s: &ComplexSpectrogram, s_hat: &ComplexSpectrogram) -> Result<f64> {
    if s.shape() != s_hat.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", s.shape(), s_hat.shape())));
    }
    eval2(spectrogram_tensor(s), spectrogram_tensor(s_hat), complex_loss_on)
}
