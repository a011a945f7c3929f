use std::rc::Rc;

use num_complex::Complex64;

use super::{ModelConfig, Scenario};
use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::{whiten, AmplitudeTransform, ComplexSpectrogram, WhiteningStats};
use crate::error::{Error, Result};
use crate::objectives::{complex_loss_on, mag_loss_on, spectrogram_tensor};

/// Network input for a TF model: optional amplitude compression and
/// whitening, then magnitudes (`C = 1`) or real/imaginary parts (`C = 2`).
pub fn model_input(noisy: &ComplexSpectrogram, cfg: &ModelConfig, stats: Option<&WhiteningStats>) -> Result<Tensor> {
    let mut s = if cfg.amplitude_transform { AmplitudeTransform::default().apply(noisy, false) } else { noisy.clone() };
    let stats = if cfg.whitening { stats } else { None };
    let (f, t) = s.shape();
    match cfg.in_channels {
        1 => {
            let mut mags = s.magnitudes();
            if let Some(st) = stats {
                if st.dim() != f {
                    return Err(Error::DimensionMismatch(format!("whitening has {} bins, spectrogram {f}", st.dim())));
                }
                mags = st.forward_matrix(&mags, t);
            }
            Tensor::new(vec![1, f, t], mags)
        }
        _ => {
            if let Some(st) = stats {
                s = whiten(&s, st, false)?;
            }
            Ok(spectrogram_tensor(&s))
        }
    }
}

fn check_out(tape: &Tape, out: Var, noisy: &ComplexSpectrogram, scenario: Scenario) -> Result<()> {
    let (f, t) = noisy.shape();
    let want = [scenario.out_channels(), f, t];
    if tape.shape(out) != want {
        return Err(Error::ShapeMismatch(format!("{scenario:?} expects model output {want:?}, got {:?}", tape.shape(out))));
    }
    Ok(())
}

/// Enhanced complex spectrogram `(2, F, T)` on the tape.
///
/// Magnitude scenarios reuse the noisy phase; complex masking applies the
/// bounded polar mask `tanh(|m|)·e^{i∠m}` to the noisy coefficients.
pub fn apply_scenario_on(tape: &mut Tape, noisy: &ComplexSpectrogram, out: Var, scenario: Scenario) -> Result<Var> {
    check_out(tape, out, noisy, scenario)?;
    let (f, t) = noisy.shape();
    let n = f * t;
    let (m, factor) = match scenario {
        Scenario::ComplexMasking => (tape.polar_mask(out)?, spectrogram_tensor(noisy).into_data()),
        _ => {
            let zeros = tape.constant(Tensor::zeros(&[1, f, t]));
            let m = tape.concat(out, zeros)?;
            let factor = if scenario == Scenario::MagRegression {
                // unit phasor of the noisy coefficients (angle 0 where they vanish)
                let ph: Vec<Complex64> = noisy.data.iter().map(|z| if z.norm() > 0.0 { z / z.norm() } else { Complex64::new(1.0, 0.0) }).collect();
                ph.iter().map(|z| z.re).chain(ph.iter().map(|z| z.im)).collect()
            } else {
                spectrogram_tensor(noisy).into_data()
            };
            (m, factor)
        }
    };
    debug_assert_eq!(factor.len(), 2 * n);
    tape.complex_mul_const(m, Rc::new(factor))
}

/// Plain-value form of [`apply_scenario_on`].
pub fn apply_scenario(noisy: &ComplexSpectrogram, model_out: &Tensor, scenario: Scenario) -> Result<ComplexSpectrogram> {
    let mut tape = Tape::new();
    let out = tape.constant(model_out.clone());
    let e = apply_scenario_on(&mut tape, noisy, out, scenario)?;
    let d = tape.value(e).data();
    let n = d.len() / 2;
    Ok(noisy.with_data((0..n).map(|i| Complex64::new(d[i], d[n + i])).collect()))
}

/// Training loss of a TF scenario for the enhanced spectrogram `enh (2, F, T)`:
/// the complex loss for complex masking, else the magnitude loss.
pub fn scenario_loss_on(tape: &mut Tape, enh: Var, clean: &ComplexSpectrogram, scenario: Scenario) -> Result<Var> {
    match scenario {
        Scenario::ComplexMasking => {
            let t = tape.constant(spectrogram_tensor(clean));
            complex_loss_on(tape, t, enh)
        }
        _ => {
            let m = tape.magnitude(enh)?;
            let t = tape.constant(Tensor::new(tape.shape(m).to_vec(), clean.magnitudes())?);
            mag_loss_on(tape, t, m)
        }
    }
}
