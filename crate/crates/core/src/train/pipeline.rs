use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::{istft, stft, ComplexSpectrogram, StftConfig, WhiteningStats, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::{log_spectral_distance, si_sdr, MetricRecord};
use crate::nn::{apply_scenario, apply_scenario_on, model_input, scenario_loss_on, Model};
use crate::objectives::{time_domain_loss_on, MultiResStftConfig};

/// Model plus everything needed to go from a noisy waveform to a loss or an
/// enhanced waveform.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub model: Model,
    pub whitening: Option<WhiteningStats>,
    pub loss_stft: MultiResStftConfig,
}

/// Enhanced waveform and the number of samples clamped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Enhanced {
    pub samples: Vec<f64>,
    pub clipped: usize,
}

impl Pipeline {
    fn stft_cfg(&self) -> &StftConfig {
        self.model.config.stft.as_ref().expect("TF variants carry an STFT config")
    }

    fn check_pair(noisy: &[f64], clean: &[f64]) -> Result<()> {
        if noisy.len() != clean.len() {
            return Err(Error::ShapeMismatch(format!("noisy has {} samples, clean {}", noisy.len(), clean.len())));
        }
        Ok(())
    }

    fn tf_input(&self, noisy: &[f64]) -> Result<(ComplexSpectrogram, Tensor)> {
        let spec = stft(noisy, self.stft_cfg(), SAMPLE_RATE)?;
        let x = model_input(&spec, &self.model.config, self.whitening.as_ref())?;
        Ok((spec, x))
    }

    /// Training loss of one noisy/clean pair on `tape` with bound parameters `p`.
    pub fn loss_on(&self, tape: &mut Tape, p: &[Var], noisy: &[f64], clean: &[f64]) -> Result<Var> {
        Self::check_pair(noisy, clean)?;
        let cfg = &self.model.config;
        if cfg.variant.is_time_domain() {
            let n = noisy.len();
            let x = tape.constant(Tensor::new(vec![1, n], noisy.to_vec())?);
            let y = self.model.forward(tape, p, x)?;
            let y = tape.reshape(y, &[n])?;
            let c = tape.constant(Tensor::new(vec![n], clean.to_vec())?);
            return time_domain_loss_on(tape, c, y, &self.loss_stft);
        }
        let (spec, input) = self.tf_input(noisy)?;
        let clean_spec = stft(clean, self.stft_cfg(), SAMPLE_RATE)?;
        let x = tape.constant(input);
        let out = self.model.forward(tape, p, x)?;
        let enh = apply_scenario_on(tape, &spec, out, cfg.scenario)?;
        scenario_loss_on(tape, enh, &clean_spec, cfg.scenario)
    }

    /// Loss value without gradients.
    pub fn loss(&self, noisy: &[f64], clean: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.model.bind_frozen(&mut tape);
        let l = self.loss_on(&mut tape, &p, noisy, clean)?;
        Ok(tape.value(l).item())
    }

    /// Unclamped enhancement; the output has the input's length.
    fn enhance_raw(&self, noisy: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        if cfg.variant.is_time_domain() {
            let y = self.model.infer(&Tensor::new(vec![1, noisy.len()], noisy.to_vec())?)?;
            return Ok(y.into_data());
        }
        // very short inputs are zero-padded up to one analysis window
        let min = self.stft_cfg().min_signal_len();
        let padded;
        let x = if noisy.len() < min {
            padded = noisy.iter().copied().chain(std::iter::repeat(0.0)).take(min).collect::<Vec<_>>();
            &padded
        } else {
            noisy
        };
        let (spec, input) = self.tf_input(x)?;
        let out = self.model.infer(&input)?;
        let enh = apply_scenario(&spec, &out, cfg.scenario)?;
        let mut y = istft(&enh, Some(x.len()))?;
        y.truncate(noisy.len());
        Ok(y)
    }

    /// Enhances a waveform; samples are clamped to `[-1, 1]` and counted.
    pub fn enhance(&self, noisy: &[f64]) -> Result<Enhanced> {
        if noisy.is_empty() {
            return Ok(Enhanced { samples: Vec::new(), clipped: 0 });
        }
        let mut samples = self.enhance_raw(noisy)?;
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("enhanced waveform".into()));
        }
        let mut clipped = 0;
        for v in &mut samples {
            if v.abs() > 1.0 {
                clipped += 1;
                *v = v.clamp(-1.0, 1.0);
            }
        }
        Ok(Enhanced { samples, clipped })
    }

    /// Enhances `noisy` and scores it against `clean`.
    pub fn evaluate(&self, id: &str, noisy: &[f64], clean: &[f64]) -> Result<MetricRecord> {
        Self::check_pair(noisy, clean)?;
        let e = self.enhance(noisy)?;
        let lsd_cfg = self.model.config.stft.clone().unwrap_or_else(StftConfig::fine);
        let mut r = MetricRecord::new(id);
        r.si_sdr_db = Some(si_sdr(clean, &e.samples)?);
        r.noisy_si_sdr_db = Some(si_sdr(clean, noisy)?);
        r.lsd_db = (clean.len() >= lsd_cfg.min_signal_len()).then(|| log_spectral_distance(clean, &e.samples, &lsd_cfg)).transpose()?;
        r.loss = Some(self.loss(noisy, clean)?);
        r.clipped = Some(e.clipped);
        Ok(r)
    }
}
