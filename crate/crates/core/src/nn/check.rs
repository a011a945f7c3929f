//! Finite-difference check of a whole model at tiny scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{apply_scenario_on, model_input, scenario_loss_on, Model, ModelConfig, Variant};
use crate::autodiff::gradcheck::check_gradients;
use crate::autodiff::{GradcheckReport, Tape, Tensor, Var};
use crate::dsp::{stft, StftConfig, SAMPLE_RATE};
use crate::error::Result;
use crate::objectives::{time_domain_loss_on, MultiResStftConfig};

/// Number of parameter scalars compared against central differences.
pub const GRADCHECK_SAMPLES: usize = 50;

/// Loss settings small enough for a 64-sample waveform.
pub fn tiny_multires() -> MultiResStftConfig {
    MultiResStftConfig {
        resolutions: vec![
            StftConfig { n_fft: 32, win_length: 16, hop_length: 4, center: true },
            StftConfig { n_fft: 64, win_length: 32, hop_length: 8, center: true },
        ],
    }
}

/// Builds the tiny model for `variant`, a random noisy/clean pair and the
/// scenario's training loss, then compares tape gradients with central
/// differences on [`GRADCHECK_SAMPLES`] parameters.
pub fn gradcheck_model(variant: Variant, seed: u64) -> Result<GradcheckReport> {
    let cfg = ModelConfig::tiny(variant);
    gradcheck_config(&cfg, seed)
}

pub fn gradcheck_config(cfg: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    let model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let names = model.params.names().to_vec();
    let values = model.params.values().to_vec();
    if cfg.variant.is_time_domain() {
        let len = 64;
        let noisy: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
        let clean: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mr = tiny_multires();
        return check_gradients(
            &names,
            &values,
            |tape: &mut Tape, p: &[Var]| {
                let x = tape.constant(Tensor::new(vec![1, len], noisy.clone())?);
                let y = model.forward(tape, p, x)?;
                let y = tape.reshape(y, &[len])?;
                let c = tape.constant(Tensor::new(vec![len], clean.clone())?);
                time_domain_loss_on(tape, c, y, &mr)
            },
            GRADCHECK_SAMPLES,
            seed,
        );
    }
    let stft_cfg = cfg.stft.clone().expect("validated TF config");
    let frames = 8;
    let len = (frames - 1) * stft_cfg.hop_length;
    let noisy: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
    let clean: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
    let noisy_spec = stft(&noisy, &stft_cfg, SAMPLE_RATE)?;
    let clean_spec = stft(&clean, &stft_cfg, SAMPLE_RATE)?;
    let input = model_input(&noisy_spec, cfg, None)?;
    check_gradients(
        &names,
        &values,
        |tape: &mut Tape, p: &[Var]| {
            let x = tape.constant(input.clone());
            let out = model.forward(tape, p, x)?;
            let enh = apply_scenario_on(tape, &noisy_spec, out, cfg.scenario)?;
            scenario_loss_on(tape, enh, &clean_spec, cfg.scenario)
        },
        GRADCHECK_SAMPLES,
        seed,
    )
}
