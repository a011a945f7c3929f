//! Structured state-space (S4 / S4ND) speech enhancement.
//!
//! The crate is organised bottom-up:
//!
//! * [`ssm_kernel`] and [`ssm_nd`]: SSM discretization, kernels and convolution.
//! * [`dsp`]: STFT/iSTFT, amplitude transform, ZCA whitening, mel scale.
//! * [`autodiff`] and [`nn`]: a small reverse-mode tensor engine and the U-Net models.
//! * [`objectives`] and [`metrics`]: training losses and evaluation metrics.
//! * [`data`]: WAV I/O, SNR mixing, manifests and augmentation.
//! * [`train`]: Adam, checkpoints, the training loop, enhancement and benchmarks.

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod error;
pub mod fft;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod ssm_kernel;
pub mod ssm_nd;
pub mod train;

pub use error::{Error, Result};
