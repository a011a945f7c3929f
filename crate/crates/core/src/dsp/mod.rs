//! Signal-processing front end.

pub mod amplitude;
pub mod mel;
pub mod stft;
pub mod whitening;

pub use amplitude::{amplitude_transform, AmplitudeTransform};
pub use mel::{hz_to_mel, mel_to_hz};
pub use stft::{istft, stft, stft_adjoint, ComplexSpectrogram, StftConfig};
pub use whitening::{fit_whitening, fit_whitening_frames, whiten, WhiteningStats};

pub const SAMPLE_RATE: u32 = 16_000;
