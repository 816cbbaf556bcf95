//! Audio features, latent-rate alignment and the face-aware audio adapter.

pub mod adapter;
pub mod features;

pub use adapter::{faa_apply, FaaParams};
pub use features::{
    align_audio, band_center_hz, band_log_energies, extract_audio_features, read_wav, write_wav, AlignedAudio,
    AudioFeatureConfig, AudioFrameFeatures, RawAudio, AUDIO_TOKENS_PER_FRAME, LATENT_AUDIO_TOKENS, N_BANDS,
};
