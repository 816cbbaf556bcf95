//! Filterbank audio features.
//!
//! Each video frame owns `sample_rate / fps` samples. A Hann-windowed power
//! spectrum is pooled into ten mel-spaced triangular bands, log-compressed,
//! and spread into ten tokens of width `d_a`: token `b` is a set of
//! normalized Gaussian mixtures of the band log-energies centred on band `b`,
//! with a width that grows along the feature axis.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentio::{latent_frames, TIME_FACTOR};
use crate::numcore::Tensor;

pub const N_BANDS: usize = 10;
/// Tokens per video frame.
pub const AUDIO_TOKENS_PER_FRAME: usize = N_BANDS;
/// Tokens per latent frame after grouping four video frames.
pub const LATENT_AUDIO_TOKENS: usize = TIME_FACTOR * AUDIO_TOKENS_PER_FRAME;

const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioFeatureConfig {
    pub sample_rate: u32,
    pub fps: u32,
    pub d_audio: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        AudioFeatureConfig {
            sample_rate: 16_000,
            fps: 25,
            d_audio: 16,
            f_min: 80.0,
            f_max: 7_600.0,
        }
    }
}

impl AudioFeatureConfig {
    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / self.fps) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 || !self.sample_rate.is_multiple_of(self.fps) {
            return Err(Error::Config(format!(
                "audio.sample_rate {} must be a multiple of audio.fps {}",
                self.sample_rate, self.fps
            )));
        }
        if self.d_audio == 0 {
            return Err(Error::Config("audio.d_audio must be positive".into()));
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "audio band range {}..{} Hz invalid for rate {}",
                self.f_min, self.f_max, self.sample_rate
            )));
        }
        Ok(())
    }

    /// Log value reported for a band with no energy.
    pub fn log_floor(&self) -> f32 {
        LOG_FLOOR.ln() as f32
    }
}

/// Mono samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawAudio {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl RawAudio {
    pub fn silence(sample_rate: u32, len: usize) -> Self {
        RawAudio {
            sample_rate,
            samples: vec![0.0; len],
        }
    }

    /// Number of whole video frames covered at `fps`.
    pub fn frames(&self, fps: u32) -> usize {
        self.samples.len() / (self.sample_rate / fps) as usize
    }
}

/// Reads a 16-bit PCM mono WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<RawAudio> {
    let mut reader = hound::WavReader::open(path.as_ref()).map_err(|e| Error::Format(format!("wav: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "expected 16-bit PCM mono, got {} channels / {} bits",
            spec.channels, spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("wav: {e}")))?;
    Ok(RawAudio {
        sample_rate: spec.sample_rate,
        samples,
    })
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, audio: &RawAudio) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Format(format!("wav: {e}"));
    let mut w = hound::WavWriter::create(path.as_ref(), spec).map_err(wav_err)?;
    for &s in &audio.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn band_edges(cfg: &AudioFeatureConfig) -> [f64; N_BANDS + 2] {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let mut edges = [0.0; N_BANDS + 2];
    for (i, e) in edges.iter_mut().enumerate() {
        *e = mel_to_hz(lo + (hi - lo) * i as f64 / (N_BANDS + 1) as f64);
    }
    edges
}

/// Peak frequency of triangular band `b`.
pub fn band_center_hz(cfg: &AudioFeatureConfig, b: usize) -> f64 {
    band_edges(cfg)[b + 1]
}

fn triangle(edges: &[f64; N_BANDS + 2], b: usize, f: f64) -> f64 {
    let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
    if f <= lo || f >= hi {
        0.0
    } else if f <= mid {
        (f - lo) / (mid - lo)
    } else {
        (hi - f) / (hi - mid)
    }
}

/// `[frames][N_BANDS]` natural-log band energies.
pub fn band_log_energies(audio: &RawAudio, frames: usize, cfg: &AudioFeatureConfig) -> Result<Vec<[f64; N_BANDS]>> {
    cfg.validate()?;
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::Invalid(format!(
            "audio sampled at {} Hz, expected {}",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    let len = cfg.samples_per_frame();
    if audio.samples.len() < frames * len {
        return Err(Error::Invalid(format!(
            "audio has {} samples, {frames} frames need {}",
            audio.samples.len(),
            frames * len
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(len);
    let window: Vec<f64> = (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect();
    let edges = band_edges(cfg);
    let bin_hz = cfg.sample_rate as f64 / len as f64;
    let weights: Vec<[f64; N_BANDS]> = (0..=len / 2)
        .map(|k| std::array::from_fn(|b| triangle(&edges, b, k as f64 * bin_hz)))
        .collect();

    let mut buf = vec![Complex::new(0.0, 0.0); len];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let chunk = &audio.samples[f * len..(f + 1) * len];
        for ((c, &s), &w) in buf.iter_mut().zip(chunk).zip(&window) {
            *c = Complex::new(s as f64 * w, 0.0);
        }
        fft.process(&mut buf);
        let mut energy = [0.0; N_BANDS];
        for (k, w) in weights.iter().enumerate() {
            let p = buf[k].norm_sqr() / len as f64;
            for b in 0..N_BANDS {
                energy[b] += w[b] * p;
            }
        }
        out.push(energy.map(|e| (e + LOG_FLOOR).ln()));
    }
    Ok(out)
}

/// `[n′][10][d_a]` per-frame audio tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFrameFeatures {
    pub frames: usize,
    pub d_audio: usize,
    pub data: Tensor<f32>,
}

impl AudioFrameFeatures {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        match *data.shape() {
            [frames, AUDIO_TOKENS_PER_FRAME, d_audio] => Ok(AudioFrameFeatures { frames, d_audio, data }),
            _ => Err(Error::shape("audio_features", data.shape(), &[0, AUDIO_TOKENS_PER_FRAME, 0])),
        }
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = AUDIO_TOKENS_PER_FRAME * self.d_audio;
        &self.data.data()[f * n..(f + 1) * n]
    }
}

/// Mixing weights from band log-energies to token features, `[band][feature][band]`.
fn token_mixing(d_audio: usize) -> Vec<f64> {
    let mut m = vec![0.0; N_BANDS * d_audio * N_BANDS];
    for b in 0..N_BANDS {
        for j in 0..d_audio {
            let sigma = 0.35 + 0.6 * j as f64;
            let row = &mut m[(b * d_audio + j) * N_BANDS..(b * d_audio + j + 1) * N_BANDS];
            for (k, w) in row.iter_mut().enumerate() {
                let d = k as f64 - b as f64;
                *w = (-d * d / (2.0 * sigma * sigma)).exp();
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= total);
        }
    }
    m
}

/// Deterministic features for the first `frames` video frames of `audio`.
pub fn extract_audio_features(
    audio: &RawAudio,
    frames: usize,
    cfg: &AudioFeatureConfig,
) -> Result<AudioFrameFeatures> {
    let energies = band_log_energies(audio, frames, cfg)?;
    let d = cfg.d_audio;
    let mix = token_mixing(d);
    let mut data = Vec::with_capacity(frames * N_BANDS * d);
    for e in &energies {
        for b in 0..N_BANDS {
            for j in 0..d {
                let row = &mix[(b * d + j) * N_BANDS..(b * d + j + 1) * N_BANDS];
                data.push(row.iter().zip(e).map(|(w, v)| w * v).sum::<f64>() as f32);
            }
        }
    }
    AudioFrameFeatures::new(Tensor::new(vec![frames, N_BANDS, d], data)?)
}

/// `[(n+1)][40][d_a]` audio tokens aligned to latent frames; frame 0 belongs
/// to the identity frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedAudio {
    pub frames: usize,
    pub d_audio: usize,
    pub data: Tensor<f32>,
}

impl AlignedAudio {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        match *data.shape() {
            [frames, LATENT_AUDIO_TOKENS, d_audio] if frames > 0 => Ok(AlignedAudio { frames, d_audio, data }),
            _ => Err(Error::shape("aligned_audio", data.shape(), &[0, LATENT_AUDIO_TOKENS, 0])),
        }
    }

    pub fn zeros(frames: usize, d_audio: usize) -> Self {
        AlignedAudio {
            frames,
            d_audio,
            data: Tensor::zeros(&[frames, LATENT_AUDIO_TOKENS, d_audio]),
        }
    }

    pub fn frame_len(&self) -> usize {
        LATENT_AUDIO_TOKENS * self.d_audio
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data.data()[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data.data_mut()[f * n..(f + 1) * n]
    }

    /// `[(frames·40), d_a]` token matrix.
    pub fn tokens(&self) -> Tensor<f32> {
        self.data
            .clone()
            .reshape(&[self.frames * LATENT_AUDIO_TOKENS, self.d_audio])
            .expect("layout")
    }

    /// Segment audio: the identity group followed by the listed video frames
    /// (mask frame `i + 1`), indices taken modulo the video length.
    pub fn select_video_frames(&self, frames: &[usize]) -> AlignedAudio {
        let video = self.frames - 1;
        let mut data = self.frame(0).to_vec();
        for &f in frames {
            data.extend_from_slice(self.frame(1 + f % video.max(1)));
        }
        AlignedAudio::new(Tensor::new(vec![frames.len() + 1, LATENT_AUDIO_TOKENS, self.d_audio], data).expect("layout"))
            .expect("layout")
    }
}

/// Pads `(n+1)·4 − n′` copies of frame 0 in front, then concatenates each
/// group of four frames' tokens.
pub fn align_audio(g0: &AudioFrameFeatures) -> Result<AlignedAudio> {
    if g0.frames == 0 {
        return Err(Error::Invalid("no audio frames to align".into()));
    }
    let n = latent_frames(g0.frames);
    let padded = (n + 1) * TIME_FACTOR;
    let pad = padded - g0.frames;
    let mut data = Vec::with_capacity(padded * AUDIO_TOKENS_PER_FRAME * g0.d_audio);
    for p in 0..padded {
        data.extend_from_slice(g0.frame(p.saturating_sub(pad)));
    }
    AlignedAudio::new(Tensor::new(vec![n + 1, LATENT_AUDIO_TOKENS, g0.d_audio], data)?)
}
