//! Synthetic talking-face clips.
//!
//! Each character is an 8×8 face whose lower half is the mouth box. Inside
//! the mouth box a 6×2 opening darkens by `0.9·sqrt(env)`, so the per-frame
//! pixel variance of the mouth box is proportional to the audio envelope.
//! The envelope is constant over each group of four frames that the packing
//! VAE folds into one latent frame. Audio is the envelope times a tone
//! whose pitch depends on the identity.
//!
//! Two-character clips have one speaking character (whose face boxes form
//! the mask and whose track is the clip audio) and one silent listener.

use serde::{Deserialize, Serialize};

use crate::audio::{band_center_hz, AudioFeatureConfig, RawAudio, N_BANDS};
use crate::error::{Error, Result};
use crate::latentio::{FaceBox, PixelImage, PixelVideo, TIME_FACTOR};
use crate::numcore::SeededRng;

use super::metrics::{mouth_box_variance, pearson};

pub const FACE_SIZE: usize = 8;
pub const MOUTH_HEIGHT: usize = 4;
const BACKGROUND: f32 = 0.1;
const OPENING: f32 = 0.9;
const TONE_AMPLITUDE: f32 = 0.5;
const LEVELS: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

const PALETTE: [[f32; 3]; 8] = [
    [0.80, 0.55, 0.40],
    [0.45, 0.70, 0.45],
    [0.40, 0.50, 0.80],
    [0.75, 0.75, 0.40],
    [0.70, 0.40, 0.70],
    [0.40, 0.75, 0.75],
    [0.60, 0.60, 0.60],
    [0.80, 0.45, 0.55],
];
const GRAYS: [f32; 8] = [0.35, 0.42, 0.49, 0.56, 0.63, 0.70, 0.77, 0.84];

const TINTS: [[f32; 3]; 4] = [[0.0, 0.0, 0.0], [0.15, 0.0, -0.1], [-0.1, 0.0, 0.15], [0.0, 0.15, -0.05]];
const GRAY_TINTS: [f32; 4] = [0.0, 0.1, -0.1, 0.05];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Pixel frames per clip, `4k + 1`.
    pub frames: usize,
    pub two_character_fraction: f64,
    pub silent_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 16,
            height: 16,
            channels: 1,
            frames: 29,
            two_character_fraction: 0.5,
            silent_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || !(self.frames - 1).is_multiple_of(TIME_FACTOR) {
            return Err(Error::Config(format!("synthetic clips need 4k+1 frames, got {}", self.frames)));
        }
        if self.width < 2 * FACE_SIZE || self.height < FACE_SIZE || !self.width.is_multiple_of(4) || !self.height.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "synthetic frames must be multiples of 4 and fit two {FACE_SIZE}px faces, got {}x{}",
                self.width, self.height
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("synthetic clips are gray or RGB, got {} channels", self.channels)));
        }
        Ok(())
    }
}

/// One rendered face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Character {
    pub identity: usize,
    pub face: FaceBox,
}

impl Character {
    pub fn color(&self, channels: usize) -> Vec<f32> {
        let i = self.identity % PALETTE.len();
        if channels == 1 {
            vec![GRAYS[i]]
        } else {
            PALETTE[i].to_vec()
        }
    }

    /// Odd identities have clipped upper face corners.
    pub fn clipped_corners(&self) -> bool {
        self.identity % 2 == 1
    }

    /// Lower half of the face.
    pub fn mouth(&self) -> FaceBox {
        let f = self.face;
        FaceBox::new(f.x0, f.y0 + FACE_SIZE - MOUTH_HEIGHT, f.x1, f.y1)
    }

    /// Tone frequency of this identity's voice.
    pub fn pitch(&self, audio: &AudioFeatureConfig) -> f64 {
        band_center_hz(audio, 2 + self.identity % (N_BANDS - 3))
    }
}

pub fn tint(emotion: usize, channels: usize) -> Vec<f32> {
    let e = emotion % TINTS.len();
    if channels == 1 {
        vec![GRAY_TINTS[e]]
    } else {
        TINTS[e].to_vec()
    }
}

/// Renders characters with per-character per-frame envelopes.
pub fn render(cfg: &SynthConfig, characters: &[Character], emotion: usize, envelopes: &[Vec<f32>]) -> PixelVideo {
    let nc = cfg.channels;
    let mut v = PixelVideo::new(
        cfg.frames,
        cfg.height,
        cfg.width,
        nc,
        vec![BACKGROUND; cfg.frames * cfg.height * cfg.width * nc],
    )
    .expect("layout");
    let tint = tint(emotion, nc);
    for f in 0..cfg.frames {
        let frame = v.frame_mut(f);
        for (ch, env) in characters.iter().zip(envelopes) {
            let base: Vec<f32> = ch.color(nc).iter().zip(&tint).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect();
            let open = 1.0 - OPENING * env[f].max(0.0).sqrt();
            let (m, b) = (ch.mouth(), ch.face);
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    let corner = (x == b.x0 || x == b.x1 - 1) && y == b.y0;
                    if corner && ch.clipped_corners() {
                        continue;
                    }
                    let inner = x > m.x0 && x < m.x1 - 1 && y > m.y0 && y < m.y1 - 1;
                    for c in 0..nc {
                        frame[(y * cfg.width + x) * nc + c] = if inner { base[c] * open } else { base[c] };
                    }
                }
            }
        }
    }
    v
}

/// Closed-mouth, untinted rendering used as the character reference.
pub fn reference_image(cfg: &SynthConfig, characters: &[Character]) -> PixelImage {
    let one = SynthConfig { frames: 1, ..*cfg };
    let v = render(&one, characters, 0, &vec![vec![0.0]; characters.len()]);
    PixelImage::new(cfg.height, cfg.width, cfg.channels, v.data).expect("layout")
}

/// Uniform image in the emotion's tint.
pub fn emotion_image(cfg: &SynthConfig, emotion: usize) -> PixelImage {
    let t = tint(emotion, cfg.channels);
    let data = (0..cfg.height * cfg.width).flat_map(|_| t.iter().map(|c| 0.5 + c)).collect();
    PixelImage::new(cfg.height, cfg.width, cfg.channels, data).expect("layout")
}

/// Piecewise-constant envelope over the packing groups, at least two levels.
pub fn random_envelope(frames: usize, rng: &mut SeededRng) -> Vec<f32> {
    let groups = frames / TIME_FACTOR + 1;
    loop {
        let levels: Vec<f32> = (0..groups).map(|_| LEVELS[rng.below(LEVELS.len())]).collect();
        if levels.iter().any(|&l| l != levels[0]) {
            return (0..frames).map(|f| levels[f.div_ceil(TIME_FACTOR)]).collect();
        }
    }
}

/// Envelope times a phase-continuous tone.
pub fn synth_audio(envelope: &[f32], pitch: f64, audio: &AudioFeatureConfig) -> RawAudio {
    let per_frame = audio.samples_per_frame();
    let rate = audio.sample_rate as f64;
    let samples = (0..envelope.len() * per_frame)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * pitch * i as f64 / rate;
            TONE_AMPLITUDE * envelope[i / per_frame] * phase.sin() as f32
        })
        .collect();
    RawAudio {
        sample_rate: audio.sample_rate,
        samples,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipInfo {
    pub characters: Vec<Character>,
    /// Index of the speaking character.
    pub driven: usize,
    pub emotion: usize,
    pub text: Vec<usize>,
}

impl ClipInfo {
    pub fn identity(&self) -> usize {
        self.characters[self.driven].identity
    }

    /// Per-frame mask boxes covering character `who`.
    pub fn boxes_for(&self, who: usize, frames: usize) -> Vec<Vec<FaceBox>> {
        vec![vec![self.characters[who].face]; frames]
    }
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub info: ClipInfo,
    pub video: PixelVideo,
    pub audio: RawAudio,
    /// The listener's (silent) track in two-character clips.
    pub other_audio: Option<RawAudio>,
    pub envelope: Vec<f32>,
    pub boxes: Vec<Vec<FaceBox>>,
    pub reference: PixelImage,
    pub emotion_ref: PixelImage,
}

pub fn text_prompt(n_characters: usize) -> Vec<usize> {
    vec![n_characters - 1, 2, 3, 4]
}

fn grid_positions(limit: usize) -> Vec<usize> {
    (0..=limit - FACE_SIZE).step_by(4).collect()
}

pub fn generate_clip(cfg: &SynthConfig, audio_cfg: &AudioFeatureConfig, rng: &mut SeededRng) -> Result<SynthClip> {
    cfg.validate()?;
    let two = rng.uniform() < cfg.two_character_fraction;
    let silent = rng.uniform() < cfg.silent_fraction;
    let ys = grid_positions(cfg.height);
    let characters: Vec<Character> = if two {
        let a = rng.below(PALETTE.len());
        let b = (a + 1 + rng.below(PALETTE.len() - 1)) % PALETTE.len();
        let xb = cfg.width - FACE_SIZE;
        vec![
            Character {
                identity: a,
                face: face_at(0, ys[rng.below(ys.len())]),
            },
            Character {
                identity: b,
                face: face_at(xb - xb % 4, ys[rng.below(ys.len())]),
            },
        ]
    } else {
        let xs = grid_positions(cfg.width);
        vec![Character {
            identity: rng.below(PALETTE.len()),
            face: face_at(xs[rng.below(xs.len())], ys[rng.below(ys.len())]),
        }]
    };
    let driven = rng.below(characters.len());
    let emotion = rng.below(TINTS.len());
    let envelope = if silent {
        vec![0.0; cfg.frames]
    } else {
        random_envelope(cfg.frames, rng)
    };
    let envelopes: Vec<Vec<f32>> = (0..characters.len())
        .map(|i| if i == driven { envelope.clone() } else { vec![0.0; cfg.frames] })
        .collect();
    let info = ClipInfo {
        text: text_prompt(characters.len()),
        characters,
        driven,
        emotion,
    };
    let video = render(cfg, &info.characters, emotion, &envelopes);
    let audio = synth_audio(&envelope, info.characters[driven].pitch(audio_cfg), audio_cfg);
    let other_audio = two.then(|| RawAudio::silence(audio_cfg.sample_rate, audio.samples.len()));
    let clip = SynthClip {
        boxes: info.boxes_for(driven, cfg.frames),
        reference: reference_image(cfg, &info.characters),
        emotion_ref: emotion_image(cfg, emotion),
        info,
        video,
        audio,
        other_audio,
        envelope,
    };
    self_check(&clip)?;
    Ok(clip)
}

fn face_at(x0: usize, y0: usize) -> FaceBox {
    FaceBox::new(x0, y0, x0 + FACE_SIZE, y0 + FACE_SIZE)
}

/// Envelope vs mouth-box variance correlation must be at least 0.95
/// (clips with a constant envelope must have a constant mouth).
pub fn self_check(clip: &SynthClip) -> Result<()> {
    let mouth = clip.info.characters[clip.info.driven].mouth();
    let var = mouth_box_variance(&clip.video, mouth);
    let env: Vec<f64> = clip.envelope.iter().map(|&e| e as f64).collect();
    if env.iter().all(|&e| e == env[0]) {
        if var.iter().any(|&v| (v - var[0]).abs() > 1e-12) {
            return Err(Error::Numeric("silent clip has a moving mouth".into()));
        }
        return Ok(());
    }
    let r = pearson(&env, &var);
    if !(r >= 0.95) {
        return Err(Error::Numeric(format!("generated clip fails its sync self-check (r = {r:.3})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        let a = AudioFeatureConfig::default();
        let x = generate_clip(&cfg, &a, &mut SeededRng::new(3)).unwrap();
        let y = generate_clip(&cfg, &a, &mut SeededRng::new(3)).unwrap();
        assert_eq!(x.video, y.video);
        assert_eq!(x.audio, y.audio);
        assert_eq!(x.info, y.info);
    }

    #[test]
    fn silent_clip_has_constant_mouth() {
        let cfg = SynthConfig {
            silent_fraction: 1.0,
            ..SynthConfig::default()
        };
        let clip = generate_clip(&cfg, &AudioFeatureConfig::default(), &mut SeededRng::new(4)).unwrap();
        let m = clip.info.characters[clip.info.driven].mouth();
        let f0: Vec<f32> = (m.y0..m.y1).flat_map(|y| (m.x0..m.x1).map(move |x| (y, x))).map(|(y, x)| clip.video.pixel(0, y, x, 0)).collect();
        for f in 1..cfg.frames {
            let ff: Vec<f32> = (m.y0..m.y1).flat_map(|y| (m.x0..m.x1).map(move |x| (y, x))).map(|(y, x)| clip.video.pixel(f, y, x, 0)).collect();
            assert_eq!(f0, ff);
        }
        assert!(clip.audio.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn many_clips_pass_self_check() {
        let cfg = SynthConfig::default();
        let a = AudioFeatureConfig::default();
        let mut rng = SeededRng::new(5);
        let mut two = 0;
        for _ in 0..40 {
            let clip = generate_clip(&cfg, &a, &mut rng).unwrap();
            let env = &clip.envelope;
            // constant within each packing group
            for f in 1..cfg.frames {
                assert_eq!(env[f], env[4 * f.div_ceil(4)]);
            }
            two += (clip.info.characters.len() == 2) as usize;
            assert!(clip.boxes.iter().all(|b| b[0] == clip.info.characters[clip.info.driven].face));
        }
        assert!(two > 5 && two < 35);
    }

    #[test]
    fn listener_mouth_stays_closed() {
        let cfg = SynthConfig {
            two_character_fraction: 1.0,
            ..SynthConfig::default()
        };
        let clip = generate_clip(&cfg, &AudioFeatureConfig::default(), &mut SeededRng::new(6)).unwrap();
        let listener = clip.info.characters[1 - clip.info.driven].mouth();
        let v = mouth_box_variance(&clip.video, listener);
        assert!(v.iter().all(|&x| (x - v[0]).abs() < 1e-12));
        assert!(clip.other_audio.as_ref().unwrap().samples.iter().all(|&s| s == 0.0));
    }
}
