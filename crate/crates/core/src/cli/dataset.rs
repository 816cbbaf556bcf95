//! On-disk dataset: a JSON manifest plus one directory per clip holding a
//! tensor container (video, reference, emotion reference, envelope, layout),
//! the driving WAV and per-frame face boxes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{ClipInfo, SynthClip};
use crate::audio::{align_audio, extract_audio_features, read_wav, write_wav, AudioFeatureConfig, RawAudio};
use crate::backbone::ConditioningBundle;
use crate::emotion::encode_emotion_ref;
use crate::error::{Error, Result};
use crate::flow::TrainClip;
use crate::latentio::{align_face_mask, encode_image, encode_video, FaceBox, PixelImage, PixelVideo, TensorFile};
use crate::numcore::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub name: String,
    pub split: Split,
    /// Paths relative to the dataset directory.
    pub video: String,
    pub audio: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other_audio: Option<String>,
    pub boxes: String,
    pub emotion: usize,
    pub identity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::write(dir.as_ref().join(MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Reads the manifest and checks that every referenced file exists.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("dataset manifest {}: {e}", path.display())))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("dataset manifest: {e}")))?;
        for c in &m.clips {
            for f in [Some(&c.video), Some(&c.audio), Some(&c.boxes), c.other_audio.as_ref()].into_iter().flatten() {
                if !dir.join(f).is_file() {
                    return Err(Error::Config(format!("clip {} references missing file {f}", c.name)));
                }
            }
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

fn image_tensor(img: &PixelImage) -> Tensor<f32> {
    Tensor::new(vec![img.height, img.width, img.channels], img.data.clone()).expect("layout")
}

fn tensor_image(t: &Tensor<f32>) -> Result<PixelImage> {
    match t.shape() {
        [h, w, c] => PixelImage::new(*h, *w, *c, t.data().to_vec()),
        s => Err(Error::Format(format!("expected an image tensor, got shape {s:?}"))),
    }
}

pub fn video_tensor(v: &PixelVideo) -> Tensor<f32> {
    Tensor::new(vec![v.frames, v.height, v.width, v.channels], v.data.clone()).expect("layout")
}

pub fn tensor_video(t: &Tensor<f32>) -> Result<PixelVideo> {
    match t.shape() {
        [f, h, w, c] => PixelVideo::new(*f, *h, *w, *c, t.data().to_vec()),
        s => Err(Error::Format(format!("expected a video tensor, got shape {s:?}"))),
    }
}

/// Writes one clip under `dir/name/` and returns its manifest entry.
pub fn write_clip(dir: &Path, name: &str, split: Split, clip: &SynthClip, config_hash: &str) -> Result<ClipEntry> {
    let clip_dir = dir.join(name);
    fs::create_dir_all(&clip_dir)?;
    let mut file = TensorFile::new();
    file.insert_f32("video", video_tensor(&clip.video));
    file.insert_f32("reference", image_tensor(&clip.reference));
    file.insert_f32("emotion_ref", image_tensor(&clip.emotion_ref));
    file.insert_f32("envelope", Tensor::new(vec![clip.envelope.len()], clip.envelope.clone())?);
    file.insert_json("info", &clip.info)?;
    file.insert_json("config_hash", &config_hash)?;
    file.write(clip_dir.join("clip.avdt"))?;
    write_wav(clip_dir.join("audio.wav"), &clip.audio)?;
    if let Some(other) = &clip.other_audio {
        write_wav(clip_dir.join("other_audio.wav"), other)?;
    }
    fs::write(clip_dir.join("boxes.json"), serde_json::to_string(&clip.boxes)?)?;
    Ok(ClipEntry {
        name: name.to_string(),
        split,
        video: format!("{name}/clip.avdt"),
        audio: format!("{name}/audio.wav"),
        other_audio: clip.other_audio.as_ref().map(|_| format!("{name}/other_audio.wav")),
        boxes: format!("{name}/boxes.json"),
        emotion: clip.info.emotion,
        identity: clip.info.identity(),
    })
}

/// A clip read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedClip {
    pub entry: ClipEntry,
    pub info: ClipInfo,
    pub video: PixelVideo,
    pub reference: PixelImage,
    pub emotion_ref: PixelImage,
    pub envelope: Vec<f32>,
    pub audio: RawAudio,
    pub boxes: Vec<Vec<FaceBox>>,
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<Vec<FaceBox>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Invalid(format!("face boxes {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

impl LoadedClip {
    pub fn load(dir: &Path, manifest: &DatasetManifest, entry: &ClipEntry) -> Result<Self> {
        let file = TensorFile::read(dir.join(&entry.video))?;
        let video = tensor_video(file.f32("video")?)?;
        if (video.frames, video.height, video.width) != (manifest.frames, manifest.height, manifest.width) {
            return Err(Error::Format(format!(
                "clip {} is {}x{}x{}, manifest says {}x{}x{}",
                entry.name, video.frames, video.height, video.width, manifest.frames, manifest.height, manifest.width
            )));
        }
        let boxes = read_boxes(dir.join(&entry.boxes))?;
        if boxes.len() != video.frames {
            return Err(Error::Format(format!("clip {} has boxes for {} of {} frames", entry.name, boxes.len(), video.frames)));
        }
        let envelope = file.f32("envelope")?.data().to_vec();
        if envelope.len() != video.frames {
            return Err(Error::Format(format!("clip {} envelope length {}", entry.name, envelope.len())));
        }
        Ok(LoadedClip {
            entry: entry.clone(),
            info: file.json("info")?,
            reference: tensor_image(file.f32("reference")?)?,
            emotion_ref: tensor_image(file.f32("emotion_ref")?)?,
            envelope,
            audio: read_wav(dir.join(&entry.audio))?,
            boxes,
            video,
        })
    }

    pub fn conditioning(&self, audio_cfg: &AudioFeatureConfig, spatial: usize) -> Result<ConditioningBundle> {
        build_conditioning(
            &self.reference,
            &self.audio,
            &self.boxes,
            Some(&self.emotion_ref),
            &self.info.text,
            self.video.frames,
            audio_cfg,
            spatial,
        )
    }

    pub fn train_clip(&self, audio_cfg: &AudioFeatureConfig, spatial: usize) -> Result<TrainClip> {
        Ok(TrainClip {
            latent: encode_video(&self.video, spatial)?,
            cond: self.conditioning(audio_cfg, spatial)?,
        })
    }
}

/// Assembles the conditioning for a clip of `frames` pixel frames.
#[allow(clippy::too_many_arguments)]
pub fn build_conditioning(
    reference: &PixelImage,
    audio: &RawAudio,
    boxes: &[Vec<FaceBox>],
    emotion_ref: Option<&PixelImage>,
    text: &[usize],
    frames: usize,
    audio_cfg: &AudioFeatureConfig,
    spatial: usize,
) -> Result<ConditioningBundle> {
    if audio.sample_rate != audio_cfg.sample_rate {
        return Err(Error::Invalid(format!(
            "audio sampled at {} Hz, features expect {} Hz",
            audio.sample_rate, audio_cfg.sample_rate
        )));
    }
    let features = extract_audio_features(audio, frames, audio_cfg)?;
    Ok(ConditioningBundle {
        reference: encode_image(reference, spatial)?,
        audio: align_audio(&features)?,
        mask: align_face_mask(boxes, frames, reference.width, reference.height, spatial)?,
        emotion: emotion_ref.map(|e| encode_emotion_ref(e, spatial)).transpose()?,
        text: text.to_vec(),
        t: 0.0,
    })
}

/// Loads every clip of a split.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedClip>> {
    manifest.split(split).map(|e| LoadedClip::load(dir, manifest, e)).collect()
}

