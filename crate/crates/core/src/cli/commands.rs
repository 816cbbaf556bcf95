use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{build_conditioning, load_split, read_boxes, video_tensor, write_clip, DatasetManifest, LoadedClip, Split};
use super::image::{dump_frames, read_png};
use super::metrics::{identity_distance, motion_energy, region_temporal_variance, sync_score};
use super::synth::{generate_clip, text_prompt};
use super::{hash_json, RunConfig};
use crate::audio::read_wav;
use crate::backbone::{build_model, ConditioningBundle, Model};
use crate::error::{Error, Result};
use crate::flow::{load_checkpoint, save_checkpoint, train_loop, TrainClip, TrainConfig};
use crate::fusion::{plan_segments, sample, FusionConfig, FusionPlan};
use crate::injection::Mechanism;
use crate::latentio::{decode_video, latent_frames, PixelImage, PixelVideo, TensorFile, VideoLatent, DEFAULT_SPATIAL};
use crate::numcore::{Optimizer, Scalar, SeededRng};

/// Writes `data.clips` training and `data.held_out` evaluation clips.
pub fn cmd_synth_data(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir)?;
    let hash = cfg.hash();
    let root = SeededRng::new(cfg.data.seed);
    let total = cfg.data.clips + cfg.data.held_out;
    let mut clips = Vec::with_capacity(total);
    for i in 0..total {
        let split = if i < cfg.data.clips { Split::Train } else { Split::Eval };
        let clip = generate_clip(&cfg.data.synth, &cfg.audio, &mut root.fork(i as u64))?;
        clips.push(write_clip(out_dir, &format!("clip_{i:04}"), split, &clip, &hash)?);
    }
    let manifest = DatasetManifest {
        config_hash: hash,
        width: cfg.data.synth.width,
        height: cfg.data.synth.height,
        frames: cfg.data.synth.frames,
        clips,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Loads a split as training clips.
pub fn load_train_clips(cfg: &RunConfig, split: Split) -> Result<Vec<TrainClip>> {
    let dir = &cfg.paths.dataset;
    let manifest = DatasetManifest::read(dir)?;
    load_split(dir, &manifest, split)?
        .iter()
        .map(|c| c.train_clip(&cfg.audio, DEFAULT_SPATIAL))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    /// Optimizer steps taken before this invocation.
    pub resumed_from: u64,
    /// Losses of the steps run by this invocation.
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains up to `train.steps` total steps, resuming from the run directory's
/// checkpoint when `resume` is set and one exists.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainReport> {
    let clips = load_train_clips(cfg, Split::Train)?;
    if clips.is_empty() {
        return Err(Error::Config("dataset has no training clips".into()));
    }
    let run_dir = &cfg.paths.run_dir;
    fs::create_dir_all(run_dir)?;
    let hash = cfg.hash();
    let ckpt = cfg.paths.checkpoint();
    let (mut model, mut opt) = if resume && ckpt.is_file() {
        let (m, o, meta) = load_checkpoint(&ckpt)?;
        if meta.model != cfg.model_config() {
            return Err(Error::Config("checkpoint was trained with a different model configuration".into()));
        }
        (m, o)
    } else {
        (build_model::<f32>(&cfg.model_config(), cfg.seed)?, Optimizer::new(cfg.train.optimizer.clone()))
    };
    let start = opt.steps_taken();

    let csv_path = cfg.paths.loss_csv();
    let mut csv = String::from("step,loss\n");
    if start > 0 {
        if let Ok(old) = fs::read_to_string(&csv_path) {
            for line in old.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < start) {
                    csv.push_str(line);
                    csv.push('\n');
                }
            }
        }
    }
    fs::write(
        run_dir.join("run.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "config_hash": hash, "config": cfg }))?,
    )?;

    let mut remaining = cfg.train.steps.saturating_sub(start);
    let mut losses = Vec::new();
    loop {
        let chunk = if cfg.checkpoint_every > 0 { remaining.min(cfg.checkpoint_every) } else { remaining };
        let tc = TrainConfig {
            steps: chunk,
            ..cfg.train.clone()
        };
        let result = train_loop(&mut model, &clips, &tc, &mut opt, |step, loss| {
            let _ = writeln!(csv, "{step},{loss}");
            losses.push(loss);
        });
        fs::write(&csv_path, &csv)?;
        result?;
        save_checkpoint(&ckpt, &model, &opt, &hash)?;
        remaining -= chunk;
        if remaining == 0 {
            break;
        }
    }
    Ok(TrainReport {
        config_hash: hash,
        resumed_from: start,
        losses,
        checkpoint: ckpt,
    })
}

/// Samples a video of `frames` latent frames from seeded noise and decodes it.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    cond: &ConditioningBundle,
    frames: usize,
    steps: usize,
    offset: usize,
    seed: u64,
) -> Result<(VideoLatent, PixelVideo)> {
    let c = &model.cfg;
    let shape = [frames, c.latent_height, c.latent_width, c.latent_channels];
    let noise = VideoLatent::new(
        frames,
        c.latent_width,
        c.latent_height,
        c.latent_channels,
        SeededRng::new(seed).normal_tensor(&shape, 1.0),
    )?;
    let z = sample(model, &noise, cond, steps, offset)?;
    if !z.data.all_finite() {
        return Err(Error::Numeric("sampling produced non-finite latents".into()));
    }
    let video = decode_video(&z, DEFAULT_SPATIAL)?;
    Ok((z, video))
}

#[derive(Clone, Debug, Default)]
pub struct InferRequest {
    /// Defaults to the run directory's checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub reference: PathBuf,
    pub audio: PathBuf,
    pub boxes: PathBuf,
    pub emotion_ref: Option<PathBuf>,
    /// Pixel frames to generate, `4k + 1`.
    pub frames: usize,
    /// Characters visible in the reference image.
    pub characters: usize,
    pub out: PathBuf,
    pub frames_dir: Option<PathBuf>,
}

/// Converts a decoded PNG to gray (`channels == 1`) or RGB, dropping alpha.
fn to_channels(img: PixelImage, channels: usize) -> Result<PixelImage> {
    let c = img.channels;
    let data: Vec<f32> = match (c, channels) {
        (a, b) if a == b => return Ok(img),
        (2, 1) | (3, 1) | (4, 1) => {
            let color = c.min(3);
            img.data
                .chunks(c)
                .map(|px| if color == 3 { (px[0] + px[1] + px[2]) / 3.0 } else { px[0] })
                .collect()
        }
        (1, 3) | (2, 3) => img.data.chunks(c).flat_map(|px| [px[0]; 3]).collect(),
        (4, 3) => img.data.chunks(4).flat_map(|px| [px[0], px[1], px[2]]).collect(),
        _ => return Err(Error::Invalid(format!("cannot convert a {c}-channel image to {channels} channels"))),
    };
    PixelImage::new(img.height, img.width, channels, data)
}

/// Generates a video from files and writes it as a tensor container.
pub fn cmd_infer(cfg: &RunConfig, req: &InferRequest) -> Result<PixelVideo> {
    let ckpt = req.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint());
    let (model, _, meta) = load_checkpoint(&ckpt)?;
    let channels = cfg.data.synth.channels;
    let reference = to_channels(read_png(&req.reference)?, channels)?;
    let emotion = req.emotion_ref.as_ref().map(|p| read_png(p).and_then(|i| to_channels(i, channels))).transpose()?;
    let audio = read_wav(&req.audio)?;
    let boxes = read_boxes(&req.boxes)?;
    if req.frames == 0 || !(req.frames - 1).is_multiple_of(crate::latentio::TIME_FACTOR) {
        return Err(Error::Invalid(format!("frame count {} must be 4k+1", req.frames)));
    }
    let have = audio.frames(cfg.audio.fps);
    if have < req.frames {
        return Err(Error::Invalid(format!("audio covers {have} frames, {} requested", req.frames)));
    }
    if boxes.len() < req.frames {
        return Err(Error::Invalid(format!("face boxes cover {} frames, {} requested", boxes.len(), req.frames)));
    }
    let cond = build_conditioning(
        &reference,
        &audio,
        &boxes[..req.frames],
        emotion.as_ref(),
        &text_prompt(req.characters.max(1)),
        req.frames,
        &cfg.audio,
        DEFAULT_SPATIAL,
    )?;
    let e = &cfg.eval;
    let (z, video) = generate(&model, &cond, latent_frames(req.frames), e.steps, e.offset, e.seed)?;
    let mut file = TensorFile::new();
    file.insert_f32("video", video_tensor(&video));
    crate::latentio::video_latent_to_file(&mut file, "latent", &z);
    file.insert_json(
        "meta",
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "checkpoint_config_hash": meta.config_hash,
            "frames": req.frames,
            "steps": e.steps,
            "offset": e.offset,
            "seed": e.seed,
        }),
    )?;
    if let Some(parent) = req.out.parent() {
        fs::create_dir_all(parent)?;
    }
    file.write(&req.out)?;
    if let Some(dir) = &req.frames_dir {
        dump_frames(dir, &video)?;
    }
    Ok(video)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub config_hash: String,
    /// Mean envelope/mouth correlation with the clip's own audio.
    pub true_audio: f64,
    /// Same, with the audio of the next held-out clip.
    pub shuffled_audio: f64,
    pub gap: f64,
    pub per_clip: Vec<[f64; 2]>,
}

/// Lip-sync proxy over `clips`: each clip is generated from the same noise
/// with its own audio and with the next clip's audio, and both videos are
/// scored against the clip's true envelope.
pub fn eval_sync<T: Scalar>(model: &Model<T>, clips: &[LoadedClip], cfg: &RunConfig) -> Result<SyncReport> {
    if clips.len() < 2 {
        return Err(Error::Invalid("the sync proxy needs at least two clips".into()));
    }
    let e = &cfg.eval;
    let mut per_clip = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let other = &clips[(i + 1) % clips.len()];
        let n = latent_frames(clip.video.frames);
        let seed = SeededRng::new(e.seed).fork(i as u64).seed();
        let mouth = clip.info.characters[clip.info.driven].mouth();
        let own = clip.conditioning(&cfg.audio, DEFAULT_SPATIAL)?;
        let swapped = build_conditioning(
            &clip.reference,
            &other.audio,
            &clip.boxes,
            Some(&clip.emotion_ref),
            &clip.info.text,
            clip.video.frames,
            &cfg.audio,
            DEFAULT_SPATIAL,
        )?;
        let (_, v_true) = generate(model, &own, n, e.steps, e.offset, seed)?;
        let (_, v_shuf) = generate(model, &swapped, n, e.steps, e.offset, seed)?;
        per_clip.push([sync_score(&v_true, mouth, &clip.envelope), sync_score(&v_shuf, mouth, &clip.envelope)]);
    }
    let k = per_clip.len() as f64;
    let true_audio = per_clip.iter().map(|p| p[0]).sum::<f64>() / k;
    let shuffled_audio = per_clip.iter().map(|p| p[1]).sum::<f64>() / k;
    Ok(SyncReport {
        config_hash: cfg.hash(),
        true_audio,
        shuffled_audio,
        gap: true_audio - shuffled_audio,
        per_clip,
    })
}

fn eval_clips(cfg: &RunConfig) -> Result<Vec<LoadedClip>> {
    let dir = &cfg.paths.dataset;
    let manifest = DatasetManifest::read(dir)?;
    let mut clips = load_split(dir, &manifest, Split::Eval)?;
    clips.truncate(cfg.eval.clips);
    Ok(clips)
}

/// Scores the checkpoint (or the untrained model when `untrained`) and
/// writes `eval_sync.json` into the run directory.
pub fn cmd_eval_sync(cfg: &RunConfig, checkpoint: Option<&Path>, untrained: bool) -> Result<SyncReport> {
    let clips = eval_clips(cfg)?;
    let model = if untrained {
        build_model::<f32>(&cfg.model_config(), cfg.seed)?
    } else {
        load_checkpoint(checkpoint.map_or_else(|| cfg.paths.checkpoint(), Path::to_path_buf))?.0
    };
    let report = eval_sync(&model, &clips, cfg)?;
    fs::create_dir_all(&cfg.paths.run_dir)?;
    fs::write(cfg.paths.run_dir.join("eval_sync.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Mouth activity of both characters under a mask on `driven`.
pub fn mouth_activity<T: Scalar>(
    model: &Model<T>,
    clip: &LoadedClip,
    driven: usize,
    cfg: &RunConfig,
    seed: u64,
) -> Result<[f64; 2]> {
    if clip.info.characters.len() != 2 {
        return Err(Error::Invalid("mask steering needs a two-character clip".into()));
    }
    let frames = clip.video.frames;
    let cond = build_conditioning(
        &clip.reference,
        &clip.audio,
        &clip.info.boxes_for(driven, frames),
        Some(&clip.emotion_ref),
        &clip.info.text,
        frames,
        &cfg.audio,
        DEFAULT_SPATIAL,
    )?;
    let (_, v) = generate(model, &cond, latent_frames(frames), cfg.eval.steps, cfg.eval.offset, seed)?;
    Ok([0, 1].map(|i| region_temporal_variance(&v, clip.info.characters[i].mouth())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringTrial {
    /// Mouth activity of characters 0 and 1 with the mask on character 0.
    pub mask_first: [f64; 2],
    /// Same with the mask on character 1.
    pub mask_second: [f64; 2],
    pub follows_mask: bool,
}

/// Generates each two-character clip twice from the same noise, with the
/// mask on either character, and checks that the more active mouth is the
/// masked one both times.
pub fn mask_steering<T: Scalar>(model: &Model<T>, clips: &[LoadedClip], cfg: &RunConfig) -> Result<Vec<SteeringTrial>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let seed = SeededRng::new(cfg.eval.seed).fork(1000 + i as u64).seed();
            let a = mouth_activity(model, clip, 0, cfg, seed)?;
            let b = mouth_activity(model, clip, 1, cfg, seed)?;
            Ok(SteeringTrial {
                mask_first: a,
                mask_second: b,
                follows_mask: a[0] > a[1] && b[1] > b[0],
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub mechanism: Mechanism,
    pub params: usize,
    /// Mean loss of the first and last ten steps.
    pub first_loss: f64,
    pub final_loss: f64,
    /// Per-step training loss.
    pub losses: Vec<f64>,
    /// Mean per-frame absolute pixel distance to the reference image.
    pub identity_distance: f64,
    /// Mean per-pixel temporal variance of generated videos.
    pub motion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub steps: u64,
    pub arms: Vec<ArmReport>,
}

fn window_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Trains one model per injection mechanism with identical seeds, data and
/// steps, then scores each on the held-out clips.
pub fn ablate(cfg: &RunConfig, train: &[TrainClip], eval: &[LoadedClip]) -> Result<AblationReport> {
    let mut arms = Vec::with_capacity(3);
    for mechanism in Mechanism::ALL {
        let mcfg = crate::backbone::ModelConfig {
            mechanism,
            ..cfg.model_config()
        };
        let mut model = build_model::<f32>(&mcfg, cfg.seed)?;
        let mut opt = Optimizer::new(cfg.train.optimizer.clone());
        let losses = train_loop(&mut model, train, &cfg.train, &mut opt, |_, _| {})?;
        let w = losses.len().min(10);
        let (mut ident, mut motion) = (0.0, 0.0);
        for (i, clip) in eval.iter().enumerate() {
            let cond = clip.conditioning(&cfg.audio, DEFAULT_SPATIAL)?;
            let seed = SeededRng::new(cfg.eval.seed).fork(i as u64).seed();
            let (_, v) = generate(&model, &cond, latent_frames(clip.video.frames), cfg.eval.steps, cfg.eval.offset, seed)?;
            ident += identity_distance(&v, &clip.reference);
            motion += motion_energy(&v);
        }
        let k = eval.len().max(1) as f64;
        arms.push(ArmReport {
            mechanism,
            params: model.num_params(),
            first_loss: window_mean(&losses[..w]),
            final_loss: window_mean(&losses[losses.len() - w..]),
            losses,
            identity_distance: ident / k,
            motion: motion / k,
        });
    }
    Ok(AblationReport {
        config_hash: cfg.hash(),
        steps: cfg.train.steps,
        arms,
    })
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    let train = load_train_clips(cfg, Split::Train)?;
    let eval = eval_clips(cfg)?;
    let report = ablate(cfg, &train, &eval)?;
    fs::create_dir_all(&cfg.paths.run_dir)?;
    fs::write(cfg.paths.run_dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Writes the fusion schedule CSV plus a `.meta.json` sidecar with the hash
/// of the fusion configuration.
pub fn cmd_trace_fusion(cfg: &FusionConfig, out: &Path) -> Result<FusionPlan> {
    let plan = plan_segments(cfg)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    crate::fusion::trace_to_file(&plan, out)?;
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".meta.json");
    fs::write(
        PathBuf::from(sidecar),
        serde_json::to_string_pretty(&serde_json::json!({ "config_hash": hash_json(cfg), "fusion": cfg }))?,
    )?;
    Ok(plan)
}
