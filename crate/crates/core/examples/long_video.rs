//! Generates a timeline longer than one model call with position-shift
//! fusion. Uses the toy checkpoint when present, else a fresh model.
//! Usage: long_video [pixel_frames] [work_dir]

use std::path::PathBuf;

use avatar_core::backbone::build_model;
use avatar_core::cli::dataset::build_conditioning;
use avatar_core::cli::metrics::sync_score;
use avatar_core::cli::synth::{generate_clip, SynthConfig};
use avatar_core::cli::{generate, RunConfig};
use avatar_core::flow::load_checkpoint;
use avatar_core::latentio::{latent_frames, DEFAULT_SPATIAL};
use avatar_core::numcore::SeededRng;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let frames: usize = args.first().map_or(Ok(61), |s| s.parse())?;
    let work = args.get(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("avatar_toy"));
    let mut cfg = RunConfig::default();
    cfg.paths.run_dir = work.join("run");
    let model = match load_checkpoint(cfg.paths.checkpoint()) {
        Ok((m, _, meta)) => {
            println!("checkpoint at step {}", meta.step);
            m
        }
        Err(_) => {
            println!("no checkpoint under {}, using an untrained model", work.display());
            build_model(&cfg.model_config(), cfg.seed)?
        }
    };
    let synth = SynthConfig {
        frames,
        two_character_fraction: 0.0,
        ..cfg.data.synth
    };
    let clip = generate_clip(&synth, &cfg.audio, &mut SeededRng::new(5))?;
    let cond = build_conditioning(
        &clip.reference,
        &clip.audio,
        &clip.boxes,
        Some(&clip.emotion_ref),
        &clip.info.text,
        frames,
        &cfg.audio,
        DEFAULT_SPATIAL,
    )?;
    let n = latent_frames(frames);
    println!("{frames} frames -> {n} latent frames, model segment {}", model.cfg.video_frames());
    let (_, video) = generate(&model, &cond, n, cfg.eval.steps, cfg.eval.offset, 0)?;
    let mouth = clip.info.characters[0].mouth();
    println!("sync score over the whole timeline: {:+.3}", sync_score(&video, mouth, &clip.envelope));
    Ok(())
}
