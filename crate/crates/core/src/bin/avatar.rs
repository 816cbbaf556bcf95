use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use avatar_core::cli::{self, InferRequest, RunConfig};
use avatar_core::fusion::FusionConfig;

/// Audio-driven avatar toolkit.
#[derive(Parser)]
#[command(name = "avatar", version)]
struct Args {
    /// Run configuration (JSON). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic talking-face dataset.
    SynthData {
        /// Output directory (`paths.dataset`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training clips (`data.clips`).
        #[arg(long)]
        clips: Option<usize>,
        /// Dataset seed (`data.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the velocity network and write a checkpoint plus loss CSV.
    Train {
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Total optimizer steps (`train.steps`).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate a video from a reference image, audio and face boxes.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        emotion_ref: Option<PathBuf>,
        /// Pixel frames to generate (4k+1).
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        characters: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also dump decoded frames as PNG files.
        #[arg(long)]
        frames_dir: Option<PathBuf>,
    },
    /// Train all three injection mechanisms and compare them.
    Ablate,
    /// Print or write the long-video fusion schedule.
    TraceFusion {
        /// Timeline length in latent frames.
        #[arg(long)]
        l: usize,
        /// Segment length.
        #[arg(long)]
        f: usize,
        /// Shift per step.
        #[arg(long)]
        alpha: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lip-sync proxy: true vs shuffled audio on held-out clips.
    EvalSync {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score a freshly initialized model instead of a checkpoint.
        #[arg(long)]
        untrained: bool,
    },
}

fn load_config(args: &Args, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    Ok(match &args.config {
        Some(p) => RunConfig::load(p, &overrides)?,
        None => RunConfig::with_overrides(&overrides)?,
    })
}

fn run(args: Args) -> Result<()> {
    match &args.command {
        Command::SynthData { out, clips, seed } => {
            let mut extra = Vec::new();
            if let Some(o) = out {
                extra.push(format!("paths.dataset={}", serde_json::to_string(o)?));
            }
            if let Some(c) = clips {
                extra.push(format!("data.clips={c}"));
            }
            if let Some(s) = seed {
                extra.push(format!("data.seed={s}"));
            }
            let cfg = load_config(&args, &extra)?;
            let m = cli::cmd_synth_data(&cfg, &cfg.paths.dataset)?;
            println!("wrote {} clips to {}", m.clips.len(), cfg.paths.dataset.display());
        }
        Command::Train { resume, steps } => {
            let extra: Vec<String> = steps.iter().map(|s| format!("train.steps={s}")).collect();
            let cfg = load_config(&args, &extra)?;
            let r = cli::cmd_train(&cfg, *resume)?;
            let last = r.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained steps {}..{} (last loss {last:.4}); checkpoint {}",
                r.resumed_from,
                r.resumed_from + r.losses.len() as u64,
                r.checkpoint.display()
            );
        }
        Command::Infer {
            checkpoint,
            reference,
            audio,
            boxes,
            emotion_ref,
            frames,
            characters,
            out,
            frames_dir,
        } => {
            let cfg = load_config(&args, &[])?;
            let req = InferRequest {
                checkpoint: checkpoint.clone(),
                reference: reference.clone(),
                audio: audio.clone(),
                boxes: boxes.clone(),
                emotion_ref: emotion_ref.clone(),
                frames: *frames,
                characters: *characters,
                out: out.clone(),
                frames_dir: frames_dir.clone(),
            };
            let v = cli::cmd_infer(&cfg, &req)?;
            println!("wrote {} frames to {}", v.frames, out.display());
        }
        Command::Ablate => {
            let cfg = load_config(&args, &[])?;
            let report = cli::cmd_ablate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::TraceFusion { l, f, alpha, steps, out } => {
            let fc = FusionConfig {
                length: *l,
                segment: *f,
                offset: *alpha,
                steps: *steps,
            };
            match out {
                Some(path) => {
                    let plan = cli::cmd_trace_fusion(&fc, path)?;
                    println!("wrote {} segments to {}", plan.segments.len(), path.display());
                }
                None => print!("{}", avatar_core::fusion::plan_segments(&fc)?.to_csv()),
            }
        }
        Command::EvalSync { checkpoint, untrained } => {
            let cfg = load_config(&args, &[])?;
            let r = cli::cmd_eval_sync(&cfg, checkpoint.as_deref(), *untrained).context("eval-sync")?;
            println!(
                "true {:.4}  shuffled {:.4}  gap {:.4}",
                r.true_audio, r.shuffled_audio, r.gap
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<avatar_core::Error>()).map_or(1, cli::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
