//! Two characters, one audio track: moving the face mask decides whose mouth
//! moves. Trains (or resumes) the toy model first.
//! Usage: mask_steering [steps] [work_dir]

use std::path::PathBuf;

use avatar_core::cli::{cmd_synth_data, cmd_train, load_split, mask_steering, DatasetManifest, RunConfig, Split};
use avatar_core::flow::load_checkpoint;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map_or(Ok(1200), |s| s.parse())?;
    let work = args.get(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("avatar_toy"));
    let mut cfg = RunConfig::default();
    cfg.train.steps = steps;
    cfg.paths.dataset = work.join("data");
    cfg.paths.run_dir = work.join("run");
    cfg.checkpoint_every = 100;
    if DatasetManifest::read(&cfg.paths.dataset).is_err() {
        cmd_synth_data(&cfg, &cfg.paths.dataset)?;
    }
    cmd_train(&cfg, true)?;

    let pairs = work.join("two_characters");
    let mut two = cfg.clone();
    two.data.synth.two_character_fraction = 1.0;
    two.data.clips = 1;
    two.data.seed = 99;
    if DatasetManifest::read(&pairs).is_err() {
        cmd_synth_data(&two, &pairs)?;
    }
    let clips = load_split(&pairs, &DatasetManifest::read(&pairs)?, Split::Eval)?;
    let (model, _, _) = load_checkpoint(cfg.paths.checkpoint())?;
    let trials = mask_steering(&model, &clips, &cfg)?;
    println!("mouth activity [left, right] with the mask on each character:");
    for (clip, t) in clips.iter().zip(&trials) {
        println!(
            "  {}: mask left {:.5} / {:.5}   mask right {:.5} / {:.5}   {}",
            clip.entry.name,
            t.mask_first[0],
            t.mask_first[1],
            t.mask_second[0],
            t.mask_second[1],
            if t.follows_mask { "follows" } else { "MISSED" }
        );
    }
    println!("{}/{} trials follow the mask", trials.iter().filter(|t| t.follows_mask).count(), trials.len());
    Ok(())
}
