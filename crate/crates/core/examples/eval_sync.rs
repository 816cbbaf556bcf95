//! Lip-sync proxy: trains (or resumes) the toy model, then compares the
//! mouth/envelope correlation under true and shuffled audio against the
//! untrained model. Usage: eval_sync [steps] [work_dir]

use std::path::PathBuf;

use avatar_core::backbone::build_model;
use avatar_core::cli::{cmd_eval_sync, cmd_synth_data, cmd_train, DatasetManifest, RunConfig};

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
    let before = cmd_eval_sync(&cfg, None, true)?;
    let after = cmd_eval_sync(&cfg, None, false)?;
    println!("model: {} params", build_model::<f32>(&cfg.model_config(), 0)?.num_params());
    for (name, r) in [("untrained", &before), ("trained", &after)] {
        println!("{name:>9}: true {:+.3}  shuffled {:+.3}  gap {:+.3}", r.true_audio, r.shuffled_audio, r.gap);
    }
    for (i, [t, s]) in after.per_clip.iter().enumerate() {
        println!("  clip {i}: true {t:+.3} shuffled {s:+.3}");
    }
    Ok(())
}
