//! Trains the default model on a freshly synthesized dataset and prints the
//! loss curve. Usage: train_toy [steps] [work_dir]

use std::path::PathBuf;

use avatar_core::cli::{cmd_synth_data, cmd_train, RunConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map_or(Ok(200), |s| s.parse())?;
    let work = args.get(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("avatar_toy"));
    let mut cfg = RunConfig::default();
    cfg.train.steps = steps;
    cfg.paths.dataset = work.join("data");
    cfg.paths.run_dir = work.join("run");
    cfg.checkpoint_every = 100;
    cmd_synth_data(&cfg, &cfg.paths.dataset)?;
    let report = cmd_train(&cfg, true)?;
    for (i, chunk) in report.losses.chunks(20).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>4}..{:<4} mean loss {mean:.4}", report.resumed_from as usize + 20 * i, report.resumed_from as usize + 20 * i + chunk.len());
    }
    println!("checkpoint {} (config {})", report.checkpoint.display(), &report.config_hash[..12]);
    Ok(())
}
