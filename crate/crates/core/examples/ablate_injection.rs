//! Trains the three injection mechanisms on identical data and seeds and
//! prints the comparison report. Usage: ablate_injection [steps]

use avatar_core::cli::{ablate, cmd_synth_data, load_split, load_train_clips, DatasetManifest, RunConfig, Split};

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(Ok(60), |s| s.parse())?;
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.paths.dataset = dir.path().join("data");
    cfg.data.clips = 16;
    cfg.data.held_out = 4;
    cfg.train.steps = steps;
    cfg.eval.steps = 10;
    cmd_synth_data(&cfg, &cfg.paths.dataset)?;
    let train = load_train_clips(&cfg, Split::Train)?;
    let eval = load_split(&cfg.paths.dataset, &DatasetManifest::read(&cfg.paths.dataset)?, Split::Eval)?;
    let report = ablate(&cfg, &train, &eval)?;
    println!("mechanism  params   first loss  final loss  identity dist  motion");
    for a in &report.arms {
        println!(
            "{:>9}  {:>7}  {:>10.4}  {:>10.4}  {:>13.4}  {:.5}",
            a.mechanism.key(),
            a.params,
            a.first_loss,
            a.final_loss,
            a.identity_distance,
            a.motion
        );
    }
    Ok(())
}
