//! Writes a small synthetic talking-face dataset and dumps one clip as PNG
//! frames. Usage: synth_dataset [out_dir] [clips]

use std::path::PathBuf;

use avatar_core::cli::image::dump_frames;
use avatar_core::cli::{cmd_synth_data, load_split, DatasetManifest, RunConfig, Split};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("synth_data", String::as_str));
    let clips = args.get(1).map_or(Ok(8), |s| s.parse())?;
    let cfg = RunConfig::with_overrides(&[format!("data.clips={clips}"), "data.held_out=2".into()])?;
    let manifest = cmd_synth_data(&cfg, &out)?;
    println!("{} clips ({}x{}, {} frames) in {}", manifest.clips.len(), manifest.width, manifest.height, manifest.frames, out.display());
    let manifest = DatasetManifest::read(&out)?;
    let first = &load_split(&out, &manifest, Split::Train)?[0];
    println!(
        "{}: {} character(s), emotion {}, envelope {:?}",
        first.entry.name,
        first.info.characters.len(),
        first.info.emotion,
        first.envelope
    );
    dump_frames(out.join("preview"), &first.video)?;
    println!("frames of {} written to {}", first.entry.name, out.join("preview").display());
    Ok(())
}
