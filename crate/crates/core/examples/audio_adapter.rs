//! Extracts filterbank features from a synthetic tone, aligns them to latent
//! frames and runs the face-aware audio adapter with a half-open face mask.

use avatar_core::audio::{align_audio, extract_audio_features, faa_apply, AudioFeatureConfig, FaaParams, RawAudio};
use avatar_core::numcore::{ParamStore, SeededRng, Tape, Tensor};

fn main() -> anyhow::Result<()> {
    let cfg = AudioFeatureConfig::default();
    let frames = 29;
    let n = cfg.samples_per_frame() * frames;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / cfg.sample_rate as f64;
            let env = if (i / cfg.samples_per_frame()) % 8 < 4 { 0.6 } else { 0.05 };
            (env * (2.0 * std::f64::consts::PI * 440.0 * t).sin()) as f32
        })
        .collect();
    let audio = RawAudio {
        sample_rate: cfg.sample_rate,
        samples,
    };
    let features = extract_audio_features(&audio, frames, &cfg)?;
    let aligned = align_audio(&features)?;
    println!("features {:?} -> aligned {:?}", features.data.shape(), aligned.data.shape());

    let (cells, d) = (16, 64);
    let rows = aligned.frames * cells;
    let mut rng = SeededRng::new(2);
    let mut store = ParamStore::<f32>::new();
    let faa = FaaParams::new(&mut store, "faa", d, cfg.d_audio, 4, 1.0, &mut rng)?;
    let tokens: Tensor<f32> = rng.normal_tensor(&[rows, d], 1.0);
    // left half of every latent frame is face
    let mask = Tensor::from_fn(&[rows], |r| if r % 4 < 2 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let (t, a, m) = (tape.input(tokens.clone())?, tape.input(aligned.tokens())?, tape.input(mask.clone())?);
    let y = faa_apply(&mut tape, &store, &faa, t, a, m, aligned.frames)?;
    let out = tape.value(y);
    let changed = |r: usize| out.data()[r * d..(r + 1) * d] != tokens.data()[r * d..(r + 1) * d];
    let (open, closed): (Vec<usize>, Vec<usize>) = (0..rows).partition(|&r| mask.data()[r] == 1.0);
    println!(
        "changed tokens: {}/{} inside the mask, {}/{} outside",
        open.iter().filter(|&&r| changed(r)).count(),
        open.len(),
        closed.iter().filter(|&&r| changed(r)).count(),
        closed.len()
    );
    Ok(())
}
