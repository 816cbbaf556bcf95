//! Packs a random video into the latent grid and back, and shows the
//! frame-count arithmetic of the temporal packing.

use avatar_core::latentio::{decode_video, encode_video, latent_frames, pixel_frames, PixelVideo, DEFAULT_SPATIAL};
use avatar_core::numcore::SeededRng;

fn main() -> anyhow::Result<()> {
    let mut rng = SeededRng::new(1);
    for frames in [1, 5, 29, 129] {
        let (h, w, c) = (16, 16, 3);
        let data = (0..frames * h * w * c).map(|_| rng.uniform() as f32).collect();
        let video = PixelVideo::new(frames, h, w, c, data)?;
        let z = encode_video(&video, DEFAULT_SPATIAL)?;
        let back = decode_video(&z, DEFAULT_SPATIAL)?;
        println!(
            "{frames:>4} frames {h}x{w}x{c} -> latent [{}, {}, {}, {}] -> exact roundtrip: {}",
            z.frames,
            z.height,
            z.width,
            z.channels,
            back == video
        );
    }
    for n in [2, 8, 33] {
        println!("{n} latent frames decode to {} pixel frames (and back to {})", pixel_frames(n), latent_frames(pixel_frames(n)));
    }
    Ok(())
}
