//! Builds the three character-injection mechanisms on the same latents and
//! reports their parameter counts and token layouts.

use avatar_core::injection::{CharacterInjection, Mechanism, SegmentLabel};
use avatar_core::latentio::{ImageLatent, VideoLatent};
use avatar_core::numcore::{ParamStore, SeededRng};

fn main() -> anyhow::Result<()> {
    let (n, w, h, c, d) = (3, 4, 4, 64, 64);
    let mut rng = SeededRng::new(0);
    let video = VideoLatent::new(n, w, h, c, rng.normal_tensor(&[n, h, w, c], 1.0))?;
    let reference = ImageLatent {
        width: w,
        height: h,
        channels: c,
        data: rng.normal_tensor(&[h, w, c], 1.0),
    };
    for mechanism in Mechanism::ALL {
        let mut store = ParamStore::<f32>::new();
        let inj = CharacterInjection::build(&mut store, "inject", mechanism, c, d, &mut rng.fork(1))?;
        let seq = inj.token_sequence(&store, &reference, &video)?;
        let video_tokens = seq.labels.iter().filter(|&&l| l == SegmentLabel::Video).count();
        println!(
            "({mechanism}) {mechanism:?}: {} params, {} tokens = {video_tokens} video + {} reference, width {}",
            inj.num_params(),
            seq.len(),
            seq.ref_count(),
            seq.tokens.shape()[1]
        );
    }
    Ok(())
}
