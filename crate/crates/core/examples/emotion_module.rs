//! The emotion module starts as an exact no-op and only responds to the
//! emotion reference once its scale leaves zero.

use avatar_core::emotion::{aem_apply, encode_emotion_ref, AemParams};
use avatar_core::latentio::{PixelImage, DEFAULT_SPATIAL};
use avatar_core::numcore::{ParamStore, SeededRng, Tape, Tensor};

fn run(store: &ParamStore<f32>, aem: &AemParams, tokens: &Tensor<f32>, img: &PixelImage) -> anyhow::Result<Tensor<f32>> {
    let e = encode_emotion_ref(img, DEFAULT_SPATIAL)?;
    let mut tape = Tape::new();
    let (t, k) = (tape.input(tokens.clone())?, tape.input(e.tokens)?);
    let y = aem_apply(&mut tape, store, aem, t, k)?;
    Ok(tape.value(y).clone())
}

fn main() -> anyhow::Result<()> {
    let (d, c) = (64, 64);
    let mut rng = SeededRng::new(4);
    let mut store = ParamStore::<f32>::new();
    let aem = AemParams::new(&mut store, "aem", c, d, 4, &mut rng)?;
    let tokens: Tensor<f32> = rng.normal_tensor(&[48, d], 1.0);
    let calm = PixelImage::new(16, 16, 1, vec![0.45; 256])?;
    let excited = PixelImage::new(16, 16, 1, (0..256).map(|i| if i % 3 == 0 { 0.9 } else { 0.3 }).collect())?;
    for gamma in [0.0, 0.5] {
        store.set_value(aem.gamma, Tensor::full(&[1], gamma))?;
        let a = run(&store, &aem, &tokens, &calm)?;
        let b = run(&store, &aem, &tokens, &excited)?;
        println!(
            "gamma {gamma}: max |calm - excited| = {:.4}, max |calm - input| = {:.4}",
            a.max_abs_diff(&b)?,
            a.max_abs_diff(&tokens)?
        );
    }
    Ok(())
}
