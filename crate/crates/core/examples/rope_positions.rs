//! Prints the 3D rotary positions of the reference tokens and the first
//! video frame, and checks that rotation preserves norms and relative logits.

use avatar_core::numcore::{SeededRng, Tensor};
use avatar_core::rope::{apply_rope, image_latent_positions, video_positions, PositionTriple, RotaryTable};

fn main() -> anyhow::Result<()> {
    let (w, h) = (4, 4);
    let table = RotaryTable::new(16, 10_000.0)?;
    println!("split: time {} / width {} / height {}", table.d_time, table.d_width, table.d_height);
    let fmt = |ps: &[PositionTriple]| ps.iter().map(|p| format!("({},{},{})", p.time, p.width, p.height)).collect::<Vec<_>>().join(" ");
    println!("reference: {}", fmt(&image_latent_positions(w, h)));
    println!("frame 0:   {}", fmt(&video_positions(1, w, h)));

    let mut rng = SeededRng::new(3);
    let x: Tensor<f64> = rng.normal_tensor(&[2, 16], 1.0);
    let (p, q) = (PositionTriple::new(2, 1, 3), PositionTriple::new(-1, 5, 4));
    let shift = PositionTriple::new(7, -2, 1);
    let logit = |t: &Tensor<f64>| t.data()[..16].iter().zip(&t.data()[16..]).map(|(a, b)| a * b).sum::<f64>();
    let a = apply_rope(&x, &[p, q], &table)?;
    let b = apply_rope(&x, &[p.shifted(shift), q.shifted(shift)], &table)?;
    println!("logit at (p, q): {:.12}", logit(&a));
    println!("logit shifted:   {:.12}", logit(&b));
    Ok(())
}
